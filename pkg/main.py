#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tensegrity Spine MPC
主入口文件
"""

import sys

from app.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
