# 核心模块
# Core modules: settings, logging, exceptions
