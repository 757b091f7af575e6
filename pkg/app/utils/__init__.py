# 工具类模块
# Utility modules: atomic file output and codecs
