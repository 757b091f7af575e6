# 数据模型
# Data models: config schemas and numeric containers
