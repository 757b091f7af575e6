# 日志配置管理
# Logging Configuration Management

import logging
import logging.config
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.core.config import get_settings

settings = get_settings()


# 日志级别规范化：
# - 整数原样返回（10、20 ...）
# - 数字字符串转整数（"20" -> 20）
# - 其他字符串转大写（"info" -> "INFO"）
# - 无法识别时回退到 "INFO"
def normalize_level(level: Any) -> Any:
    try:
        if isinstance(level, int):
            return level
        if isinstance(level, str):
            s = level.strip()
            if s.isdigit():
                return int(s)
            if isinstance(logging.getLevelName(s.upper()), int):
                return s.upper()
    except Exception:
        pass
    return "INFO"


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure the "app" logger tree once for a CLI run."""

    app_level = normalize_level(level or settings.log_level)
    file_path = log_file or (settings.log_file if settings.log_to_file else None)

    handlers: Dict[str, Dict[str, Any]] = {
        "console": {
            "class": "logging.StreamHandler",
            "level": app_level,
            "formatter": "default",
            "stream": "ext://sys.stderr",
        }
    }
    active: List[str] = ["console"]

    if file_path:
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        handlers["file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": app_level,
            "formatter": "detailed",
            "filename": file_path,
            "maxBytes": 10485760,  # 10MB
            "backupCount": 5,
            "encoding": "utf-8",
        }
        active.append("file")

    logging_config: Dict[str, Any] = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "default": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
                "datefmt": "%Y-%m-%d %H:%M:%S",
            },
            "detailed": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(funcName)s - %(lineno)d - %(message)s",
                "datefmt": "%Y-%m-%d %H:%M:%S",
            },
        },
        "handlers": handlers,
        "loggers": {
            "app": {
                "level": app_level,
                "handlers": active,
                "propagate": False,
            },
        },
        "root": {"level": "WARNING", "handlers": active},
    }

    logging.config.dictConfig(logging_config)


def get_logger(name: str) -> logging.Logger:
    """获取指定名称的日志记录器"""
    return logging.getLogger(name)


app_logger = get_logger("app")
