# sceneslots_core/logger_setup.py
# 日志系统配置模块

import logging
import sys
from pathlib import Path
from typing import Optional, Union

from logging.handlers import RotatingFileHandler

DEFAULT_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_level_str: str, log_file: Optional[Union[str, Path]] = None, log_format: Optional[str] = None,
                  stream=None) -> None:
    """
    配置全局日志系统。

    Args:
        log_level_str (str): 日志级别字符串 (e.g., "INFO", "DEBUG").
        log_file (str, optional): 日志文件路径，所在目录不存在时自动创建。为空时只输出到控制台。
        log_format (str, optional): 日志格式字符串。如果为None，使用默认格式。
        stream: 控制台输出流，默认 stdout。
    """
    numeric_level = getattr(logging, str(log_level_str).upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"无效的日志级别: {log_level_str}")

    formatter = logging.Formatter(log_format or DEFAULT_FORMAT)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)

    # 清除已存在的处理器，防止重复记录
    if root_logger.hasHandlers():
        for handler in list(root_logger.handlers):
            handler.close()
        root_logger.handlers.clear()

    console_handler = logging.StreamHandler(stream or sys.stdout)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        # 单个文件最大10MB，保留5个备份
        file_handler = RotatingFileHandler(log_path, maxBytes=10 * 1024 * 1024, backupCount=5, encoding='utf-8')
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)
        logging.info(f"日志将记录到文件: {log_path}")
    else:
        logging.info("日志将输出到控制台")

    logging.info(f"日志级别设置为: {str(log_level_str).upper()}")
