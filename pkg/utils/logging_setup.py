#!/usr/bin/env python3
"""
日志配置

命令行入口调用一次 configure_logging;各模块只使用 logging.getLogger(__name__)
"""

import logging
import os
from typing import Optional

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def configure_logging(level: str = 'INFO', log_file: Optional[str] = None) -> None:
    """
    配置根日志记录器

    Args:
        level: 日志级别名称
        log_file: 额外写入的日志文件路径(可选),通常为运行目录下的 run.log
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def attach_run_log(run_dir: str) -> str:
    """为运行目录追加 run.log 文件处理器,返回日志文件路径"""
    os.makedirs(run_dir, exist_ok=True)
    log_path = os.path.join(run_dir, 'run.log')
    root = logging.getLogger()
    for handler in root.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == os.path.abspath(log_path):
            return log_path
    handler = logging.FileHandler(log_path, encoding='utf-8')
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    return log_path
