#!/usr/bin/env python3
"""
工具模块包

配置加载、验证、格式化、异常与日志
"""

__version__ = "0.1.0"
