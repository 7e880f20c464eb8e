#!/usr/bin/env python3
"""
异常定义模块

所有可预期的失败都以 LabError 子类抛出,命令行入口据此映射退出码:
0 成功, 1 用法/配置错误, 2 运行时错误, 3 完整性错误
"""

from typing import Optional


class LabError(Exception):
    """实验室异常基类"""

    exit_code = 2


class ConfigError(LabError):
    """配置或命令行用法错误"""

    exit_code = 1

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class InputError(LabError):
    """输入数据非法(索引越界、形状不符、参数超出定义域)"""


class IngestionError(LabError):
    """数据集读取失败"""

    def __init__(self, message: str, path: Optional[str] = None):
        if path:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path


class TrainingFault(LabError):
    """训练发散(损失出现 NaN/Inf)"""

    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        if last_good_checkpoint:
            message = f"{message} (最近可用检查点: {last_good_checkpoint})"
        else:
            message = f"{message} (尚无可用检查点)"
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class IntegrityError(LabError):
    """文件损坏、版本不兼容或校验和不匹配"""

    exit_code = 3


class MissingArtifactError(LabError):
    """依赖的产物不存在"""

    def __init__(self, what: str, path: str, producer: str):
        super().__init__(f"缺少{what}: {path},请先运行 `{producer}` 生成")
        self.path = path
        self.producer = producer
