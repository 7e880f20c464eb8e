#!/usr/bin/env python3
"""
格式化工具模块

日志与对比表中的数值格式化
"""

from typing import Iterable, Optional


class MetricFormatter:
    """指标格式化器"""

    @staticmethod
    def format_metric(value: Optional[float], precision: int = 4) -> str:
        """
        格式化单个指标

        Args:
            value: 数值,None 表示缺失
            precision: 小数精度

        Returns:
            格式化后的字符串
        """
        if value is None:
            return "-"
        return f"{value:.{precision}f}"

    @staticmethod
    def format_mean_std(mean: float, std: float, precision: int = 4) -> str:
        return f"{mean:.{precision}f} ± {std:.{precision}f}"

    @staticmethod
    def format_percentage(value: float, precision: int = 1) -> str:
        """0~1 的比例转换为百分比字符串"""
        return f"{value * 100:.{precision}f}%"

    @staticmethod
    def format_lr(lr: float) -> str:
        return f"{lr:.2e}"

    @staticmethod
    def format_float_list(values: Iterable[float]) -> str:
        return ",".join(f"{v:g}" for v in values)

    @staticmethod
    def format_file_size(size_bytes: int) -> str:
        """
        格式化文件大小

        Args:
            size_bytes: 字节数

        Returns:
            格式化后的文件大小字符串
        """
        size = float(size_bytes)
        for unit in ['B', 'KB', 'MB', 'GB']:
            if size < 1024.0:
                return f"{size:.2f} {unit}"
            size /= 1024.0
        return f"{size:.2f} TB"

    @staticmethod
    def format_duration(seconds: float) -> str:
        """
        格式化时长

        Args:
            seconds: 秒数

        Returns:
            格式化后的时长字符串
        """
        seconds = int(round(seconds))
        if seconds < 60:
            return f"{seconds}秒"
        elif seconds < 3600:
            minutes, rest = divmod(seconds, 60)
            return f"{minutes}分{rest}秒"
        else:
            hours = seconds // 3600
            minutes = (seconds % 3600) // 60
            return f"{hours}小时{minutes}分钟"

    @staticmethod
    def format_throughput(images_per_sec: float, tokens_per_sec: float) -> str:
        return f"{images_per_sec:.1f} img/s, {tokens_per_sec:.0f} tok/s"
