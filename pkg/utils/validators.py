#!/usr/bin/env python3
"""
数据验证工具模块

提供配置、张量与报告结构的验证,统一返回 (是否有效, 错误信息)
"""

import logging
import math
from typing import Any, Dict, Mapping, Optional, Tuple

import torch

logger = logging.getLogger(__name__)

NOISE_KINDS = ('fixed', 'uniform_range', 'annealed_linear', 'annealed_truncated')
TRAIN_MODES = ('vanilla', 'noise_only', 'embed_only', 'rear')
TAP_POSITIONS = ('post_block', 'pre_block')
DATASET_SOURCES = ('synthetic_shapes', 'image_folder', 'standard_32x32')
EXPERIMENTS = ('ctr', 'exposure_bias', 'embedding_replacement', 'cka', 'robustness', 'throughput')
REPORT_KEYS = ('experiment', 'conditions', 'records', 'summary')


class ConfigValidator:
    """配置验证器"""

    @staticmethod
    def validate_run_config(config: Mapping[str, Any]) -> Tuple[bool, Optional[str]]:
        """
        验证合并后的运行配置

        Args:
            config: 扁平配置字典

        Returns:
            (是否有效, 错误信息)
        """
        if config['codebook_size'] < 2 or config['codebook_size'] > 65536:
            return False, "codebook_size 必须在 [2, 65536] 范围内(token 以 uint16 存储)"

        if config['codebook_dim'] <= 0:
            return False, "codebook_dim 必须为正数"

        downsample = config['downsample']
        if downsample < 1 or downsample & (downsample - 1):
            return False, "downsample 必须是 2 的幂"

        if config['image_size'] % downsample != 0:
            return False, f"image_size={config['image_size']} 不能被 downsample={downsample} 整除"

        if config['num_classes'] < 1:
            return False, "num_classes 必须为正数"

        if not 0.0 < config['val_fraction'] < 1.0:
            return False, "val_fraction 必须在 (0, 1) 内"

        if config['dataset_source'] not in DATASET_SOURCES:
            return False, f"dataset_source 必须是 {'/'.join(DATASET_SOURCES)} 之一"

        is_valid, error = ConfigValidator.validate_architecture(
            num_layers=config['num_layers'],
            hidden_dim=config['hidden_dim'],
            num_heads=config['num_heads'],
            dropout=config['dropout'],
            tap_shallow=config['tap_shallow'],
            tap_deep=config['tap_deep'],
        )
        if not is_valid:
            return is_valid, error

        if config['tap_position'] not in TAP_POSITIONS:
            return False, f"tap_position 必须是 {'/'.join(TAP_POSITIONS)} 之一"

        if config['mode'] not in TRAIN_MODES:
            return False, f"mode 必须是 {'/'.join(TRAIN_MODES)} 之一"

        if config['noise_kind'] not in NOISE_KINDS:
            return False, f"noise_kind 必须是 {'/'.join(NOISE_KINDS)} 之一"

        if not 0.0 <= config['noise_level'] <= 1.0:
            return False, "noise_level 必须在 [0, 1] 内"

        if config['noise_slope'] <= 0:
            return False, "noise_slope 必须为正数"

        if not math.isfinite(config['reg_lambda']) or config['reg_lambda'] < 0:
            return False, "reg_lambda 必须是有限的非负数"

        if not 0.0 < config['warmup_fraction'] < 1.0:
            return False, "warmup_fraction 必须在 (0, 1) 内"

        for key in ('peak_lr', 'final_lr', 'grad_clip', 'epochs', 'batch_size', 'tok_lr', 'tok_epochs', 'tok_batch_size'):
            if config[key] <= 0:
                return False, f"{key} 必须为正数"

        if config['weight_decay'] < 0:
            return False, "weight_decay 不能为负"

        if not 0.0 <= config['label_dropout'] < 1.0:
            return False, "label_dropout 必须在 [0, 1) 内"

        if config['guidance_scale'] < 1.0:
            return False, "guidance_scale 必须 ≥ 1"

        if config['guidance_power'] <= 0:
            return False, "guidance_power 必须为正数"

        if config['temperature'] != 1.0:
            return False, "temperature 固定为 1.0(不支持温度、top-k 与 top-p 采样)"

        if config['precision'] not in ('fp32', 'bf16'):
            return False, "precision 必须是 fp32 或 bf16"

        if config['experiment'] not in EXPERIMENTS:
            return False, f"experiment 必须是 {'/'.join(EXPERIMENTS)} 之一"

        for key in ('r_grid', 'rprime_grid'):
            out_of_range = [v for v in config[key] if not 0.0 <= v <= 1.0]
            if out_of_range:
                return False, f"{key} 的取值必须在 [0, 1] 内: {out_of_range}"

        if not 0.0 <= config['robustness_noise'] <= 1.0:
            return False, "robustness_noise 必须在 [0, 1] 内"

        if config['num_seeds'] < 1 or config['diag_images'] < 1:
            return False, "num_seeds 与 diag_images 必须为正数"

        if config['throughput_runs'] < 3:
            return False, "throughput_runs 至少为 3(报告中位数)"

        return True, None

    @staticmethod
    def validate_architecture(
        num_layers: int,
        hidden_dim: int,
        num_heads: int,
        dropout: float,
        tap_shallow: int,
        tap_deep: int,
    ) -> Tuple[bool, Optional[str]]:
        """
        验证 Transformer 结构参数

        tap_deep 为 -1 时表示按深度自动放置
        """
        if num_layers < 2:
            return False, "num_layers 至少为 2(需要两个不同的正则层)"

        if num_heads < 1 or hidden_dim % num_heads != 0:
            return False, f"num_heads={num_heads} 必须整除 hidden_dim={hidden_dim}"

        if not 0.0 <= dropout < 1.0:
            return False, "dropout 必须在 [0, 1) 内"

        if tap_deep != -1 and not 0 <= tap_shallow < tap_deep < num_layers:
            return False, f"正则层必须满足 0 ≤ l < l′ < num_layers,当前 l={tap_shallow}, l′={tap_deep}"

        if tap_deep == -1 and not 0 <= tap_shallow < num_layers - 1:
            return False, f"tap_shallow={tap_shallow} 超出范围"

        return True, None


class DataValidator:
    """张量与文件内容验证器"""

    @staticmethod
    def validate_image_batch(images: torch.Tensor, image_size: int, downsample: int) -> Tuple[bool, Optional[str]]:
        """
        验证图像批次

        Args:
            images: B×3×H×W 张量
            image_size: 配置中的边长
            downsample: 下采样倍数

        Returns:
            (是否有效, 错误信息)
        """
        if images.dim() != 4 or images.shape[1] != 3:
            return False, f"图像批次形状必须为 B×3×H×W,实际为 {tuple(images.shape)}"

        height, width = images.shape[-2:]
        if height != image_size or width != image_size:
            return False, f"图像尺寸 {height}×{width} 与配置 {image_size}×{image_size} 不符"

        if height % downsample or width % downsample:
            return False, f"图像尺寸不能被下采样倍数 {downsample} 整除"

        return True, None

    @staticmethod
    def validate_token_indices(indices: torch.Tensor, vocab_size: int) -> Tuple[bool, Optional[str]]:
        """验证 token 索引位于 [0, K)"""
        if indices.dtype not in (torch.int16, torch.int32, torch.int64, torch.uint8):
            return False, f"token 索引必须是整数张量,实际为 {indices.dtype}"

        if indices.numel() == 0:
            return True, None

        low, high = int(indices.min()), int(indices.max())
        if low < 0 or high >= vocab_size:
            return False, f"token 索引越界: 取值范围 [{low}, {high}],应在 [0, {vocab_size})"

        return True, None

    @staticmethod
    def validate_labels(labels: torch.Tensor, num_classes: int) -> Tuple[bool, Optional[str]]:
        """验证类别标签位于 [0, num_classes],其中 num_classes 为空类别"""
        if labels.numel() == 0:
            return True, None

        low, high = int(labels.min()), int(labels.max())
        if low < 0 or high > num_classes:
            return False, f"类别标签越界: 取值范围 [{low}, {high}],应在 [0, {num_classes}]"

        return True, None


class ReportValidator:
    """诊断报告结构验证器"""

    @staticmethod
    def validate_report_dict(report: Dict[str, Any]) -> Tuple[bool, Optional[str]]:
        """
        验证 JSON 报告结构

        Args:
            report: DiagnosticsReport.to_dict() 的结果

        Returns:
            (是否有效, 错误信息)
        """
        for key in REPORT_KEYS:
            if key not in report:
                return False, f"报告缺少字段: {key}"

        if not isinstance(report['experiment'], str) or not report['experiment']:
            return False, "experiment 必须是非空字符串"

        for key in ('conditions', 'records', 'summary'):
            if not isinstance(report[key], list):
                return False, f"{key} 必须是列表"

        for i, record in enumerate(report['records']):
            if not isinstance(record, dict):
                return False, f"records[{i}] 必须是对象"
            if 'seed' not in record or 'condition' not in record:
                return False, f"records[{i}] 缺少 seed 或 condition"

            ctr = record.get('ctr')
            if ctr is not None and not 0.0 <= ctr <= 1.0:
                return False, f"records[{i}] 的 ctr={ctr} 超出 [0, 1]"

            perplexity = record.get('perplexity')
            if perplexity is not None and perplexity < 1.0 - 1e-9:
                return False, f"records[{i}] 的 perplexity={perplexity} 小于 1"

        return True, None
