#!/usr/bin/env python3
"""
训练目标模块

- 噪声上下文: ε ~ U(0, f(t)) 逐序列采样,每个位置以概率 ε 替换为均匀随机 token
- 码本嵌入正则: 浅层特征对齐当前 token 嵌入,深层特征对齐下一 token 嵌入(余弦距离)
- 联合损失: ar_loss + λ·reg_loss

损失目标只依赖干净序列 x,从不依赖加噪序列 x̃
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.metrics import cosine_distance
from core.tokenizer import lookup
from core.transformer import project
from utils.errors import ConfigError, InputError, TrainingFault
from utils.validators import NOISE_KINDS

logger = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """
    噪声上限调度

    kind:
        fixed              ε 恒为 level
        uniform_range      ε ~ U(0, level)
        annealed_linear    f(t) = 1 − t
        annealed_truncated f(t) = max(0, 1 − slope·t),默认 slope = 4/3
    """

    kind: str = 'annealed_truncated'
    level: float = 0.25
    slope: float = 4.0 / 3.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"未知噪声调度: {self.kind}")
        if not 0.0 <= self.level <= 1.0:
            raise ConfigError(f"噪声水平 {self.level} 不在 [0, 1] 内")

    @classmethod
    def from_run_config(cls, config) -> 'NoiseSchedule':
        return cls(kind=config['noise_kind'], level=config['noise_level'], slope=config['noise_slope'])


@dataclass
class RegConfig:
    """嵌入正则配置"""

    lam: float = 1.0
    tap_shallow: int = 0
    tap_deep: int = 6
    shallow: bool = True
    deep: bool = True
    distance: str = 'cosine'

    def __post_init__(self):
        if not self.lam >= 0 or self.lam == float('inf'):
            raise ConfigError(f"λ 必须是有限的非负数: {self.lam}")
        if self.distance != 'cosine':
            raise ConfigError(f"不支持的距离: {self.distance}")


@dataclass
class CorruptionRecord:
    noisy: torch.Tensor
    mask: torch.Tensor
    replacements: torch.Tensor
    epsilon: torch.Tensor


def schedule_value(t: float, schedule: Optional[NoiseSchedule] = None) -> float:
    """
    训练进度 t 处的最大噪声水平 f(t)

    Args:
        t: 归一化训练进度 [0, 1]
        schedule: 调度,默认截断线性

    Returns:
        [0, 1] 内的噪声上限
    """
    if not 0.0 <= t <= 1.0:
        raise InputError(f"训练进度 t={t} 不在 [0, 1] 内")
    schedule = schedule or NoiseSchedule()

    if schedule.kind in ('fixed', 'uniform_range'):
        return schedule.level
    if schedule.kind == 'annealed_linear':
        return 1.0 - t
    return max(0.0, 1.0 - schedule.slope * t)


def sample_epsilon(
    t: float,
    schedule: NoiseSchedule,
    batch_size: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """每条序列采样一个 ε"""
    cap = schedule_value(t, schedule)
    if schedule.kind == 'fixed':
        return torch.full((batch_size,), cap, dtype=torch.float64)
    return torch.rand(batch_size, generator=generator, dtype=torch.float64) * cap


def corrupt(
    seq: torch.Tensor,
    epsilon: Union[float, torch.Tensor],
    vocab_size: int,
    generator: Optional[torch.Generator] = None,
) -> CorruptionRecord:
    """
    均匀噪声替换

    Args:
        seq: B×N 干净序列(CPU 上采样随机数后再迁移到 seq 所在设备)
        epsilon: 标量或长度 B 的替换概率
        vocab_size: K
        generator: 随机数流

    Returns:
        CorruptionRecord
    """
    b, n = seq.shape
    eps = torch.as_tensor(epsilon, dtype=torch.float64)
    if eps.dim() == 0:
        eps = eps.expand(b)
    if eps.numel() and (eps.min() < 0 or eps.max() > 1):
        raise InputError("ε 必须在 [0, 1] 内")

    draws = torch.rand(b, n, generator=generator, dtype=torch.float64)
    mask = draws < eps.unsqueeze(1)
    replacements = torch.randint(0, vocab_size, (b, n), generator=generator)

    mask = mask.to(seq.device)
    replacements = replacements.to(device=seq.device, dtype=seq.dtype)
    noisy = torch.where(mask, replacements, seq)
    return CorruptionRecord(noisy=noisy, mask=mask, replacements=replacements, epsilon=eps)


def ar_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    所有 N 个位置的平均负对数似然

    Args:
        logits: 在加噪上下文上计算的 B×N×K logits
        targets: B×N 干净序列

    Returns:
        标量损失
    """
    if not torch.isfinite(logits).all():
        raise TrainingFault("logits 中出现 NaN/Inf")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).long())


def embedding_reg_loss(
    tapped: Mapping[int, torch.Tensor],
    heads: Union[nn.ModuleDict, Mapping[str, nn.Module]],
    clean_seq: torch.Tensor,
    codebook: torch.Tensor,
    reg_config: RegConfig,
) -> torch.Tensor:
    """
    码本嵌入正则

    位置 s = 1..N−1 的隐藏特征对应当前 token x_{s-1}、下一 token x_s:
    浅层投影对齐 z[x_{s-1}],深层投影对齐 z[x_s];码本不接收梯度

    Returns:
        两项平均余弦距离之和,取值 [0, 4]
    """
    targets = lookup(clean_seq, codebook.detach())
    zero = clean_seq.new_zeros((), dtype=torch.float32)
    loss = zero

    if reg_config.shallow:
        if reg_config.tap_shallow not in tapped:
            raise InputError(f"缺少浅层 tap 特征: 层 {reg_config.tap_shallow}")
        pred = project(tapped[reg_config.tap_shallow][:, 1:], heads['shallow'])
        loss = loss + cosine_distance(pred, targets[:, :-1].to(pred.dtype)).mean()

    if reg_config.deep:
        if reg_config.tap_deep not in tapped:
            raise InputError(f"缺少深层 tap 特征: 层 {reg_config.tap_deep}")
        pred = project(tapped[reg_config.tap_deep][:, 1:], heads['deep'])
        loss = loss + cosine_distance(pred, targets[:, 1:].to(pred.dtype)).mean()

    return loss


def total_loss(ar: torch.Tensor, reg: torch.Tensor, lam: float) -> torch.Tensor:
    """ar + λ·reg;λ = 0 时精确返回 ar"""
    if lam == 0:
        return ar
    return ar + lam * reg
