#!/usr/bin/env python3
"""
采样模块

逐 token 自回归解码,支持 KV 缓存与 power-cosine 调度的无分类器引导;
另提供按上下文掩码强制使用真实 token 的解码,供暴露偏差实验使用
"""

import logging
import math
import platform
import statistics
import time
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from core.transformer import ARTransformer
from utils.errors import ConfigError, InputError
from utils.formatters import MetricFormatter

logger = logging.getLogger(__name__)


@dataclass
class SampleConfig:
    """采样配置;温度固定为 1.0,不做 top-k/top-p"""

    guidance_scale: float = 4.0
    guidance_power: float = 2.0
    constant_scale: bool = False
    temperature: float = 1.0
    seed: int = 0
    num_tokens: int = 64
    batch_size: int = 16

    def __post_init__(self):
        if self.temperature != 1.0:
            raise ConfigError("temperature 固定为 1.0")
        if self.guidance_scale < 1.0:
            raise ConfigError(f"guidance_scale 必须 ≥ 1: {self.guidance_scale}")
        if self.guidance_power <= 0:
            raise ConfigError(f"guidance_power 必须为正数: {self.guidance_power}")

    @property
    def uses_guidance(self) -> bool:
        return self.guidance_scale != 1.0

    @classmethod
    def from_run_config(cls, config, num_tokens: int) -> 'SampleConfig':
        return cls(
            guidance_scale=config['guidance_scale'],
            guidance_power=config['guidance_power'],
            constant_scale=config['constant_scale'],
            temperature=config['temperature'],
            seed=config['seed'],
            num_tokens=num_tokens,
            batch_size=config['sample_batch'],
        )


def cfg_scale_at(i: int, num_tokens: int, scale: float, power: float, constant: bool = False) -> float:
    """
    第 i 步的引导尺度

    scale_i = 1 + (s−1)·(1 − cos(π·((i+1)/N)^p))/2;constant 时恒为 s
    """
    if not 0 <= i < num_tokens:
        raise InputError(f"步数 i={i} 不在 [0, {num_tokens}) 内")
    if constant or scale == 1.0:
        return scale
    if i == num_tokens - 1:
        return scale
    progress = ((i + 1) / num_tokens) ** power
    return 1.0 + (scale - 1.0) * (1.0 - math.cos(math.pi * progress)) / 2.0


def guided_logits(cond_logits: torch.Tensor, uncond_logits: torch.Tensor, scale: float) -> torch.Tensor:
    """ℓ_u + scale·(ℓ_c − ℓ_u),scale 为 1/0 时精确返回 ℓ_c/ℓ_u"""
    if cond_logits.shape != uncond_logits.shape:
        raise InputError(f"条件/无条件 logits 形状不一致: {tuple(cond_logits.shape)} vs {tuple(uncond_logits.shape)}")
    if scale == 1.0:
        return cond_logits
    if scale == 0.0:
        return uncond_logits
    return uncond_logits + scale * (cond_logits - uncond_logits)


def _draw_tokens(logits: torch.Tensor, uniforms: torch.Tensor) -> torch.Tensor:
    """温度 1.0 下按逆 CDF 采样"""
    probs = F.softmax(logits.double(), dim=-1)
    cdf = probs.cumsum(dim=-1)
    tokens = torch.searchsorted(cdf, uniforms.to(cdf.device, torch.float64).unsqueeze(-1)).squeeze(-1)
    return tokens.clamp_(max=logits.shape[-1] - 1)


@torch.no_grad()
def _decode(
    model: ARTransformer,
    labels: torch.Tensor,
    config: SampleConfig,
    gt_seq: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    use_cache: bool = True,
    return_logits: bool = False,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """
    共用解码循环

    每一步都从同一随机流抽取一组均匀数,掩码位置再用真实 token 覆盖,
    因此空掩码时结果与 sample() 完全一致
    """
    was_training = model.training
    model.eval()
    device = labels.device
    b, n = labels.shape[0], config.num_tokens
    if n > model.config.seq_len:
        raise InputError(f"num_tokens={n} 超出模型上下文 {model.config.seq_len}")

    generator = torch.Generator().manual_seed(config.seed)
    guided = config.uses_guidance
    branch_labels = labels
    if guided:
        null = torch.full_like(labels, model.config.null_class)
        branch_labels = torch.cat([labels, null])

    caches = model.setup_cache() if use_cache else None
    tokens = torch.zeros(b, n, dtype=torch.long, device=device)
    all_logits = torch.zeros(b, n, model.config.vocab_size, dtype=torch.float64) if return_logits else None

    for i in range(n):
        if use_cache:
            prev = None
            if i > 0:
                prev = tokens[:, i - 1]
                if guided:
                    prev = torch.cat([prev, prev])
            logits = model.step(prev, branch_labels, i, caches)
        else:
            prefix = tokens[:, :i]
            if guided:
                prefix = torch.cat([prefix, prefix])
            logits = model.prefix_logits(prefix, branch_labels)

        if guided:
            scale = cfg_scale_at(i, n, config.guidance_scale, config.guidance_power, config.constant_scale)
            logits = guided_logits(logits[:b], logits[b:], scale)

        uniforms = torch.rand(b, generator=generator, dtype=torch.float64)
        next_tokens = _draw_tokens(logits, uniforms)
        if mask is not None:
            next_tokens = torch.where(mask[:, i], gt_seq[:, i], next_tokens)
        tokens[:, i] = next_tokens

        if return_logits:
            all_logits[:, i] = logits.double().cpu()

    model.train(was_training)
    return tokens, all_logits


def sample(
    model: ARTransformer,
    labels: torch.Tensor,
    config: SampleConfig,
    use_cache: bool = True,
) -> torch.Tensor:
    """
    自由解码

    Args:
        model: AR 模型
        labels: 长度 B 的类别
        config: 采样配置
        use_cache: 是否使用 KV 缓存

    Returns:
        B×N token 序列
    """
    tokens, _ = _decode(model, labels, config, use_cache=use_cache)
    return tokens


def sample_with_logits(
    model: ARTransformer,
    labels: torch.Tensor,
    config: SampleConfig,
    use_cache: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """返回 token 序列与每一步的引导后 logits(B×N×K,float64)"""
    return _decode(model, labels, config, use_cache=use_cache, return_logits=True)


def decode_with_context_mask(
    model: ARTransformer,
    gt_seq: torch.Tensor,
    labels: torch.Tensor,
    mask: torch.Tensor,
    config: SampleConfig,
) -> torch.Tensor:
    """
    部分上下文强制为真实 token 的解码

    Args:
        model: AR 模型
        gt_seq: B×N 真实序列
        labels: 类别
        mask: B×N 布尔掩码,True 的位置直接复制真实 token
        config: 采样配置

    Returns:
        B×N 序列,其余位置以实际(混合)前缀为条件采样
    """
    if gt_seq.shape[1] != config.num_tokens or mask.shape != gt_seq.shape:
        raise InputError(f"真实序列/掩码形状 {tuple(gt_seq.shape)}/{tuple(mask.shape)} 与 N={config.num_tokens} 不符")
    tokens, _ = _decode(model, labels, config, gt_seq=gt_seq, mask=mask.bool())
    return tokens


def front_loaded_mask(batch_size: int, num_tokens: int, ratio: float) -> torch.Tensor:
    """前 ⌊rN⌋ 个位置为真"""
    count = int(math.floor(ratio * num_tokens))
    mask = torch.zeros(batch_size, num_tokens, dtype=torch.bool)
    mask[:, :count] = True
    return mask


def interleaved_mask(batch_size: int, num_tokens: int, ratio: float, generator: torch.Generator) -> torch.Tensor:
    """每条序列均匀随机选取 ⌊rN⌋ 个位置"""
    count = int(math.floor(ratio * num_tokens))
    mask = torch.zeros(batch_size, num_tokens, dtype=torch.bool)
    for row in range(batch_size):
        picks = torch.randperm(num_tokens, generator=generator)[:count]
        mask[row, picks] = True
    return mask


def hardware_string(device: torch.device) -> str:
    if device.type == 'cuda':
        return f"cuda:{torch.cuda.get_device_name(device)}"
    return f"cpu:{platform.processor() or platform.machine()}"


def throughput_report(
    model: ARTransformer,
    batch_size: int,
    config: SampleConfig,
    runs: int = 3,
) -> Dict:
    """
    自测吞吐量

    先预热一次,再分别测量 runs 次缓存/无缓存采样,报告中位数

    Returns:
        包含 images_per_sec、tokens_per_sec、batch_size、hardware 等字段的字典
    """
    if runs < 3:
        raise InputError("吞吐量测量至少需要 3 次")
    device = next(model.parameters()).device
    labels = torch.arange(batch_size, device=device) % model.config.num_classes

    def measure(use_cache: bool) -> float:
        sample(model, labels, config, use_cache=use_cache)
        timings = []
        for _ in range(runs):
            if device.type == 'cuda':
                torch.cuda.synchronize(device)
            started = time.perf_counter()
            sample(model, labels, config, use_cache=use_cache)
            if device.type == 'cuda':
                torch.cuda.synchronize(device)
            timings.append(time.perf_counter() - started)
        return batch_size / statistics.median(timings)

    cached = measure(True)
    uncached = measure(False)
    report = {
        'batch_size': batch_size,
        'num_tokens': config.num_tokens,
        'runs': runs,
        'hardware': hardware_string(device),
        'images_per_sec': cached,
        'tokens_per_sec': cached * config.num_tokens,
        'cache_free_images_per_sec': uncached,
        'cache_free_tokens_per_sec': uncached * config.num_tokens,
        'guidance': config.uses_guidance,
    }
    logger.info(f"吞吐量: 缓存 {MetricFormatter.format_throughput(cached, cached * config.num_tokens)}, "
                f"无缓存 {MetricFormatter.format_throughput(uncached, uncached * config.num_tokens)}")
    return report
