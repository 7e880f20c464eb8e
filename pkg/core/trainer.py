#!/usr/bin/env python3
"""
训练流程模块

学习率调度、单步更新(类别丢弃、上下文加噪、嵌入正则、梯度裁剪)与
可断点续训的训练循环。所有随机性来自按 (seed, 流名, 序号) 派生的独立随机流
"""

import json
import logging
import math
import os
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from core.diagnostics import teacher_forced_stats
from core.regularizers import (
    NoiseSchedule,
    RegConfig,
    ar_loss,
    corrupt,
    embedding_reg_loss,
    sample_epsilon,
    total_loss,
)
from core.storage import (
    CheckpointContainer,
    StorageManager,
    TokenCache,
    load_checkpoint,
    module_arrays,
    optimizer_arrays,
    restore_module,
    restore_optimizer,
)
from core.transformer import ARConfig, ARTransformer
from utils.errors import ConfigError, InputError, IntegrityError, TrainingFault
from utils.formatters import MetricFormatter
from utils.validators import TRAIN_MODES

logger = logging.getLogger(__name__)

# 模式 → (上下文加噪, 嵌入正则)
MODE_MATRIX = {
    'vanilla': (False, False),
    'noise_only': (True, False),
    'embed_only': (False, True),
    'rear': (True, True),
}

STREAMS = {'data_order': 0, 'dropout': 1, 'noise': 2, 'label_dropout': 3, 'eval_noise': 4}


@dataclass
class TrainConfig:
    """AR 训练超参数"""

    epochs: int = 100
    batch_size: int = 256
    peak_lr: float = 3e-4
    final_lr: float = 1e-5
    warmup_fraction: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.96
    weight_decay: float = 0.03
    grad_clip: float = 1.0
    label_dropout: float = 0.1
    mode: str = 'rear'
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    reg: RegConfig = field(default_factory=RegConfig)
    seed: int = 0
    checkpoint_every: int = 10
    precision: str = 'fp32'
    eval_noise: float = 0.1

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"未知训练模式: {self.mode}", key='mode')
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction 必须在 (0, 1) 内", key='warmup_fraction')
        for key in ('peak_lr', 'final_lr', 'grad_clip', 'epochs', 'batch_size', 'checkpoint_every'):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} 必须为正数", key=key)
        if not 0.0 <= self.label_dropout < 1.0:
            raise ConfigError("label_dropout 必须在 [0, 1) 内", key='label_dropout')
        if self.precision not in ('fp32', 'bf16'):
            raise ConfigError("precision 必须是 fp32 或 bf16", key='precision')

    @property
    def noise_active(self) -> bool:
        return MODE_MATRIX[self.mode][0]

    @property
    def reg_active(self) -> bool:
        return MODE_MATRIX[self.mode][1] and self.reg.lam > 0 and (self.reg.shallow or self.reg.deep)

    @property
    def effective_lambda(self) -> float:
        return self.reg.lam if self.reg_active else 0.0

    @classmethod
    def from_run_config(cls, config, ar_config: ARConfig) -> 'TrainConfig':
        return cls(
            epochs=config['epochs'],
            batch_size=config['batch_size'],
            peak_lr=config['peak_lr'],
            final_lr=config['final_lr'],
            warmup_fraction=config['warmup_fraction'],
            beta1=config['beta1'],
            beta2=config['beta2'],
            weight_decay=config['weight_decay'],
            grad_clip=config['grad_clip'],
            label_dropout=config['label_dropout'],
            mode=config['mode'],
            noise=NoiseSchedule.from_run_config(config),
            reg=RegConfig(
                lam=config['reg_lambda'],
                tap_shallow=ar_config.tap_shallow,
                tap_deep=ar_config.tap_deep,
                shallow=config['reg_shallow'],
                deep=config['reg_deep'],
            ),
            seed=config['seed'],
            checkpoint_every=config['checkpoint_every'],
            precision=config['precision'],
            eval_noise=config['robustness_noise'],
        )

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class StepResult:
    ar_loss: float
    reg_loss: float
    total_loss: float
    grad_norm: float
    grad_norm_pre_clip: float
    lr: float
    eps_mean: float
    eps_max: float
    labels_dropped: int
    batch_size: int


@dataclass
class TrainResult:
    model: ARTransformer
    run_dir: str
    final_eval: Dict[str, Any]
    last_checkpoint: Optional[str]
    resumed_from: Optional[str] = None


def stream_generator(seed: int, stream: str, index: int) -> torch.Generator:
    """由 (seed, 流名, 序号) 派生的独立 CPU 随机流"""
    state = np.random.SeedSequence([seed, STREAMS[stream], index]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state >> np.uint64(1)))


def _cosine_anneal(x: float, min_y: float, max_y: float) -> float:
    return min_y + (max_y - min_y) * (1 + math.cos(x * math.pi)) / 2


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """
    线性预热 + 余弦衰减

    Args:
        step: 当前步 [0, total_steps]
        total_steps: 总步数
        config: 训练配置

    Returns:
        学习率;预热结束时恰为 peak_lr,最后一步恰为 final_lr
    """
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise InputError(f"step={step} 不在 [0, {total_steps}] 内")

    if step == total_steps:
        return config.final_lr
    # 至少留一步衰减
    warmup_steps = max(1, min(int(round(config.warmup_fraction * total_steps)), total_steps - 1))
    if step == warmup_steps:
        return config.peak_lr
    if step < warmup_steps:
        return config.peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return _cosine_anneal(progress, config.final_lr, config.peak_lr)


def build_optimizer(model: ARTransformer, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.peak_lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def grad_norm(parameters) -> float:
    norms = [p.grad.detach().double().norm() for p in parameters if p.grad is not None]
    if not norms:
        return 0.0
    return torch.stack(norms).norm().item()


def train_step(
    model: ARTransformer,
    optimizer: torch.optim.Optimizer,
    tokens: torch.Tensor,
    labels: torch.Tensor,
    codebook: torch.Tensor,
    config: TrainConfig,
    t: float,
    step_index: int,
    lr: float,
) -> StepResult:
    """
    一次参数更新

    Args:
        model: AR 模型(含投影头)
        optimizer: 优化器
        tokens: B×N 干净序列
        labels: 长度 B 的类别
        codebook: 冻结码本
        config: 训练配置
        t: 归一化训练进度
        step_index: 全局步序号,用于派生随机流
        lr: 本步学习率

    Returns:
        StepResult
    """
    model.train()
    b = tokens.shape[0]
    device = tokens.device

    drop_gen = stream_generator(config.seed, 'label_dropout', step_index)
    dropped = torch.rand(b, generator=drop_gen) < config.label_dropout
    labels = torch.where(dropped.to(device), torch.full_like(labels, model.config.null_class), labels)

    if config.noise_active:
        noise_gen = stream_generator(config.seed, 'noise', step_index)
        epsilon = sample_epsilon(t, config.noise, b, noise_gen)
        context = corrupt(tokens, epsilon, model.config.vocab_size, noise_gen).noisy
    else:
        epsilon = torch.zeros(b, dtype=torch.float64)
        context = tokens

    dropout_seed = int(np.random.SeedSequence([config.seed, STREAMS['dropout'], step_index]).generate_state(1)[0])
    torch.manual_seed(dropout_seed)

    autocast = (torch.autocast(device_type=device.type, dtype=torch.bfloat16)
                if config.precision == 'bf16' else nullcontext())
    with autocast:
        taps = [config.reg.tap_shallow, config.reg.tap_deep] if config.reg_active else []
        output = model(context, labels, tap_layers=taps)
        ar = ar_loss(output.logits, tokens)
        if config.reg_active:
            reg = embedding_reg_loss(output.tapped, model.heads, tokens, codebook, config.reg)
        else:
            reg = torch.zeros((), device=device)
        total = total_loss(ar, reg, config.effective_lambda)

    if not torch.isfinite(total):
        raise TrainingFault(f"损失出现 NaN/Inf: ar={ar.item()}, reg={reg.item()}")

    for group in optimizer.param_groups:
        group['lr'] = lr
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    pre_clip = torch.nn.utils.clip_grad_norm_(params, config.grad_clip).item()
    post_clip = grad_norm(params)
    optimizer.step()

    return StepResult(
        ar_loss=ar.item(),
        reg_loss=reg.item(),
        total_loss=total.item(),
        grad_norm=post_clip,
        grad_norm_pre_clip=pre_clip,
        lr=lr,
        eps_mean=epsilon.mean().item(),
        eps_max=epsilon.max().item(),
        labels_dropped=int(dropped.sum()),
        batch_size=b,
    )


@torch.no_grad()
def evaluate_cache(
    model: ARTransformer,
    cache: TokenCache,
    batch_size: int,
    noise: float = 0.0,
    seed: int = 0,
) -> Dict[str, float]:
    """教师强制下的 CTR 与平均 NLL,noise > 0 时上下文按该比例替换"""
    device = next(model.parameters()).device
    context = None
    if noise > 0:
        context = corrupt(cache.indices, noise, cache.vocab_size, stream_generator(seed, 'eval_noise', 0)).noisy
    stats = teacher_forced_stats(model, cache.indices, cache.labels, batch_size=batch_size,
                                 context=context, device=device)
    return {'ctr': stats.ctr, 'nll': stats.mean_nll, 'perplexity': stats.perplexity}


class MetricsLog:
    """追加写入的 JSON-lines 指标日志"""

    def __init__(self, path: str):
        self.path = path

    def append(self, record: Dict[str, Any]) -> None:
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, ensure_ascii=False) + '\n')

    def read(self) -> List[Dict[str, Any]]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_after(self, step: int) -> None:
        """续训时丢弃检查点之后写入的记录"""
        kept = [r for r in self.read() if r['step'] <= step]
        with open(self.path, 'w', encoding='utf-8') as f:
            for record in kept:
                f.write(json.dumps(record, ensure_ascii=False) + '\n')


def build_model(ar_config: ARConfig, codebook: torch.Tensor, seed: int, device: torch.device) -> ARTransformer:
    torch.manual_seed(seed)
    model = ARTransformer(ar_config)
    model.bind_codebook(codebook.cpu())
    return model.to(device)


def _checkpoint_container(
    model: ARTransformer,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    config_snapshot: Dict[str, Any],
    epoch: int,
    step: int,
    extra_meta: Dict[str, Any],
) -> CheckpointContainer:
    arrays = module_arrays(model)
    optim, groups = optimizer_arrays(optimizer)
    arrays.update(optim)
    meta = {
        'kind': 'ar',
        'ar_config': model.config.to_dict(),
        'train_config': config.to_dict(),
        'epoch': epoch,
        'step': step,
        't': epoch / config.epochs,
        'seed': config.seed,
        'mode': config.mode,
        'streams': sorted(STREAMS),
        'optimizer_groups': groups,
        **extra_meta,
    }
    return CheckpointContainer(config=config_snapshot, arrays=arrays, meta=meta)


def load_ar_model(path: str, device: torch.device) -> Tuple[ARTransformer, CheckpointContainer]:
    """读取 AR 检查点,返回 eval 模式的模型"""
    container = load_checkpoint(path)
    if container.meta.get('kind') != 'ar':
        raise IntegrityError(f"不是 AR 检查点: {path}")
    model = ARTransformer(ARConfig(**container.meta['ar_config']))
    restore_module(model, container)
    return model.to(device).eval(), container


def train_loop(
    train_cache: TokenCache,
    val_cache: TokenCache,
    codebook: torch.Tensor,
    ar_config: ARConfig,
    config: TrainConfig,
    run_dir: str,
    config_snapshot: Dict[str, Any],
    device: torch.device,
    resume: bool = True,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """
    AR 训练主循环

    Args:
        train_cache: 训练 token 缓存
        val_cache: 验证 token 缓存
        codebook: 冻结码本
        ar_config: 模型结构
        config: 训练配置
        run_dir: 运行目录(检查点、metrics.jsonl、final_eval.json)
        config_snapshot: 写入检查点的有效配置
        device: 训练设备
        resume: 存在检查点时是否续训
        stop_after_epoch: 在该轮结束后提前返回(模拟中断)

    Returns:
        TrainResult
    """
    if len(train_cache) == 0:
        raise InputError("训练集为空")
    if train_cache.checksum != val_cache.checksum:
        raise IntegrityError("训练与验证缓存来自不同分词器")

    storage = StorageManager(run_dir)
    metrics = MetricsLog(os.path.join(run_dir, 'metrics.jsonl'))
    codebook = codebook.detach().to(device)

    model = build_model(ar_config, codebook, config.seed, device)
    optimizer = build_optimizer(model, config)

    steps_per_epoch = math.ceil(len(train_cache) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    start_epoch, step = 0, 0
    resumed_from = None

    latest = storage.latest_checkpoint() if resume else None
    if latest:
        container = load_checkpoint(latest)
        if container.meta.get('mode') != config.mode or container.meta.get('seed') != config.seed:
            raise ConfigError(f"运行目录 {run_dir} 中的检查点属于另一组 mode/seed,请更换 ar_run_dir")
        restore_module(model, container)
        restore_optimizer(optimizer, container)
        start_epoch, step = container.meta['epoch'], container.meta['step']
        metrics.truncate_after(step)
        resumed_from = latest
        logger.info(f"从检查点续训: {latest} (第 {start_epoch} 轮, 第 {step} 步)")
    elif os.path.exists(metrics.path):
        os.remove(metrics.path)

    logger.info(
        f"开始 AR 训练: 模式={config.mode}, 加噪={config.noise_active}, 正则={config.reg_active}, "
        f"轮数={config.epochs}, 每轮 {steps_per_epoch} 步, 总步数={total_steps}"
    )

    tokens_all = train_cache.indices
    labels_all = train_cache.labels
    started = time.time()
    last_checkpoint = latest

    for epoch in range(start_epoch, config.epochs):
        t = epoch / config.epochs
        order = torch.randperm(len(train_cache), generator=stream_generator(config.seed, 'data_order', epoch))
        sums = {'ar_loss': 0.0, 'reg_loss': 0.0, 'total_loss': 0.0}
        dropped, seen = 0, 0

        for start in range(0, len(order), config.batch_size):
            index = order[start:start + config.batch_size]
            tokens = tokens_all[index].to(device)
            labels = labels_all[index].to(device)
            try:
                result = train_step(model, optimizer, tokens, labels, codebook, config, t,
                                    step, lr_at(step + 1, total_steps, config))
            except TrainingFault as e:
                logger.error(f"第 {epoch + 1} 轮第 {step} 步训练发散: {e}")
                raise TrainingFault(f"第 {epoch + 1} 轮第 {step} 步训练发散",
                                    last_good_checkpoint=storage.latest_checkpoint()) from e
            step += 1

            record = {'type': 'step', 'step': step, 'epoch': epoch + 1, 't': t, **asdict(result)}
            metrics.append(record)
            for key in sums:
                sums[key] += getattr(result, key)
            dropped += result.labels_dropped
            seen += result.batch_size

        val = evaluate_cache(model, val_cache, config.batch_size)
        batches = math.ceil(len(order) / config.batch_size)
        epoch_record = {
            'type': 'epoch', 'step': step, 'epoch': epoch + 1, 't': t,
            **{k: v / batches for k, v in sums.items()},
            'label_dropout_rate': dropped / seen,
            'val_ctr': val['ctr'], 'val_nll': val['nll'],
        }
        metrics.append(epoch_record)
        logger.info(
            f"第 {epoch + 1}/{config.epochs} 轮: ar={epoch_record['ar_loss']:.4f}, reg={epoch_record['reg_loss']:.4f}, "
            f"val CTR={MetricFormatter.format_percentage(val['ctr'])}, val NLL={val['nll']:.4f}, "
            f"lr={MetricFormatter.format_lr(result.lr)}, 耗时={MetricFormatter.format_duration(time.time() - started)}"
        )

        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
            container = _checkpoint_container(model, optimizer, config, config_snapshot, epoch + 1, step,
                                              {'tokenizer_checksum': train_cache.checksum})
            last_checkpoint = storage.save_checkpoint(step, container)

        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch and epoch + 1 < config.epochs:
            logger.warning(f"在第 {epoch + 1} 轮后提前停止")
            return TrainResult(model, run_dir, {}, last_checkpoint, resumed_from)

    final_eval = final_evaluation(model, val_cache, config)
    storage.save_json(final_eval, 'final_eval.json')
    return TrainResult(model, run_dir, final_eval, last_checkpoint, resumed_from)


def final_evaluation(model: ARTransformer, val_cache: TokenCache, config: TrainConfig) -> Dict[str, Any]:
    clean = evaluate_cache(model, val_cache, config.batch_size)
    noisy = evaluate_cache(model, val_cache, config.batch_size, noise=config.eval_noise, seed=config.seed)
    final_eval = {
        'mode': config.mode,
        'seed': config.seed,
        'val_ctr': clean['ctr'],
        'val_nll': clean['nll'],
        'val_perplexity': clean['perplexity'],
        'noisy_val_ctr': noisy['ctr'],
        'eval_noise': config.eval_noise,
    }
    logger.info(f"最终评估: val CTR={MetricFormatter.format_percentage(clean['ctr'])}, "
                f"噪声 val CTR={MetricFormatter.format_percentage(noisy['ctr'])}, 困惑度={clean['perplexity']:.3f}")
    return final_eval
