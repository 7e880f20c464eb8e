#!/usr/bin/env python3
"""
诊断实验模块

- 教师强制 CTR 与困惑度
- 暴露偏差: 前置真实上下文 vs 均匀穿插真实上下文
- 嵌入替换: 错误 token 按概率 r′ 换成与正确 token 余弦最近的错误 token
- 各层隐藏状态与码本嵌入的 CKA 曲线
- 干净/加噪上下文下训练集与验证集的 CTR(鲁棒性与泛化)

图像侧指标一律以分词器对真实 token 的重建图为参照
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import pandas as pd
import torch
import torch.nn.functional as F

from core.metrics import (
    cka_score,
    cosine_similarity,
    ctr,
    perceptual_distance_from_features,
    perplexity_from_nll,
    psnr_per_image,
)
from core.regularizers import corrupt
from core.sampler import SampleConfig, decode_with_context_mask, front_loaded_mask, interleaved_mask
from core.tokenizer import VQTokenizer, de_rasterize, lookup, nearest_incorrect_table
from core.transformer import ARTransformer
from utils.errors import InputError
from utils.formatters import MetricFormatter
from utils.validators import ReportValidator

logger = logging.getLogger(__name__)

MIN_CKA_POSITIONS = 1000


@dataclass
class DiagnosticsReport:
    """实验记录与按条件汇总的均值/标准差"""

    experiment: str
    conditions: List[Dict[str, Any]]
    records: List[Dict[str, Any]]
    summary: List[Dict[str, Any]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        experiment: str,
        records: List[Dict[str, Any]],
        metric_keys: Sequence[str],
        meta: Optional[Dict[str, Any]] = None,
    ) -> 'DiagnosticsReport':
        df = pd.DataFrame(records)
        conditions = df.drop_duplicates('condition')
        condition_cols = [c for c in df.columns if c not in set(metric_keys) | {'seed', 'num_images', 'num_sequences'}]
        summary = []
        for condition, group in df.groupby('condition', sort=False):
            row = {'condition': condition, 'num_seeds': int(group['seed'].nunique())}
            for key in metric_keys:
                row[f"{key}_mean"] = float(group[key].mean())
                row[f"{key}_std"] = float(group[key].std(ddof=0))
            summary.append(row)
        report = cls(
            experiment=experiment,
            conditions=json.loads(conditions[condition_cols].to_json(orient='records')),
            records=records,
            summary=summary,
            meta=meta or {},
        )
        is_valid, error = ReportValidator.validate_report_dict(report.to_dict())
        if not is_valid:
            raise InputError(f"报告结构非法: {error}")
        return report

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DiagnosticsReport':
        return cls(
            experiment=data['experiment'],
            conditions=data['conditions'],
            records=data['records'],
            summary=data['summary'],
            meta=data.get('meta', {}),
        )

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.summary)

    def log_summary(self) -> None:
        for row in self.summary:
            parts = [
                f"{key[:-5]}={MetricFormatter.format_mean_std(row[key], row[key[:-5] + '_std'])}"
                for key in row if key.endswith('_mean')
            ]
            logger.info(f"[{self.experiment}] {row['condition']}: {', '.join(parts)}")


@dataclass
class CKAProfile:
    model_tag: str
    layers: List[int]
    encoded: List[float]
    decoded: List[float]
    num_positions: int
    degenerate: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TeacherForcedStats:
    predictions: torch.Tensor
    nll: torch.Tensor
    ctr: float

    @property
    def mean_nll(self) -> float:
        return self.nll.mean().item()

    @property
    def perplexity(self) -> float:
        return perplexity_from_nll(self.mean_nll)


@torch.no_grad()
def teacher_forced_stats(
    model: ARTransformer,
    sequences: torch.Tensor,
    labels: torch.Tensor,
    batch_size: int = 256,
    context: Optional[torch.Tensor] = None,
    device: Optional[torch.device] = None,
) -> TeacherForcedStats:
    """
    教师强制前向

    Args:
        model: AR 模型
        sequences: B×N 目标序列
        labels: 类别
        batch_size: 前向批大小
        context: 作为上下文的序列(默认即 sequences,传入加噪序列时目标仍为 sequences)
        device: 计算设备

    Returns:
        逐位置 argmax 预测与负对数似然(float64)
    """
    if sequences.shape[0] == 0:
        raise InputError("教师强制评估的序列为空")
    device = device or next(model.parameters()).device
    context = sequences if context is None else context
    was_training = model.training
    model.eval()

    predictions, nlls = [], []
    for start in range(0, sequences.shape[0], batch_size):
        seq = sequences[start:start + batch_size].to(device)
        ctx = context[start:start + batch_size].to(device)
        lab = labels[start:start + batch_size].to(device)
        logits = model(ctx, lab, tap_layers=[]).logits.double()
        log_probs = F.log_softmax(logits, dim=-1)
        nlls.append(-log_probs.gather(-1, seq.unsqueeze(-1)).squeeze(-1).cpu())
        predictions.append(logits.argmax(dim=-1).cpu())

    model.train(was_training)
    predictions = torch.cat(predictions)
    return TeacherForcedStats(predictions, torch.cat(nlls), ctr(predictions, sequences.cpu()))


def perplexity(model: ARTransformer, sequences: torch.Tensor, labels: torch.Tensor) -> float:
    """教师强制平均 NLL 的指数"""
    return teacher_forced_stats(model, sequences, labels).perplexity


class PerceptualDistance:
    """
    LPIPS 形式的感知距离

    extractor 接收 [0,1] 图像批次,返回若干层 B×C×h×w 特征
    """

    def __init__(self, extractor: Callable[[torch.Tensor], List[torch.Tensor]]):
        self.extractor = extractor

    @classmethod
    def from_tokenizer(cls, tokenizer: VQTokenizer, num_layers: int = 2) -> 'PerceptualDistance':
        return cls(lambda images: tokenizer.perceptual_features(images, num_layers))

    @torch.no_grad()
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise InputError(f"感知距离输入形状不一致: {tuple(a.shape)} vs {tuple(b.shape)}")
        return perceptual_distance_from_features(self.extractor(a), self.extractor(b))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: Callable) -> float:
    return PerceptualDistance(extractor)(a, b).mean().item()


@torch.no_grad()
def decode_sequences(tokenizer: VQTokenizer, sequences: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    device = next(tokenizer.parameters()).device
    grid = tokenizer.config.grid_size
    images = []
    for start in range(0, sequences.shape[0], batch_size):
        seq = sequences[start:start + batch_size].to(device)
        images.append(tokenizer.decode_tokens(de_rasterize(seq, grid, grid)).cpu())
    return torch.cat(images)


def _image_metrics(
    tokenizer: VQTokenizer,
    metric: PerceptualDistance,
    sequences: torch.Tensor,
    reference: torch.Tensor,
) -> Dict[str, float]:
    device = next(tokenizer.parameters()).device
    images = decode_sequences(tokenizer, sequences)
    return {
        'psnr': psnr_per_image(images, reference).mean().item(),
        'perceptual_distance': metric(images.to(device), reference.to(device)).mean().item(),
    }


def _pick(count: int, total: int, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randperm(total, generator=generator)[:min(count, total)].sort().values


def ctr_experiment(
    model: ARTransformer,
    sequences: torch.Tensor,
    labels: torch.Tensor,
    seeds: Iterable[int],
    num_sequences: int,
) -> DiagnosticsReport:
    """验证集上的教师强制 CTR 与困惑度,每个种子抽取不同子集"""
    records = []
    for seed in seeds:
        index = _pick(num_sequences, sequences.shape[0], seed)
        stats = teacher_forced_stats(model, sequences[index], labels[index])
        records.append({
            'seed': seed, 'condition': 'val_teacher_forced',
            'ctr': stats.ctr, 'perplexity': stats.perplexity, 'nll': stats.mean_nll,
            'num_sequences': int(len(index)),
        })
    report = DiagnosticsReport.build('ctr', records, ['ctr', 'perplexity', 'nll'])
    report.log_summary()
    return report


def exposure_bias_experiment(
    model: ARTransformer,
    tokenizer: VQTokenizer,
    sequences: torch.Tensor,
    labels: torch.Tensor,
    r_grid: Sequence[float],
    seeds: Iterable[int],
    sample_config: SampleConfig,
    num_images: int = 100,
    metric: Optional[PerceptualDistance] = None,
) -> DiagnosticsReport:
    """
    暴露偏差实验

    对每个 r 与种子,分别以前置掩码与同样大小 ⌊rN⌋ 的随机穿插掩码解码,
    记录相对真实序列的 CTR、解码序列的困惑度,以及相对重建图的 PSNR/感知距离

    Returns:
        2 × |r_grid| × |seeds| 条记录的报告
    """
    for r in r_grid:
        if not 0.0 <= r <= 1.0:
            raise InputError(f"r={r} 不在 [0, 1] 内")
    metric = metric or PerceptualDistance.from_tokenizer(tokenizer)
    device = next(model.parameters()).device
    n = sequences.shape[1]

    records = []
    for seed in seeds:
        index = _pick(num_images, sequences.shape[0], seed)
        gt = sequences[index].to(device)
        lab = labels[index].to(device)
        reference = decode_sequences(tokenizer, gt)
        config = SampleConfig(**{**asdict(sample_config), 'seed': seed, 'num_tokens': n})

        for r_index, r in enumerate(r_grid):
            mask_gen = torch.Generator().manual_seed(seed * 1000 + r_index)
            masks = {
                'front_loaded': front_loaded_mask(len(index), n, r),
                'interleaved': interleaved_mask(len(index), n, r, mask_gen),
            }
            for protocol, mask in masks.items():
                decoded = decode_with_context_mask(model, gt, lab, mask.to(device), config)
                records.append({
                    'seed': seed,
                    'condition': f"{protocol}@r={r:g}",
                    'protocol': protocol,
                    'r': float(r),
                    'ctr': ctr(decoded.cpu(), gt.cpu()),
                    'perplexity': perplexity(model, decoded, lab),
                    **_image_metrics(tokenizer, metric, decoded, reference),
                    'num_images': int(len(index)),
                })
        logger.info(f"暴露偏差实验: 种子 {seed} 完成")

    report = DiagnosticsReport.build(
        'exposure_bias', records, ['ctr', 'perplexity', 'psnr', 'perceptual_distance'],
        meta={'r_grid': list(map(float, r_grid)), 'guidance_scale': sample_config.guidance_scale},
    )
    report.log_summary()
    return report


def replace_incorrect(
    predictions: torch.Tensor,
    gt: torch.Tensor,
    table: torch.Tensor,
    uniforms: torch.Tensor,
    rprime: float,
) -> torch.Tensor:
    """错误位置以概率 r′ 换成正确 token 的最近错误 token;正确位置不变"""
    incorrect = predictions != gt
    replace = incorrect & (uniforms < rprime)
    return torch.where(replace, table[gt], predictions)


def embedding_replacement_experiment(
    model: ARTransformer,
    tokenizer: VQTokenizer,
    sequences: torch.Tensor,
    labels: torch.Tensor,
    rprime_grid: Sequence[float],
    seeds: Iterable[int],
    num_images: int = 100,
    metric: Optional[PerceptualDistance] = None,
) -> DiagnosticsReport:
    """
    嵌入替换实验

    同一种子下各 r′ 共用一组均匀随机数,因此替换集合随 r′ 单调增大;
    CTR 在各 r′ 下保持不变
    """
    for rp in rprime_grid:
        if not 0.0 <= rp <= 1.0:
            raise InputError(f"r′={rp} 不在 [0, 1] 内")
    metric = metric or PerceptualDistance.from_tokenizer(tokenizer)
    codebook = tokenizer.codebook.cpu()
    table = nearest_incorrect_table(codebook)

    records = []
    for seed in seeds:
        index = _pick(num_images, sequences.shape[0], seed)
        gt = sequences[index].cpu()
        lab = labels[index]
        stats = teacher_forced_stats(model, gt, lab)
        reference = decode_sequences(tokenizer, gt)
        uniforms = torch.rand(gt.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        gt_embed = lookup(gt, codebook).double()

        for rp in rprime_grid:
            replaced = replace_incorrect(stats.predictions, gt, table, uniforms, rp)
            records.append({
                'seed': seed,
                'condition': f"r'={rp:g}",
                'rprime': float(rp),
                'ctr': ctr(replaced, gt),
                'perplexity': stats.perplexity,
                'cosine_similarity': cosine_similarity(lookup(replaced, codebook).double(), gt_embed).mean().item(),
                **_image_metrics(tokenizer, metric, replaced, reference),
                'num_images': int(len(index)),
            })
        logger.info(f"嵌入替换实验: 种子 {seed} 完成")

    report = DiagnosticsReport.build(
        'embedding_replacement', records, ['ctr', 'perplexity', 'cosine_similarity', 'psnr', 'perceptual_distance'],
        meta={'rprime_grid': list(map(float, rprime_grid))},
    )
    report.log_summary()
    return report


@torch.no_grad()
def layer_similarity_profile(
    model: ARTransformer,
    sequences: torch.Tensor,
    labels: torch.Tensor,
    codebook: torch.Tensor,
    num_positions: int = 1024,
    seed: int = 0,
    model_tag: str = '',
    batch_size: int = 256,
) -> CKAProfile:
    """
    逐层 CKA

    位置 s (1 ≤ s < N) 的隐藏状态分别与当前 token 嵌入 z[x_{s-1}] 和下一 token 嵌入 z[x_s] 比较,
    所有层使用同一组随机位置

    Returns:
        CKAProfile
    """
    n = sequences.shape[1]
    available = sequences.shape[0] * (n - 1)
    count = min(max(num_positions, MIN_CKA_POSITIONS), available)
    if count < 2:
        raise InputError("CKA 曲线至少需要 2 个位置")
    if count < MIN_CKA_POSITIONS:
        logger.warning(f"可用位置仅 {available} 个,少于 {MIN_CKA_POSITIONS}")

    generator = torch.Generator().manual_seed(seed)
    flat = torch.randperm(available, generator=generator)[:count]
    rows, slots = flat // (n - 1), flat % (n - 1) + 1
    used_rows, row_map = torch.unique(rows, return_inverse=True)

    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    layers = list(range(model.config.num_layers))
    hidden = {layer: [] for layer in layers}
    for start in range(0, len(used_rows), batch_size):
        chunk = used_rows[start:start + batch_size]
        output = model(sequences[chunk].to(device), labels[chunk].to(device), tap_layers=layers)
        for layer in layers:
            hidden[layer].append(output.tapped[layer].double().cpu())
    model.train(was_training)

    seq = sequences.cpu()
    encoded_target = lookup(seq[rows, slots - 1], codebook.cpu()).double()
    decoded_target = lookup(seq[rows, slots], codebook.cpu()).double()

    profile = CKAProfile(model_tag=model_tag, layers=layers, encoded=[], decoded=[], num_positions=int(count))
    for layer in layers:
        features = torch.cat(hidden[layer])[row_map, slots]
        enc, enc_degenerate = cka_score(features, encoded_target)
        dec, dec_degenerate = cka_score(features, decoded_target)
        profile.encoded.append(enc)
        profile.decoded.append(dec)
        if enc_degenerate or dec_degenerate:
            profile.degenerate.append(f"layer_{layer}")

    logger.info(f"CKA 曲线 ({model_tag or '未命名'}): 编码嵌入 {MetricFormatter.format_float_list(round(v, 3) for v in profile.encoded)}; "
                f"解码嵌入 {MetricFormatter.format_float_list(round(v, 3) for v in profile.decoded)}")
    return profile


def cka_report(profiles: Sequence[CKAProfile], seeds: Sequence[int]) -> DiagnosticsReport:
    records = []
    for seed, profile in zip(seeds, profiles):
        for layer, enc, dec in zip(profile.layers, profile.encoded, profile.decoded):
            records.append({
                'seed': seed, 'condition': f"layer_{layer}", 'layer': layer,
                'cka_encoded': enc, 'cka_decoded': dec, 'num_sequences': profile.num_positions,
            })
    return DiagnosticsReport.build(
        'cka', records, ['cka_encoded', 'cka_decoded'],
        meta={'model_tag': profiles[0].model_tag if profiles else '', 'profiles': [p.to_dict() for p in profiles]},
    )


def robustness_report(
    model: ARTransformer,
    train_sequences: torch.Tensor,
    train_labels: torch.Tensor,
    val_sequences: torch.Tensor,
    val_labels: torch.Tensor,
    noise_level: float,
    seeds: Iterable[int],
    num_sequences: int = 1000,
) -> DiagnosticsReport:
    """
    {train, val} × {clean, noisy} 四个单元的教师强制 CTR

    meta 中附带训练-验证差距(泛化)与验证集 NLL
    """
    if not 0.0 <= noise_level <= 1.0:
        raise InputError(f"噪声比例 {noise_level} 不在 [0, 1] 内")
    vocab_size = model.config.vocab_size
    splits = {'train': (train_sequences, train_labels), 'val': (val_sequences, val_labels)}

    records = []
    for seed in seeds:
        for split, (sequences, labels) in splits.items():
            index = _pick(num_sequences, sequences.shape[0], seed)
            seq, lab = sequences[index], labels[index]
            noisy = corrupt(seq, noise_level, vocab_size, torch.Generator().manual_seed(seed)).noisy
            for context_name, context in (('clean', None), ('noisy', noisy)):
                stats = teacher_forced_stats(model, seq, lab, context=context)
                records.append({
                    'seed': seed, 'condition': f"{split}/{context_name}",
                    'split': split, 'context': context_name,
                    'ctr': stats.ctr, 'perplexity': stats.perplexity, 'nll': stats.mean_nll,
                    'num_sequences': int(len(index)),
                })

    df = pd.DataFrame(records)
    means = df.groupby('condition')['ctr'].mean()
    meta = {
        'noise_level': noise_level,
        'generalization_gap_clean': float(means['train/clean'] - means['val/clean']),
        'generalization_gap_noisy': float(means['train/noisy'] - means['val/noisy']),
        'val_nll': float(df[df['condition'] == 'val/clean']['nll'].mean()),
    }
    report = DiagnosticsReport.build('robustness', records, ['ctr', 'perplexity', 'nll'], meta=meta)
    report.log_summary()
    logger.info(f"泛化差距: 干净 {meta['generalization_gap_clean']:+.4f}, 加噪 {meta['generalization_gap_noisy']:+.4f}")
    return report


def throughput_diagnostics(throughput: Dict[str, Any], seed: int) -> DiagnosticsReport:
    records = [
        {'seed': seed, 'condition': 'kv_cache', 'images_per_sec': throughput['images_per_sec'],
         'tokens_per_sec': throughput['tokens_per_sec']},
        {'seed': seed, 'condition': 'cache_free', 'images_per_sec': throughput['cache_free_images_per_sec'],
         'tokens_per_sec': throughput['cache_free_tokens_per_sec']},
    ]
    return DiagnosticsReport.build('throughput', records, ['images_per_sec', 'tokens_per_sec'], meta=throughput)
