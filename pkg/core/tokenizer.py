#!/usr/bin/env python3
"""
VQ 分词器模块

卷积编码器 → 最近邻量化 → 卷积解码器,以及光栅化、码本查表和
"最近错误 token" 查询。码本通过 EMA 更新,编码器使用直通估计
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.metrics import cosine_similarity, psnr
from utils.errors import ConfigError, InputError, TrainingFault
from utils.formatters import MetricFormatter
from utils.validators import DataValidator

logger = logging.getLogger(__name__)


@dataclass
class TokenizerConfig:
    """分词器结构与训练参数"""

    image_size: int = 32
    channels: int = 64
    downsample: int = 4
    codebook_size: int = 256
    codebook_dim: int = 16
    commitment: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    epochs: int = 20
    batch_size: int = 128
    lr: float = 2e-4

    @property
    def grid_size(self) -> int:
        return self.image_size // self.downsample

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2

    @classmethod
    def from_run_config(cls, config) -> 'TokenizerConfig':
        return cls(
            image_size=config['image_size'],
            channels=config['tok_channels'],
            downsample=config['downsample'],
            codebook_size=config['codebook_size'],
            codebook_dim=config['codebook_dim'],
            commitment=config['tok_commitment'],
            ema_decay=config['tok_ema_decay'],
            epochs=config['tok_epochs'],
            batch_size=config['tok_batch_size'],
            lr=config['tok_lr'],
        )

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(min(8, dim), dim),
            nn.SiLU(),
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.GroupNorm(min(8, dim), dim),
            nn.SiLU(),
            nn.Conv2d(dim, dim, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class Encoder(nn.Module):
    """每个阶段: 步长 2 卷积 + 残差块;阶段输出同时作为感知距离特征"""

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        ch = config.channels
        self.stem = nn.Conv2d(3, ch, 3, padding=1)
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(ch, ch, 4, stride=2, padding=1), ResBlock(ch))
            for _ in range(int(math.log2(config.downsample)))
        ])
        self.out = nn.Sequential(nn.GroupNorm(min(8, ch), ch), nn.SiLU(), nn.Conv2d(ch, config.codebook_dim, 1))

    def feature_maps(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = self.stem(x * 2.0 - 1.0)
        maps = [h]
        for stage in self.stages:
            h = stage(h)
            maps.append(h)
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.feature_maps(x)[-1])


class Decoder(nn.Module):
    def __init__(self, config: TokenizerConfig):
        super().__init__()
        ch = config.channels
        self.inp = nn.Conv2d(config.codebook_dim, ch, 3, padding=1)
        self.stages = nn.Sequential(*[
            nn.Sequential(ResBlock(ch), nn.Upsample(scale_factor=2, mode='nearest'), nn.Conv2d(ch, ch, 3, padding=1))
            for _ in range(int(math.log2(config.downsample)))
        ])
        self.out = nn.Sequential(nn.GroupNorm(min(8, ch), ch), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # 输出在 [0,1] 附近,裁剪由 VQTokenizer.decode 负责
        return (self.out(self.stages(self.inp(z))) + 1.0) * 0.5


class VectorQuantizer(nn.Module):
    """
    EMA 码本量化器

    码本不接收梯度,训练时按 EMA 统计更新;长期未被选中的条目用当前批次的
    潜变量重新初始化
    """

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.num_codes = config.codebook_size
        self.code_dim = config.codebook_dim
        self.commitment = config.commitment
        self.decay = config.ema_decay
        self.eps = config.ema_eps

        self.codebook = nn.Embedding(self.num_codes, self.code_dim)
        self.codebook.weight.data.uniform_(-1.0 / self.num_codes, 1.0 / self.num_codes)
        self.codebook.weight.requires_grad_(False)

        self.register_buffer('ema_cluster_size', torch.zeros(self.num_codes))
        self.register_buffer('ema_weight', self.codebook.weight.data.clone())
        self.register_buffer('initialized', torch.zeros((), dtype=torch.bool))

    def forward(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, c, h, w = z.shape
        z_flat = z.permute(0, 2, 3, 1).reshape(-1, c)

        if self.training and not bool(self.initialized):
            self._data_init(z_flat.detach())

        _, indices = quantize(z.detach(), self.codebook.weight)
        indices = indices.reshape(-1)
        z_q = self.codebook(indices)

        if self.training:
            self._ema_update(z_flat.detach(), indices)

        loss = self.commitment * F.mse_loss(z_flat, z_q.detach())
        z_q = z_flat + (z_q - z_flat).detach()
        z_q = z_q.view(b, h, w, c).permute(0, 3, 1, 2).contiguous()
        return z_q, loss, indices.view(b, h, w)

    def _data_init(self, z_flat: torch.Tensor) -> None:
        picks = torch.randint(0, z_flat.shape[0], (self.num_codes,), device=z_flat.device)
        self.codebook.weight.data.copy_(z_flat[picks])
        self.ema_weight.copy_(z_flat[picks])
        self.ema_cluster_size.fill_(1.0)
        self.initialized.fill_(True)
        logger.info(f"码本已用数据初始化: K={self.num_codes}")

    def _ema_update(self, z_flat: torch.Tensor, indices: torch.Tensor) -> None:
        encodings = F.one_hot(indices, self.num_codes).to(z_flat.dtype)
        self.ema_cluster_size.mul_(self.decay).add_(encodings.sum(0), alpha=1 - self.decay)

        n = self.ema_cluster_size.sum()
        cluster_size = (self.ema_cluster_size + self.eps) / (n + self.num_codes * self.eps) * n

        dw = encodings.t() @ z_flat
        self.ema_weight.mul_(self.decay).add_(dw, alpha=1 - self.decay)
        self.codebook.weight.data.copy_(self.ema_weight / cluster_size.unsqueeze(1))

        dead = self.ema_cluster_size < 1e-3
        if dead.any():
            picks = torch.randint(0, z_flat.shape[0], (int(dead.sum()),), device=z_flat.device)
            self.codebook.weight.data[dead] = z_flat[picks]
            self.ema_weight[dead] = z_flat[picks]
            self.ema_cluster_size[dead] = 1.0


class VQTokenizer(nn.Module):
    """编码器-量化器-解码器"""

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.quantizer = VectorQuantizer(config)
        self.decoder = Decoder(config)

    @property
    def codebook(self) -> torch.Tensor:
        """K×c 码本(只读视图)"""
        return self.quantizer.codebook.weight.detach()

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        latent = self.encode(images)
        z_q, vq_loss, indices = self.quantizer(latent)
        return self.decoder(z_q), vq_loss, indices

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """ImageBatch → LatentGrid"""
        is_valid, error = DataValidator.validate_image_batch(images, self.config.image_size, self.config.downsample)
        if not is_valid:
            raise ConfigError(error)
        return self.encoder(images)

    def quantize(self, latent: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """LatentGrid → (QuantizedGrid, TokenGrid 索引)"""
        return quantize(latent, self.codebook)

    def decode(self, quantized: torch.Tensor) -> torch.Tensor:
        """QuantizedGrid → ImageBatch,像素裁剪到 [0,1]"""
        expected = (self.config.codebook_dim, self.config.grid_size, self.config.grid_size)
        if quantized.dim() != 4 or tuple(quantized.shape[1:]) != expected:
            raise ConfigError(f"量化网格形状 {tuple(quantized.shape)} 与解码器配置 B×{expected} 不符")
        return self.decoder(quantized).clamp(0.0, 1.0)

    @torch.no_grad()
    def tokenize(self, images: torch.Tensor) -> torch.Tensor:
        """图像 → B×h×w token 网格"""
        was_training = self.training
        self.eval()
        _, indices = self.quantize(self.encode(images))
        self.train(was_training)
        return indices

    @torch.no_grad()
    def decode_tokens(self, grid: torch.Tensor) -> torch.Tensor:
        """B×h×w token 网格 → 图像"""
        embeddings = lookup(grid, self.codebook)
        return self.decode(embeddings.permute(0, 3, 1, 2).contiguous())

    @torch.no_grad()
    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode_tokens(self.tokenize(images))

    def perceptual_features(self, images: torch.Tensor, num_layers: int = 2) -> List[torch.Tensor]:
        """冻结编码器的中间激活,作为感知距离特征"""
        return self.encoder.feature_maps(images)[:num_layers]


def quantize(latent: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    最近邻量化

    Args:
        latent: B×c×h×w 潜变量
        codebook: K×c 码本

    Returns:
        (量化后的 B×c×h×w 嵌入, B×h×w 索引);距离并列时取最小索引
    """
    if latent.dim() != 4 or latent.shape[1] != codebook.shape[1]:
        raise ConfigError(f"潜变量通道数 {tuple(latent.shape)} 与码本维度 {codebook.shape[1]} 不符")

    b, c, h, w = latent.shape
    z_flat = latent.permute(0, 2, 3, 1).reshape(-1, c)
    distances = torch.cdist(
        z_flat.unsqueeze(0),
        codebook.to(z_flat.dtype).unsqueeze(0),
        compute_mode='donot_use_mm_for_euclid_dist',
    ).squeeze(0)
    indices = torch.argmin(distances, dim=1)
    quantized = codebook[indices].to(latent.dtype)
    return quantized.view(b, h, w, c).permute(0, 3, 1, 2).contiguous(), indices.view(b, h, w)


def rasterize(grid: torch.Tensor) -> torch.Tensor:
    """B×h×w → B×(h·w),行优先"""
    return grid.reshape(grid.shape[0], -1)


def de_rasterize(sequence: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """B×N → B×h×w"""
    if sequence.shape[-1] != height * width:
        raise InputError(f"序列长度 {sequence.shape[-1]} 与网格 {height}×{width} 不符")
    return sequence.reshape(sequence.shape[0], height, width)


def lookup(indices: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """
    码本查表

    Args:
        indices: 任意形状的 token 索引
        codebook: K×c 码本

    Returns:
        indices.shape + (c,) 的嵌入
    """
    is_valid, error = DataValidator.validate_token_indices(indices, codebook.shape[0])
    if not is_valid:
        raise InputError(error)
    return codebook[indices.long()]


def nearest_incorrect_table(codebook: torch.Tensor) -> torch.Tensor:
    """
    对每个条目给出余弦相似度最高的其他条目

    Returns:
        长度为 K 的索引表;并列时取最小索引
    """
    k = codebook.shape[0]
    if k < 2:
        raise InputError("码本至少需要 2 个条目")
    cb = codebook.double()
    similarity = cosine_similarity(cb.unsqueeze(1), cb.unsqueeze(0))
    similarity.fill_diagonal_(-math.inf)
    # argmax 在并列时返回第一个最大值
    return torch.argmax(similarity, dim=1)


def nearest_incorrect(correct_index: int, codebook: torch.Tensor) -> int:
    """与正确条目余弦最接近的错误条目索引"""
    k = codebook.shape[0]
    if k < 2:
        raise InputError("码本至少需要 2 个条目")
    if not 0 <= correct_index < k:
        raise InputError(f"索引 {correct_index} 不在 [0, {k}) 内")
    cb = codebook.double()
    similarity = cosine_similarity(cb, cb[correct_index].expand_as(cb))
    similarity[correct_index] = -math.inf
    return int(torch.argmax(similarity))


@torch.no_grad()
def codebook_usage(tokenizer: VQTokenizer, images: torch.Tensor, batch_size: int = 256) -> float:
    """验证集上至少被选中一次的码本条目比例"""
    used = torch.zeros(tokenizer.config.codebook_size, dtype=torch.bool)
    for start in range(0, images.shape[0], batch_size):
        indices = tokenizer.tokenize(images[start:start + batch_size])
        used[indices.flatten().cpu()] = True
    return used.double().mean().item()


@torch.no_grad()
def evaluate_reconstruction(tokenizer: VQTokenizer, images: torch.Tensor, batch_size: int = 256) -> float:
    """验证集平均 PSNR"""
    was_training = tokenizer.training
    tokenizer.eval()
    total, count = 0.0, 0
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        total += psnr(tokenizer.reconstruct(batch), batch) * batch.shape[0]
        count += batch.shape[0]
    tokenizer.train(was_training)
    return total / max(count, 1)


def train_tokenizer(
    train_images: torch.Tensor,
    val_images: torch.Tensor,
    config: TokenizerConfig,
    seed: int = 0,
    device: str = 'cpu',
) -> Tuple[VQTokenizer, List[Dict]]:
    """
    训练玩具 VQ 分词器

    Args:
        train_images: 训练图像 B×3×H×W
        val_images: 验证图像
        config: 分词器配置
        seed: 随机种子
        device: 训练设备

    Returns:
        (训练好的分词器, 每轮历史记录列表)
    """
    if train_images.shape[0] == 0:
        raise InputError("分词器训练集为空")

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    tokenizer = VQTokenizer(config).to(device)
    params = list(tokenizer.encoder.parameters()) + list(tokenizer.decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)

    val_subset = val_images[:512].to(device)
    history = [{
        'epoch': 0,
        'val_psnr': evaluate_reconstruction(tokenizer, val_subset),
    }]
    logger.info(f"分词器初始化完成: K={config.codebook_size}, c={config.codebook_dim}, "
                f"网格={config.grid_size}×{config.grid_size}, 初始 PSNR={history[0]['val_psnr']:.2f}dB")

    started = time.time()
    for epoch in range(1, config.epochs + 1):
        tokenizer.train()
        order = torch.randperm(train_images.shape[0], generator=generator)
        rec_total, vq_total, batches = 0.0, 0.0, 0

        for start in range(0, len(order), config.batch_size):
            batch = train_images[order[start:start + config.batch_size]].to(device)
            recon, vq_loss, _ = tokenizer(batch)
            rec_loss = F.mse_loss(recon, batch)
            loss = rec_loss + vq_loss

            if not torch.isfinite(loss):
                raise TrainingFault(f"分词器训练在第 {epoch} 轮发散: loss={loss.item()}")

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            rec_total += rec_loss.item()
            vq_total += vq_loss.item()
            batches += 1

        record = {
            'epoch': epoch,
            'recon_loss': rec_total / batches,
            'vq_loss': vq_total / batches,
            'val_psnr': evaluate_reconstruction(tokenizer, val_subset),
            'codebook_usage': codebook_usage(tokenizer, val_subset),
        }
        history.append(record)
        logger.info(
            f"分词器第 {epoch}/{config.epochs} 轮: 重建损失={record['recon_loss']:.5f}, "
            f"PSNR={record['val_psnr']:.2f}dB, 码本使用率={MetricFormatter.format_percentage(record['codebook_usage'])}, "
            f"耗时={MetricFormatter.format_duration(time.time() - started)}"
        )

    tokenizer.eval()
    return tokenizer, history
