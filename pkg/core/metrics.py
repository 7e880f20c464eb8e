#!/usr/bin/env python3
"""
纯函数指标

余弦相似度/距离、CTR、困惑度、PSNR、感知距离与线性 CKA
不依赖模型,诊断与训练模块共同使用
"""

import logging
import math
from typing import Sequence, Tuple

import torch

from utils.errors import InputError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8
PSNR_CAP_DB = 99.0
DEGENERATE_RTOL = 1e-12


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """沿最后一维计算 ⟨a,b⟩/(‖a‖‖b‖+eps)"""
    dot = (a * b).sum(dim=-1)
    return dot / (a.norm(dim=-1) * b.norm(dim=-1) + eps)


def cosine_distance(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """1 − 余弦相似度,取值 [0, 2]"""
    return 1.0 - cosine_similarity(a, b, eps)


def ctr(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """
    正确 token 比例

    Args:
        pred: 预测 token(任意形状)
        gt: 真实 token,形状必须一致

    Returns:
        [0, 1] 内的比例
    """
    if pred.shape != gt.shape:
        raise InputError(f"CTR 输入长度不一致: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.numel() == 0:
        raise InputError("CTR 输入为空")
    return (pred == gt).double().mean().item()


def perplexity_from_nll(mean_nll: float) -> float:
    return math.exp(mean_nll)


def psnr_per_image(a: torch.Tensor, b: torch.Tensor, max_value: float = 1.0, cap: float = PSNR_CAP_DB) -> torch.Tensor:
    """
    逐图像 PSNR

    MSE 为 0 时返回上限值 cap
    """
    if a.shape != b.shape:
        raise InputError(f"PSNR 输入形状不一致: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = ((a.double() - b.double()) ** 2).flatten(1).mean(dim=1)
    values = torch.full_like(mse, cap)
    positive = mse > 0
    values[positive] = 10.0 * torch.log10(max_value ** 2 / mse[positive])
    return values.clamp(max=cap)


def psnr(a: torch.Tensor, b: torch.Tensor, max_value: float = 1.0) -> float:
    """批次平均 PSNR(dB)"""
    return psnr_per_image(a, b, max_value).mean().item()


def normalize_channels(features: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((features ** 2).sum(dim=1, keepdim=True))
    return features / (norm + eps)


def perceptual_distance_from_features(
    features_a: Sequence[torch.Tensor],
    features_b: Sequence[torch.Tensor],
) -> torch.Tensor:
    """
    LPIPS 形式的逐图像距离

    每层做通道归一化,对通道求平方差之和再在空间上取平均,各层权重为 1 后求和

    Args:
        features_a: 每层 B×C×h×w 特征
        features_b: 与 features_a 对应的特征

    Returns:
        长度为 B 的距离张量
    """
    if len(features_a) != len(features_b) or not features_a:
        raise InputError("感知距离需要至少一层、且两侧层数一致的特征")

    total = None
    for fa, fb in zip(features_a, features_b):
        diff = (normalize_channels(fa) - normalize_channels(fb)) ** 2
        layer = diff.sum(dim=1).flatten(1).mean(dim=1)
        total = layer if total is None else total + layer
    return total


def cka_score(x: torch.Tensor, y: torch.Tensor) -> Tuple[float, bool]:
    """
    线性核 CKA

    ⟨K_c, L_c⟩_F / (‖K_c‖_F ‖L_c‖_F),K_c = H X Xᵀ H。对线性核等价于
    ‖X_cᵀ Y_c‖²_F / (‖X_cᵀ X_c‖_F ‖Y_cᵀ Y_c‖_F),X_c 为列中心化的 X

    Args:
        x: n×d_x 特征
        y: n×d_y 特征

    Returns:
        (CKA 值, 是否退化)。退化(中心化 Gram 范数为 0)时返回 (0.0, True)
    """
    if x.dim() != 2 or y.dim() != 2 or x.shape[0] != y.shape[0]:
        raise InputError(f"CKA 需要行数相同的二维特征: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[0] < 2:
        raise InputError("CKA 至少需要 2 个样本")

    x = x.double()
    y = y.double()
    xc = x - x.mean(dim=0, keepdim=True)
    yc = y - y.mean(dim=0, keepdim=True)

    cross = torch.linalg.matrix_norm(xc.T @ yc) ** 2
    norm_x = torch.linalg.matrix_norm(xc.T @ xc)
    norm_y = torch.linalg.matrix_norm(yc.T @ yc)
    denominator = norm_x * norm_y

    # 常数特征中心化后只剩舍入残差,按未中心化 Gram 范数的相对量判断
    tol_x = DEGENERATE_RTOL * torch.linalg.matrix_norm(x.T @ x)
    tol_y = DEGENERATE_RTOL * torch.linalg.matrix_norm(y.T @ y)
    if norm_x.item() <= tol_x.item() or norm_y.item() <= tol_y.item():
        logger.warning("CKA 退化: 特征为常数,记为 0")
        return 0.0, True

    value = (cross / denominator).item()
    return min(max(value, 0.0), 1.0), False


def cka(x: torch.Tensor, y: torch.Tensor) -> float:
    """线性 CKA,退化时返回 0"""
    return cka_score(x, y)[0]
