#!/usr/bin/env python3
"""
数据集读取模块

三种来源:
- synthetic_shapes: numpy 生成的玩具图形,形状与颜色由类别决定
- image_folder: <root>/<类别名>/*.png|jpg,类别按目录名排序
- standard_32x32: torchvision CIFAR-10

所有图像归一化到 [0,1] 并缩放到配置尺寸,按 split_seed 做分层训练/验证划分
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from utils.errors import ConfigError, IngestionError
from utils.validators import DATASET_SOURCES

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')

SHAPES = ('circle', 'square', 'triangle', 'cross', 'ring')
PALETTE = np.array([
    [0.90, 0.20, 0.20],
    [0.20, 0.70, 0.30],
    [0.20, 0.35, 0.90],
    [0.95, 0.80, 0.15],
    [0.75, 0.30, 0.85],
    [0.15, 0.80, 0.85],
], dtype=np.float32)


@dataclass
class ImageDataset:
    """图像与类别标签"""

    images: torch.Tensor
    labels: torch.Tensor
    class_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.images[index], self.labels[index]

    def subset(self, indices: torch.Tensor) -> 'ImageDataset':
        return ImageDataset(self.images[indices], self.labels[indices], list(self.class_names))

    def label_histogram(self, num_classes: int) -> List[int]:
        return torch.bincount(self.labels, minlength=num_classes).tolist()


@dataclass
class DatasetSplits:
    train: ImageDataset
    val: ImageDataset
    source: str
    split_seed: int

    def summary(self) -> Dict:
        return {
            'source': self.source,
            'split_seed': self.split_seed,
            'train_size': len(self.train),
            'val_size': len(self.val),
        }


def _shape_mask(shape: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx

    if shape == 'circle':
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == 'square':
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == 'triangle':
        # 顶点朝上的等腰三角形
        inside_y = (dy >= -radius) & (dy <= radius)
        return inside_y & (np.abs(dx) <= (dy + radius) * 0.5)
    if shape == 'cross':
        arm = radius * 0.35
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    dist = np.sqrt(dy ** 2 + dx ** 2)
    return (dist <= radius) & (dist >= radius * 0.55)


def render_shape(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """
    绘制一张类别 label 的合成图像

    形状为 SHAPES[label % 5],颜色为 PALETTE[label % 6] 叠加小幅扰动;位置、大小与背景随机

    Returns:
        3×size×size 的 float32 数组,取值 [0,1]
    """
    shape = SHAPES[label % len(SHAPES)]
    color = PALETTE[label % len(PALETTE)] + rng.uniform(-0.05, 0.05, size=3).astype(np.float32)

    background = rng.uniform(0.0, 0.25, size=3).astype(np.float32)
    image = np.empty((3, size, size), dtype=np.float32)
    image[:] = background[:, None, None]
    image += rng.normal(0.0, 0.02, size=image.shape).astype(np.float32)

    radius = rng.uniform(0.22, 0.36) * size
    margin = radius + 1
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    mask = _shape_mask(shape, size, cy, cx, radius)
    image[:, mask] = color[:, None]
    return np.clip(image, 0.0, 1.0)


def generate_synthetic_shapes(num_classes: int, images_per_class: int, image_size: int, seed: int) -> ImageDataset:
    """生成 num_classes × images_per_class 张合成图像,每类数量严格相等"""
    rng = np.random.default_rng(seed)
    images = np.empty((num_classes * images_per_class, 3, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), images_per_class)
    for i, label in enumerate(labels):
        images[i] = render_shape(int(label), image_size, rng)

    names = [f"{SHAPES[c % len(SHAPES)]}_{c % len(PALETTE)}" for c in range(num_classes)]
    logger.info(f"合成数据生成完成: {num_classes} 类 × {images_per_class} 张, 尺寸 {image_size}×{image_size}")
    return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels).long(), names)


def _load_image(path: str, image_size: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert('RGB')
            if img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.Resampling.BICUBIC)
            array = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"无法读取图像 ({e})", path) from e
    return array.transpose(2, 0, 1)


def load_image_folder(root: str, num_classes: int, image_size: int) -> ImageDataset:
    """
    读取按类别分目录的图像

    Args:
        root: 数据根目录
        num_classes: 配置的类别数,必须与子目录数一致
        image_size: 目标边长

    Returns:
        ImageDataset
    """
    if not root or not os.path.isdir(root):
        raise IngestionError("图像目录不存在", root)

    class_names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if len(class_names) != num_classes:
        raise ConfigError(f"图像目录包含 {len(class_names)} 个类别子目录,但 num_classes={num_classes}",
                          key='num_classes')

    images, labels = [], []
    for label, name in enumerate(class_names):
        class_dir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(class_dir) if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            raise IngestionError("类别目录中没有图像", class_dir)
        for filename in files:
            images.append(_load_image(os.path.join(class_dir, filename), image_size))
            labels.append(label)

    logger.info(f"图像目录读取完成: {root}, {len(class_names)} 类, 共 {len(images)} 张")
    return ImageDataset(torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long), class_names)


def load_standard_32x32(root: str, image_size: int, download: bool) -> ImageDataset:
    """读取 CIFAR-10 训练集;缺失且未开启 dataset_download 时报错"""
    from torchvision.datasets import CIFAR10

    try:
        dataset = CIFAR10(root=root, train=True, download=download)
    except RuntimeError as e:
        raise IngestionError(f"CIFAR-10 不可用,可设置 dataset_download=true ({e})", root) from e

    images = torch.from_numpy(dataset.data).permute(0, 3, 1, 2).float() / 255.0
    if image_size != images.shape[-1]:
        images = F.interpolate(images, size=(image_size, image_size), mode='bicubic', align_corners=False)
        images = images.clamp(0.0, 1.0)
    labels = torch.tensor(dataset.targets, dtype=torch.long)
    logger.info(f"CIFAR-10 读取完成: {root}, 共 {len(labels)} 张")
    return ImageDataset(images.contiguous(), labels, list(dataset.classes))


def stratified_split(labels: torch.Tensor, val_fraction: float, split_seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    分层划分

    每类独立打乱,取 round(n_c · val_fraction) 张作为验证集

    Returns:
        (训练索引, 验证索引),均已排序
    """
    generator = torch.Generator().manual_seed(split_seed)
    train_parts, val_parts = [], []
    for label in torch.unique(labels, sorted=True):
        members = torch.nonzero(labels == label, as_tuple=False).flatten()
        members = members[torch.randperm(len(members), generator=generator)]
        n_val = int(round(len(members) * val_fraction))
        val_parts.append(members[:n_val])
        train_parts.append(members[n_val:])
    return torch.cat(train_parts).sort().values, torch.cat(val_parts).sort().values


def ingest_dataset(config) -> DatasetSplits:
    """
    按配置读取数据集并划分

    Args:
        config: RunConfig(dataset_source、dataset_path、num_classes 等)

    Returns:
        DatasetSplits
    """
    source = config['dataset_source']
    if source not in DATASET_SOURCES:
        raise ConfigError(f"未知数据来源: {source}", key='dataset_source')

    if source == 'synthetic_shapes':
        dataset = generate_synthetic_shapes(
            config['num_classes'], config['images_per_class'], config['image_size'], config['split_seed'],
        )
    elif source == 'image_folder':
        dataset = load_image_folder(config['dataset_path'], config['num_classes'], config['image_size'])
    else:
        if config['num_classes'] != 10:
            raise ConfigError("standard_32x32 固定为 10 类", key='num_classes')
        dataset = load_standard_32x32(config['dataset_path'] or 'data/cifar10', config['image_size'],
                                      config['dataset_download'])

    train_idx, val_idx = stratified_split(dataset.labels, config['val_fraction'], config['split_seed'])
    splits = DatasetSplits(dataset.subset(train_idx), dataset.subset(val_idx), source, config['split_seed'])
    logger.info(f"数据集划分完成: 训练 {len(splits.train)} 张, 验证 {len(splits.val)} 张 (split_seed={config['split_seed']})")
    return splits
