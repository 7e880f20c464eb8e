#!/usr/bin/env python3
"""
文件存储管理模块

负责运行目录、检查点容器、token 缓存与报告/图像的读写
所有二进制格式自描述(magic + 版本号),小端序
"""

import hashlib
import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from torchvision.utils import save_image

from core.tokenizer import TokenizerConfig, VQTokenizer, rasterize
from utils.errors import InputError, IntegrityError, MissingArtifactError
from utils.formatters import MetricFormatter
from utils.validators import ReportValidator

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RARCKPT\0"
CHECKPOINT_VERSION = 1
# magic, version(u32), header 长度(u64)
_CKPT_PREFIX = struct.Struct('<8sIQ')
_CRC = struct.Struct('<I')

CACHE_MAGIC = b"RARTOKC\0"
CACHE_VERSION = 1
# magic, version, K, h, w, num_classes, count, sha256
_CACHE_HEADER = struct.Struct('<8sIIHHIQ32s')

_DTYPES = {
    'float32': (torch.float32, '<f4'),
    'float64': (torch.float64, '<f8'),
    'float16': (torch.float16, '<f2'),
    'bfloat16': (torch.bfloat16, '<i2'),
    'int64': (torch.int64, '<i8'),
    'int32': (torch.int32, '<i4'),
    'int16': (torch.int16, '<i2'),
    'uint8': (torch.uint8, '<u1'),
    'bool': (torch.bool, '|b1'),
}


@dataclass
class CheckpointContainer:
    """检查点: 配置快照 + 命名数组 + 元数据(进度、随机流、优化器参数组)"""

    config: Dict[str, Any]
    arrays: Dict[str, torch.Tensor]
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def arrays_with_prefix(self, prefix: str) -> Dict[str, torch.Tensor]:
        return OrderedDict((k[len(prefix):], v) for k, v in self.arrays.items() if k.startswith(prefix))


@dataclass
class TokenCache:
    """预先分词的数据集"""

    labels: torch.Tensor
    indices: torch.Tensor
    vocab_size: int
    height: int
    width: int
    num_classes: int
    checksum: str

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.height * self.width


def _dtype_name(dtype: torch.dtype) -> str:
    for name, (torch_dtype, _) in _DTYPES.items():
        if torch_dtype == dtype:
            return name
    raise InputError(f"检查点不支持的数据类型: {dtype}")


def _tensor_bytes(tensor: torch.Tensor) -> Tuple[str, bytes]:
    name = _dtype_name(tensor.dtype)
    t = tensor.detach().cpu().contiguous()
    if name == 'bfloat16':
        t = t.view(torch.int16)
    array = t.numpy().astype(_DTYPES[name][1], copy=False)
    return name, array.tobytes()


def _tensor_from_bytes(buf: bytes, dtype_name: str, shape: List[int]) -> torch.Tensor:
    if dtype_name not in _DTYPES:
        raise IntegrityError(f"检查点包含未知数据类型: {dtype_name}")
    torch_dtype, np_dtype = _DTYPES[dtype_name]
    array = np.frombuffer(buf, dtype=np_dtype).reshape(shape).copy()
    tensor = torch.from_numpy(array)
    if dtype_name == 'bfloat16':
        return tensor.view(torch.bfloat16)
    return tensor.to(torch_dtype)


def save_checkpoint(path: str, container: CheckpointContainer) -> str:
    """
    写入检查点

    布局: magic | version | header 长度 | JSON header | 原始数组 | CRC32

    Args:
        path: 目标文件
        container: 检查点内容

    Returns:
        文件路径
    """
    index, chunks, offset = [], [], 0
    for name, tensor in container.arrays.items():
        dtype_name, data = _tensor_bytes(tensor)
        index.append({'name': name, 'dtype': dtype_name, 'shape': list(tensor.shape),
                      'offset': offset, 'nbytes': len(data)})
        chunks.append(data)
        offset += len(data)

    header = json.dumps({
        'config': container.config,
        'meta': container.meta,
        'arrays': index,
        'payload_bytes': offset,
    }, ensure_ascii=False, sort_keys=True).encode('utf-8')

    body = _CKPT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b''.join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(body)
        f.write(_CRC.pack(crc))
    os.replace(tmp_path, path)

    logger.info(f"检查点已保存: {path} ({MetricFormatter.format_file_size(len(body) + _CRC.size)}, {len(index)} 个数组)")
    return path


def load_checkpoint(path: str) -> CheckpointContainer:
    """
    读取并校验检查点

    Raises:
        MissingArtifactError: 文件不存在
        IntegrityError: magic/版本/长度/CRC 不符
    """
    if not os.path.exists(path):
        raise MissingArtifactError('检查点', path, 'ar-train 或 tokenizer-train')

    with open(path, 'rb') as f:
        data = f.read()

    if len(data) < _CKPT_PREFIX.size + _CRC.size:
        raise IntegrityError(f"检查点文件过短: {path}")
    magic, version, header_len = _CKPT_PREFIX.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise IntegrityError(f"不是检查点文件(magic 不符): {path}")
    if version > CHECKPOINT_VERSION:
        raise IntegrityError(f"检查点版本 {version} 高于当前支持的 {CHECKPOINT_VERSION}: {path}")

    header_end = _CKPT_PREFIX.size + header_len
    if header_end + _CRC.size > len(data):
        raise IntegrityError(f"检查点长度不符(header 被截断): {path}")

    try:
        header = json.loads(data[_CKPT_PREFIX.size:header_end].decode('utf-8'))
        payload_bytes = int(header['payload_bytes'])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise IntegrityError(f"检查点 header 损坏: {path} ({e})") from e

    if header_end + payload_bytes + _CRC.size != len(data):
        raise IntegrityError(f"检查点长度不符: 期望 {header_end + payload_bytes + _CRC.size} 字节, 实际 {len(data)}: {path}")

    (stored_crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError(f"检查点 CRC 校验失败: {path}")

    arrays: Dict[str, torch.Tensor] = OrderedDict()
    for entry in header['arrays']:
        start = header_end + entry['offset']
        arrays[entry['name']] = _tensor_from_bytes(data[start:start + entry['nbytes']], entry['dtype'], entry['shape'])

    logger.info(f"加载检查点: {path} (版本 {version}, {len(arrays)} 个数组)")
    return CheckpointContainer(config=header['config'], arrays=arrays, meta=header['meta'], version=version)


def module_arrays(module: nn.Module, prefix: str = 'model/') -> Dict[str, torch.Tensor]:
    return OrderedDict((f"{prefix}{k}", v) for k, v in module.state_dict().items())


def restore_module(module: nn.Module, container: CheckpointContainer, prefix: str = 'model/') -> None:
    state = container.arrays_with_prefix(prefix)
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise IntegrityError(f"检查点与模型结构不符: 缺少 {list(missing)[:5]}, 多余 {list(unexpected)[:5]}")


def optimizer_arrays(optimizer: torch.optim.Optimizer) -> Tuple[Dict[str, torch.Tensor], List[Dict]]:
    """优化器状态展平为 optim/<参数序号>/<名称> 数组,参数组进入元数据"""
    state = optimizer.state_dict()
    arrays: Dict[str, torch.Tensor] = OrderedDict()
    for param_id, slots in state['state'].items():
        for name, value in slots.items():
            arrays[f"optim/{param_id}/{name}"] = torch.as_tensor(value)
    groups = []
    for group in state['param_groups']:
        groups.append({k: list(v) if isinstance(v, tuple) else v for k, v in group.items()})
    return arrays, groups


def restore_optimizer(optimizer: torch.optim.Optimizer, container: CheckpointContainer) -> None:
    slots: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, value in container.arrays_with_prefix('optim/').items():
        param_id, name = key.split('/', 1)
        slots.setdefault(int(param_id), {})[name] = value
    groups = []
    for group in container.meta['optimizer_groups']:
        groups.append({k: tuple(v) if k == 'betas' else v for k, v in group.items()})
    optimizer.load_state_dict({'state': slots, 'param_groups': groups})


def save_tokenizer(path: str, tokenizer: VQTokenizer, history: List[Dict], config_snapshot: Dict[str, Any]) -> str:
    container = CheckpointContainer(
        config=config_snapshot,
        arrays=module_arrays(tokenizer),
        meta={'kind': 'tokenizer', 'tokenizer_config': tokenizer.config.to_dict(), 'history': history,
              'checksum': state_checksum(tokenizer)},
    )
    return save_checkpoint(path, container)


def load_tokenizer(path: str, device: str = 'cpu') -> VQTokenizer:
    """读取冻结分词器(eval 模式,参数不再更新)"""
    if not os.path.exists(path):
        raise MissingArtifactError('分词器检查点', path, 'tokenizer-train')
    container = load_checkpoint(path)
    if container.meta.get('kind') != 'tokenizer':
        raise IntegrityError(f"不是分词器检查点: {path}")
    tokenizer = VQTokenizer(TokenizerConfig(**container.meta['tokenizer_config']))
    restore_module(tokenizer, container)
    tokenizer.requires_grad_(False)
    return tokenizer.to(device).eval()


def state_checksum(module: nn.Module) -> str:
    """模型状态的 sha256,用于绑定 token 缓存与分词器"""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        dtype_name, data = _tensor_bytes(tensor)
        digest.update(name.encode('utf-8'))
        digest.update(dtype_name.encode('utf-8'))
        digest.update(data)
    return digest.hexdigest()


def _cache_record_dtype(num_tokens: int) -> np.dtype:
    return np.dtype([('label', '<u2'), ('indices', '<u2', (num_tokens,))])


def cache_file_size(count: int, height: int, width: int) -> int:
    return _CACHE_HEADER.size + count * (2 + 2 * height * width)


def save_token_cache(path: str, cache: TokenCache) -> str:
    """写入 token 缓存: header + 每张图 (label:u16, indices:u16×h·w)"""
    if cache.vocab_size > 65536 or cache.num_classes > 65536:
        raise InputError("token 缓存以 uint16 存储,K 与类别数不能超过 65536")
    records = np.zeros(len(cache), dtype=_cache_record_dtype(cache.num_tokens))
    records['label'] = cache.labels.cpu().numpy()
    records['indices'] = cache.indices.reshape(len(cache), -1).cpu().numpy()

    header = _CACHE_HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, cache.vocab_size, cache.height, cache.width,
        cache.num_classes, len(cache), bytes.fromhex(cache.checksum),
    )
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(records.tobytes())

    logger.info(f"token 缓存已保存: {path} ({len(cache)} 条, {MetricFormatter.format_file_size(cache_file_size(len(cache), cache.height, cache.width))})")
    return path


def load_token_cache(path: str, expected_checksum: Optional[str] = None) -> TokenCache:
    """
    读取 token 缓存

    Args:
        path: 缓存文件
        expected_checksum: 当前分词器的 state_checksum;不一致时拒绝读取

    Returns:
        TokenCache
    """
    if not os.path.exists(path):
        raise MissingArtifactError('token 缓存', path, 'tokenize')

    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < _CACHE_HEADER.size:
        raise IntegrityError(f"token 缓存文件过短: {path}")

    magic, version, vocab_size, height, width, num_classes, count, checksum = _CACHE_HEADER.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise IntegrityError(f"不是 token 缓存文件(magic 不符): {path}")
    if version > CACHE_VERSION:
        raise IntegrityError(f"token 缓存版本 {version} 高于当前支持的 {CACHE_VERSION}: {path}")
    if len(data) != cache_file_size(count, height, width):
        raise IntegrityError(f"token 缓存长度不符: 期望 {cache_file_size(count, height, width)} 字节, 实际 {len(data)}: {path}")

    checksum = checksum.hex()
    if expected_checksum is not None and checksum != expected_checksum:
        raise IntegrityError(
            f"token 缓存 {path} 由另一个分词器生成 (缓存 {checksum[:12]}…, 当前 {expected_checksum[:12]}…),"
            f"请重新运行 `tokenize`"
        )

    records = np.frombuffer(data, dtype=_cache_record_dtype(height * width), offset=_CACHE_HEADER.size)
    indices = torch.from_numpy(records['indices'].astype(np.int64))
    labels = torch.from_numpy(records['label'].astype(np.int64))
    if indices.numel() and int(indices.max()) >= vocab_size:
        raise IntegrityError(f"token 缓存中存在越界索引 (≥ K={vocab_size}): {path}")

    logger.info(f"加载 token 缓存: {path} ({count} 条, K={vocab_size}, 网格 {height}×{width})")
    return TokenCache(labels, indices, vocab_size, height, width, num_classes, checksum)


@torch.no_grad()
def build_token_cache(dataset, tokenizer, path: str, num_classes: int, batch_size: int = 256) -> TokenCache:
    """
    用冻结分词器对数据集逐张分词一次并写入缓存

    Args:
        dataset: ImageDataset
        tokenizer: VQTokenizer
        path: 缓存文件
        num_classes: 类别数
        batch_size: 分词批大小

    Returns:
        写入的 TokenCache
    """
    device = next(tokenizer.parameters()).device
    grid = tokenizer.config.grid_size
    chunks = []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size].to(device)
        chunks.append(rasterize(tokenizer.tokenize(images)).cpu())
    indices = torch.cat(chunks) if chunks else torch.zeros(0, grid * grid, dtype=torch.long)

    cache = TokenCache(
        labels=dataset.labels.clone(),
        indices=indices,
        vocab_size=tokenizer.config.codebook_size,
        height=grid,
        width=grid,
        num_classes=num_classes,
        checksum=state_checksum(tokenizer),
    )
    save_token_cache(path, cache)
    return cache


def write_report(report: Dict[str, Any], path: str) -> Tuple[str, str]:
    """
    写出诊断报告 JSON,并把 records 展平为同名 CSV

    Returns:
        (JSON 路径, CSV 路径)
    """
    is_valid, error = ReportValidator.validate_report_dict(report)
    if not is_valid:
        raise InputError(f"报告结构非法: {error}")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report, f, ensure_ascii=False, indent=2)

    csv_path = os.path.splitext(path)[0] + '.csv'
    pd.DataFrame(report['records']).to_csv(csv_path, index=False)
    logger.info(f"报告已保存: {path}, {csv_path}")
    return path, csv_path


def read_report(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise MissingArtifactError('诊断报告', path, 'diagnose')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            report = json.load(f)
    except json.JSONDecodeError as e:
        raise IntegrityError(f"报告 JSON 损坏: {path} ({e})") from e
    is_valid, error = ReportValidator.validate_report_dict(report)
    if not is_valid:
        raise IntegrityError(f"报告结构非法: {path} ({error})")
    return report


def write_image_grid(images: torch.Tensor, path: str, columns: int = 4) -> str:
    """行优先的 PNG 网格,图像间隔 2 像素"""
    if images.dim() != 4 or images.shape[0] == 0:
        raise InputError(f"图像网格需要非空的 B×C×H×W 批次,实际为 {tuple(images.shape)}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_image(images.detach().cpu().clamp(0.0, 1.0), path, nrow=columns, padding=2)
    logger.info(f"图像网格已保存: {path} ({images.shape[0]} 张, {columns} 列)")
    return path


class StorageManager:
    """运行目录管理器"""

    def __init__(self, base_dir: str):
        """
        初始化存储管理器

        Args:
            base_dir: 运行目录
        """
        self.base_dir = base_dir
        self.checkpoints_dir = os.path.join(base_dir, 'checkpoints')
        self.reports_dir = os.path.join(base_dir, 'reports')
        self.samples_dir = os.path.join(base_dir, 'samples')
        self.figures_dir = os.path.join(base_dir, 'figures')

        for directory in (self.checkpoints_dir, self.reports_dir, self.samples_dir, self.figures_dir):
            os.makedirs(directory, exist_ok=True)

        self.history_file = os.path.join(base_dir, 'run_history.json')
        logger.debug(f"存储管理器初始化完成: {base_dir}")

    def checkpoint_path(self, step: int) -> str:
        return os.path.join(self.checkpoints_dir, f"step_{step:08d}.ckpt")

    def list_checkpoints(self) -> List[str]:
        files = [f for f in os.listdir(self.checkpoints_dir) if f.startswith('step_') and f.endswith('.ckpt')]
        return [os.path.join(self.checkpoints_dir, f) for f in sorted(files)]

    def latest_checkpoint(self) -> Optional[str]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None

    def save_checkpoint(self, step: int, container: CheckpointContainer) -> str:
        path = save_checkpoint(self.checkpoint_path(step), container)
        self._add_to_history({'kind': 'checkpoint', 'path': path, 'step': step, 'size': os.path.getsize(path)})
        return path

    def save_report(self, report: Dict[str, Any], name: str) -> str:
        path, _ = write_report(report, os.path.join(self.reports_dir, f"{name}.json"))
        self._add_to_history({'kind': 'report', 'path': path, 'size': os.path.getsize(path)})
        return path

    def save_json(self, data: Dict[str, Any], name: str) -> str:
        path = os.path.join(self.base_dir, name)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        logger.info(f"已保存: {path}")
        return path

    def save_image_grid(self, images: torch.Tensor, name: str, columns: int) -> str:
        path = write_image_grid(images, os.path.join(self.samples_dir, f"{name}.png"), columns)
        self._add_to_history({'kind': 'samples', 'path': path, 'size': os.path.getsize(path)})
        return path

    def save_figure(self, fig, name: str) -> str:
        """保存 plotly 图表为独立 HTML"""
        path = os.path.join(self.figures_dir, f"{name}.html")
        fig.write_html(path, include_plotlyjs='cdn')
        logger.info(f"图表已保存: {path}")
        return path

    def get_history(self, limit: int = 10) -> List[Dict]:
        """
        获取产物历史记录

        Args:
            limit: 返回的记录数量限制

        Returns:
            按时间倒序的记录列表
        """
        if not os.path.exists(self.history_file):
            return []

        try:
            with open(self.history_file, 'r', encoding='utf-8') as f:
                history = json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"读取历史记录失败: {e}")
            return []

        history.sort(key=lambda x: x['timestamp'], reverse=True)
        return history[:limit]

    def _add_to_history(self, record: Dict):
        history = []
        if os.path.exists(self.history_file):
            try:
                with open(self.history_file, 'r', encoding='utf-8') as f:
                    history = json.load(f)
            except json.JSONDecodeError:
                logger.warning(f"历史记录损坏,重新创建: {self.history_file}")
                history = []

        history.append({'timestamp': datetime.now().isoformat(), **record})

        with open(self.history_file, 'w', encoding='utf-8') as f:
            json.dump(history, f, ensure_ascii=False, indent=2)
