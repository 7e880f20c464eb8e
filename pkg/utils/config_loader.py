#!/usr/bin/env python3
"""
配置加载工具

扁平 key: value 配置,优先级: 默认值 < 配置文件 < 命令行参数
所有键都必须在 CONFIG_REGISTRY 中登记,未知键直接拒绝
"""

import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional

import yaml

from utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfigKey:
    """登记表中的一个配置项"""

    type: Callable[[Any], Any]
    default: Any
    help: str


def parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"无法解析为布尔值: {value!r}")


def parse_float_list(value: Any) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    text = str(value).strip()
    if not text:
        return []
    return [float(part) for part in text.split(',')]


def parse_str_list(value: Any) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    text = str(value).strip()
    if not text:
        return []
    return [part.strip() for part in text.split(',') if part.strip()]


CONFIG_REGISTRY: Dict[str, ConfigKey] = {
    # 运行
    'seed': ConfigKey(int, 0, '全局随机种子'),
    'output_dir': ConfigKey(str, 'runs/default', '运行输出根目录'),
    'device': ConfigKey(str, 'auto', 'auto | cpu | cuda'),
    'precision': ConfigKey(str, 'fp32', 'fp32 | bf16(验收运行保持 fp32)'),
    'log_level': ConfigKey(str, 'INFO', '日志级别'),

    # 数据集
    'dataset_source': ConfigKey(str, 'synthetic_shapes', 'synthetic_shapes | image_folder | standard_32x32'),
    'dataset_path': ConfigKey(str, '', 'image_folder / standard_32x32 的根目录'),
    'dataset_download': ConfigKey(parse_bool, False, 'standard_32x32 缺失时是否下载'),
    'num_classes': ConfigKey(int, 10, '类别数'),
    'images_per_class': ConfigKey(int, 1000, '合成数据每类图像数'),
    'image_size': ConfigKey(int, 32, '图像边长'),
    'split_seed': ConfigKey(int, 0, '训练/验证划分种子'),
    'val_fraction': ConfigKey(float, 0.1, '验证集比例'),

    # 分词器
    'codebook_size': ConfigKey(int, 256, '码本大小 K'),
    'codebook_dim': ConfigKey(int, 16, '码本向量维度 c'),
    'downsample': ConfigKey(int, 4, '空间下采样倍数'),
    'tok_channels': ConfigKey(int, 64, '编码器/解码器通道数'),
    'tok_commitment': ConfigKey(float, 0.25, '承诺损失系数'),
    'tok_ema_decay': ConfigKey(float, 0.99, '码本 EMA 衰减'),
    'tok_epochs': ConfigKey(int, 20, '分词器训练轮数'),
    'tok_batch_size': ConfigKey(int, 128, '分词器批大小'),
    'tok_lr': ConfigKey(float, 2e-4, '分词器学习率'),
    'tokenizer_ckpt': ConfigKey(str, '', '分词器检查点路径(空则为 <output_dir>/tokenizer/tokenizer.ckpt)'),
    'token_cache_dir': ConfigKey(str, '', 'token 缓存目录(空则为 <output_dir>/cache)'),

    # 自回归模型
    'num_layers': ConfigKey(int, 8, 'Transformer 层数'),
    'hidden_dim': ConfigKey(int, 256, '隐藏维度'),
    'num_heads': ConfigKey(int, 8, '注意力头数'),
    'mlp_ratio': ConfigKey(float, 4.0, '前馈网络扩张倍数'),
    'dropout': ConfigKey(float, 0.1, '注意力与前馈 dropout'),
    'tap_shallow': ConfigKey(int, 0, '浅层正则层 l'),
    'tap_deep': ConfigKey(int, -1, '深层正则层 l′(-1 表示 round(3L/4))'),
    'tap_position': ConfigKey(str, 'post_block', 'post_block | pre_block'),
    'head_hidden': ConfigKey(int, 2048, '投影头隐藏宽度'),
    'tied_codebook': ConfigKey(parse_bool, False, '消融: 输入嵌入与输出头绑定码本'),

    # 训练
    'mode': ConfigKey(str, 'rear', 'vanilla | noise_only | embed_only | rear'),
    'epochs': ConfigKey(int, 100, '训练轮数'),
    'batch_size': ConfigKey(int, 256, '批大小'),
    'peak_lr': ConfigKey(float, 3e-4, '峰值学习率'),
    'final_lr': ConfigKey(float, 1e-5, '最终学习率'),
    'warmup_fraction': ConfigKey(float, 0.25, '线性预热占比'),
    'beta1': ConfigKey(float, 0.9, 'AdamW β1'),
    'beta2': ConfigKey(float, 0.96, 'AdamW β2'),
    'weight_decay': ConfigKey(float, 0.03, '权重衰减'),
    'grad_clip': ConfigKey(float, 1.0, '梯度裁剪最大范数'),
    'label_dropout': ConfigKey(float, 0.1, '类别标签丢弃概率'),
    'checkpoint_every': ConfigKey(int, 10, '每多少轮保存检查点'),
    'ar_run_dir': ConfigKey(str, '', 'AR 运行目录(空则为 <output_dir>/ar/<mode>_seed<seed>)'),

    # 噪声与正则
    'noise_kind': ConfigKey(str, 'annealed_truncated', 'fixed | uniform_range | annealed_linear | annealed_truncated'),
    'noise_level': ConfigKey(float, 0.25, 'fixed 的 ε 或 uniform_range 的上限'),
    'noise_slope': ConfigKey(float, 4.0 / 3.0, 'annealed_truncated 的斜率'),
    'reg_lambda': ConfigKey(float, 1.0, '正则项权重 λ'),
    'reg_shallow': ConfigKey(parse_bool, True, '启用浅层(当前嵌入)正则'),
    'reg_deep': ConfigKey(parse_bool, True, '启用深层(下一嵌入)正则'),

    # 采样
    'guidance_scale': ConfigKey(float, 4.0, 'CFG 最大尺度 s'),
    'guidance_power': ConfigKey(float, 2.0, 'power-cosine 幂次 p'),
    'constant_scale': ConfigKey(parse_bool, False, '使用恒定 CFG 尺度'),
    'temperature': ConfigKey(float, 1.0, '采样温度(固定为 1.0)'),
    'num_samples': ConfigKey(int, 16, '采样图像数'),
    'sample_batch': ConfigKey(int, 16, '采样批大小'),
    'sample_label': ConfigKey(int, -1, '采样类别(-1 表示循环所有类别)'),
    'grid_columns': ConfigKey(int, 4, '图像网格列数'),

    # 诊断
    'experiment': ConfigKey(str, 'ctr', 'ctr | exposure_bias | embedding_replacement | cka | robustness | throughput'),
    'r_grid': ConfigKey(parse_float_list, [0.25, 0.5, 0.75], '暴露偏差实验的 r 取值'),
    'rprime_grid': ConfigKey(parse_float_list, [0.0, 0.2, 0.4, 0.6], '嵌入替换实验的 r′ 取值'),
    'num_seeds': ConfigKey(int, 3, '诊断重复种子数'),
    'diag_images': ConfigKey(int, 100, '每个条件的图像数'),
    'robustness_noise': ConfigKey(float, 0.1, '鲁棒性报告的上下文噪声比例'),
    'cka_positions': ConfigKey(int, 1024, 'CKA 采样位置数'),
    'throughput_runs': ConfigKey(int, 3, '吞吐量测量重复次数'),
    'model_tag': ConfigKey(str, '', '诊断报告中的模型标签(空则取 mode)'),

    # 汇总
    'report_runs': ConfigKey(parse_str_list, [], '参与汇总的 AR 运行目录(逗号分隔,空则扫描 <output_dir>/ar)'),
}


def get_default_config() -> Dict[str, Any]:
    """
    获取默认配置

    Returns:
        默认配置字典
    """
    return {key: spec.default for key, spec in CONFIG_REGISTRY.items()}


def _coerce(key: str, value: Any) -> Any:
    if key not in CONFIG_REGISTRY:
        raise ConfigError(f"未知配置项: {key}", key=key)
    try:
        return CONFIG_REGISTRY[key].type(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"配置项 {key} 的取值非法: {value!r} ({e})", key=key) from e


def load_config_file(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    从文件读取扁平配置(不合并默认值)

    Args:
        config_path: 配置文件路径,None 则使用项目根目录下的 config.yaml

    Returns:
        已做类型转换的配置字典
    """
    if config_path is None:
        current_dir = os.path.dirname(os.path.abspath(__file__))
        project_root = os.path.dirname(current_dir)
        config_path = os.path.join(project_root, 'config.yaml')
        if not os.path.exists(config_path):
            return {}
    elif not os.path.exists(config_path):
        raise ConfigError(f"配置文件不存在: {config_path}")

    with open(config_path, 'r', encoding='utf-8') as f:
        raw = yaml.safe_load(f) or {}

    if not isinstance(raw, dict):
        raise ConfigError(f"配置文件必须是 key: value 映射: {config_path}")

    loaded = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"配置必须是扁平结构,{key} 不能嵌套", key=key)
        loaded[key] = _coerce(key, value)
    return loaded


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """解析 --set key=value 形式的覆盖项"""
    overrides = {}
    for pair in pairs:
        if '=' not in pair:
            raise ConfigError(f"覆盖项必须是 key=value 形式: {pair}")
        key, value = pair.split('=', 1)
        key = key.strip()
        overrides[key] = _coerce(key, value.strip())
    return overrides


class RunConfig(Mapping):
    """
    合并后的运行配置

    只读映射;typed 视图由各 core 模块的 from_run_config 构造
    """

    def __init__(self, values: Dict[str, Any], sources: Optional[Dict[str, str]] = None):
        self._values = dict(values)
        self._sources = dict(sources or {})

    def __getitem__(self, key: str) -> Any:
        if key not in self._values:
            raise ConfigError(f"未知配置项: {key}", key=key)
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def source_of(self, key: str) -> str:
        return self._sources.get(key, 'default')

    def replace(self, **changes: Any) -> 'RunConfig':
        values = dict(self._values)
        sources = dict(self._sources)
        for key, value in changes.items():
            values[key] = _coerce(key, value)
            sources[key] = 'override'
        return RunConfig(values, sources)

    def snapshot(self) -> Dict[str, Any]:
        """可直接写入 YAML 的有效配置快照"""
        return {key: self._values[key] for key in CONFIG_REGISTRY}

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.snapshot(), f, allow_unicode=True, sort_keys=False)
        logger.info(f"有效配置快照已保存: {path}")
        return path


def load_run_config(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    构造合并配置: 默认值 < 配置文件 < 覆盖项

    Args:
        config_path: 配置文件路径,None 则使用项目根目录 config.yaml(不存在时只用默认值)
        overrides: 来自命令行的覆盖项

    Returns:
        RunConfig
    """
    values = get_default_config()
    sources = {key: 'default' for key in values}

    for key, value in load_config_file(config_path).items():
        values[key] = value
        sources[key] = 'file'

    for key, value in (overrides or {}).items():
        values[key] = _coerce(key, value)
        sources[key] = 'flag'

    from utils.validators import ConfigValidator

    is_valid, error = ConfigValidator.validate_run_config(values)
    if not is_valid:
        raise ConfigError(error)

    changed = [f"{k}={values[k]}({sources[k]})" for k in values if sources[k] != 'default']
    logger.info(f"配置加载完成,非默认项: {', '.join(changed) if changed else '无'}")
    return RunConfig(values, sources)
