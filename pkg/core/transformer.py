#!/usr/bin/env python3
"""
自回归 Transformer 模块

仅解码器的因果 Transformer:
- 类别通过 AdaLN 调制注入,同时作为序列第一个位置的输入
- 注意力带 QK-Norm,可学习位置编码
- 可在指定层输出隐藏状态(tap),配套投影头映射到码本嵌入空间
- 支持 KV 缓存的增量前向

序列约定: 位置 0 输入类别 token,位置 s (s ≥ 1) 输入 x_{s-1};
位置 s 的 logits 预测 x_s
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import torch
import torch.nn as nn

from utils.errors import ConfigError, InputError
from utils.validators import ConfigValidator, DataValidator, TAP_POSITIONS

logger = logging.getLogger(__name__)


def default_deep_tap(num_layers: int) -> int:
    """深层正则层: round(3L/4),且不超过最后一层"""
    return min(num_layers - 1, int(math.floor(0.75 * num_layers + 0.5)))


@dataclass
class ARConfig:
    """自回归模型结构配置"""

    num_layers: int = 8
    hidden_dim: int = 256
    num_heads: int = 8
    vocab_size: int = 256
    seq_len: int = 64
    num_classes: int = 10
    dropout: float = 0.1
    tap_shallow: int = 0
    tap_deep: int = -1
    mlp_ratio: float = 4.0
    head_hidden: int = 2048
    codebook_dim: int = 16
    tap_position: str = 'post_block'
    tied_codebook: bool = False

    def __post_init__(self):
        if self.tap_deep == -1:
            self.tap_deep = default_deep_tap(self.num_layers)

        is_valid, error = ConfigValidator.validate_architecture(
            self.num_layers, self.hidden_dim, self.num_heads, self.dropout, self.tap_shallow, self.tap_deep,
        )
        if not is_valid:
            raise ConfigError(error)
        if self.tap_position not in TAP_POSITIONS:
            raise ConfigError(f"tap_position 必须是 {'/'.join(TAP_POSITIONS)} 之一")
        if self.vocab_size < 2 or self.seq_len < 2 or self.num_classes < 1:
            raise ConfigError("vocab_size/seq_len 至少为 2,num_classes 至少为 1")

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden_dim * self.mlp_ratio)

    @property
    def taps(self) -> List[int]:
        return [self.tap_shallow, self.tap_deep]

    @classmethod
    def from_run_config(cls, config, vocab_size: int, seq_len: int, codebook_dim: int) -> 'ARConfig':
        return cls(
            num_layers=config['num_layers'],
            hidden_dim=config['hidden_dim'],
            num_heads=config['num_heads'],
            vocab_size=vocab_size,
            seq_len=seq_len,
            num_classes=config['num_classes'],
            dropout=config['dropout'],
            tap_shallow=config['tap_shallow'],
            tap_deep=config['tap_deep'],
            mlp_ratio=config['mlp_ratio'],
            head_hidden=config['head_hidden'],
            codebook_dim=codebook_dim,
            tap_position=config['tap_position'],
            tied_codebook=config['tied_codebook'],
        )

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    tapped: Dict[int, torch.Tensor] = field(default_factory=dict)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class KVCache:
    """单个注意力层的键值缓存,归属一个采样批次"""

    def __init__(self):
        self.keys: Optional[torch.Tensor] = None
        self.values: Optional[torch.Tensor] = None

    @property
    def length(self) -> int:
        return 0 if self.keys is None else self.keys.shape[2]

    def append(self, keys: torch.Tensor, values: torch.Tensor):
        if self.keys is None:
            self.keys, self.values = keys, values
        else:
            self.keys = torch.cat([self.keys, keys], dim=2)
            self.values = torch.cat([self.values, values], dim=2)
        return self.keys, self.values


class Attention(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.q_norm = nn.LayerNorm(self.head_dim)
        self.k_norm = nn.LayerNorm(self.head_dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj = nn.Linear(hidden_dim, hidden_dim)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, cache: Optional[KVCache] = None) -> torch.Tensor:
        b, t, c = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = self.q_norm(q), self.k_norm(k)

        offset = 0
        if cache is not None:
            offset = cache.length
            k, v = cache.append(k, v)

        scores = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        causal = torch.ones(t, k.shape[2], dtype=torch.bool, device=x.device).tril(diagonal=offset)
        scores = scores.masked_fill(~causal, float('-inf'))
        attn = self.attn_drop(scores.softmax(dim=-1))

        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj_drop(self.proj(out))


class Block(nn.Module):
    """AdaLN 调制的 Transformer 块"""

    def __init__(self, config: ARConfig):
        super().__init__()
        h = config.hidden_dim
        self.norm1 = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(h, config.num_heads, config.dropout)
        self.norm2 = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(h, config.mlp_hidden),
            nn.GELU(approximate='tanh'),
            nn.Dropout(config.dropout),
            nn.Linear(config.mlp_hidden, h),
            nn.Dropout(config.dropout),
        )
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(h, 6 * h))

    def forward(self, x: torch.Tensor, cond: torch.Tensor, cache: Optional[KVCache] = None) -> torch.Tensor:
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(cond).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa), cache)
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class ProjectionHead(nn.Module):
    """两层 MLP: hidden → head_hidden → GELU → c,逐位置作用"""

    def __init__(self, hidden_dim: int, head_hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(hidden_dim, head_hidden),
            nn.GELU(),
            nn.Linear(head_hidden, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def project(tap_features: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """B×N×hidden 隐藏特征 → B×N×c 嵌入空间预测"""
    return head(tap_features)


class ARTransformer(nn.Module):
    """类别条件的因果 Transformer"""

    def __init__(self, config: ARConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim

        if config.tied_codebook:
            # 消融: 输入与输出都经由冻结码本
            self.register_buffer('codebook', torch.zeros(config.vocab_size, config.codebook_dim))
            self.token_proj = nn.Linear(config.codebook_dim, h)
            self.head_proj = nn.Linear(h, config.codebook_dim)
        else:
            self.token_embedding = nn.Embedding(config.vocab_size, h)
            self.head = nn.Linear(h, config.vocab_size)

        self.class_embedding = nn.Embedding(config.num_classes + 1, h)
        self.pos_embedding = nn.Parameter(torch.zeros(1, config.seq_len, h))
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.num_layers)])
        self.norm_final = nn.LayerNorm(h, elementwise_affine=False, eps=1e-6)
        self.adaLN_final = nn.Sequential(nn.SiLU(), nn.Linear(h, 2 * h))

        self.heads = nn.ModuleDict({
            'shallow': ProjectionHead(h, config.head_hidden, config.codebook_dim),
            'deep': ProjectionHead(h, config.head_hidden, config.codebook_dim),
        })

        self._init_weights()
        logger.info(
            f"AR 模型初始化完成: 层数={config.num_layers}, 隐藏维度={h}, 头数={config.num_heads}, "
            f"K={config.vocab_size}, N={config.seq_len}, 正则层=({config.tap_shallow}, {config.tap_deep}), "
            f"tap 位置={config.tap_position}, 绑定码本={config.tied_codebook}"
        )

    def _init_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)

        # AdaLN-Zero
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.adaLN_final[-1].weight)
        nn.init.zeros_(self.adaLN_final[-1].bias)

    @torch.no_grad()
    def bind_codebook(self, codebook: torch.Tensor) -> None:
        """绑定码本消融需要的冻结码本"""
        if not self.config.tied_codebook:
            return
        if tuple(codebook.shape) != tuple(self.codebook.shape):
            raise ConfigError(f"码本形状 {tuple(codebook.shape)} 与模型配置 {tuple(self.codebook.shape)} 不符")
        self.codebook.copy_(codebook)

    def _check_inputs(self, tokens: torch.Tensor, labels: torch.Tensor) -> None:
        is_valid, error = DataValidator.validate_token_indices(tokens, self.config.vocab_size)
        if not is_valid:
            raise InputError(error)
        is_valid, error = DataValidator.validate_labels(labels, self.config.num_classes)
        if not is_valid:
            raise InputError(error)

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.config.tied_codebook:
            return self.token_proj(self.codebook[tokens])
        return self.token_embedding(tokens)

    def _logits(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_final(cond).chunk(2, dim=1)
        x = modulate(self.norm_final(x), shift, scale)
        if self.config.tied_codebook:
            return self.head_proj(x) @ self.codebook.t()
        return self.head(x)

    def _run(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        caches: Optional[List[KVCache]] = None,
        tap_layers: Iterable[int] = (),
    ) -> ForwardOutput:
        taps = set(tap_layers)
        pre_block = self.config.tap_position == 'pre_block'
        tapped = {}
        for k, block in enumerate(self.blocks):
            if pre_block and k in taps:
                tapped[k] = x
            x = block(x, cond, caches[k] if caches is not None else None)
            if not pre_block and k in taps:
                tapped[k] = x
        return ForwardOutput(logits=self._logits(x, cond), tapped=tapped)

    def forward(
        self,
        tokens: torch.Tensor,
        labels: torch.Tensor,
        tap_layers: Optional[Iterable[int]] = None,
    ) -> ForwardOutput:
        """
        教师强制前向

        Args:
            tokens: B×n token 序列(n ≤ seq_len),作为上下文与目标
            labels: 长度 B 的类别,num_classes 表示空类别
            tap_layers: 需要输出隐藏状态的层,None 表示配置中的两层

        Returns:
            ForwardOutput,logits 形状 B×n×K
        """
        self._check_inputs(tokens, labels)
        n = tokens.shape[1]
        if not 1 <= n <= self.config.seq_len:
            raise InputError(f"序列长度 {n} 超出模型上下文 {self.config.seq_len}")

        cond = self.class_embedding(labels)
        x = torch.cat([cond.unsqueeze(1), self.embed_tokens(tokens[:, :-1])], dim=1)
        x = x + self.pos_embedding[:, :n]
        taps = self.config.taps if tap_layers is None else tap_layers
        return self._run(x, cond, tap_layers=taps)

    def prefix_logits(self, prefix: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """
        无缓存的下一 token logits

        Args:
            prefix: B×i 已生成 token(i 可为 0)
            labels: 类别

        Returns:
            B×K,预测 x_i
        """
        self._check_inputs(prefix, labels)
        i = prefix.shape[1]
        cond = self.class_embedding(labels)
        x = cond.unsqueeze(1)
        if i > 0:
            x = torch.cat([x, self.embed_tokens(prefix)], dim=1)
        x = x + self.pos_embedding[:, :i + 1]
        return self._run(x, cond).logits[:, -1]

    def setup_cache(self) -> List[KVCache]:
        return [KVCache() for _ in self.blocks]

    def step(
        self,
        prev_tokens: Optional[torch.Tensor],
        labels: torch.Tensor,
        position: int,
        caches: List[KVCache],
    ) -> torch.Tensor:
        """
        KV 缓存增量前向

        Args:
            prev_tokens: 长度 B 的上一个 token;position 为 0 时为 None
            labels: 类别
            position: 当前位置(0 ≤ position < seq_len)
            caches: setup_cache 返回的缓存,每层一个

        Returns:
            B×K,预测 x_position
        """
        if not 0 <= position < self.config.seq_len:
            raise InputError(f"位置 {position} 超出模型上下文 {self.config.seq_len}")
        if caches[0].length != position:
            raise InputError(f"缓存长度 {caches[0].length} 与位置 {position} 不一致")

        cond = self.class_embedding(labels)
        if position == 0:
            x = cond.unsqueeze(1)
        else:
            self._check_inputs(prev_tokens, labels)
            x = self.embed_tokens(prev_tokens.unsqueeze(1))
        x = x + self.pos_embedding[:, position:position + 1]
        return self._run(x, cond, caches=caches).logits[:, -1]


@dataclass
class ParameterCount:
    components: Dict[str, int]
    backbone: int
    heads: int

    @property
    def total(self) -> int:
        return self.backbone + self.heads


def count_parameters(config: ARConfig) -> ParameterCount:
    """
    统计可训练参数量,投影头单独列出

    Args:
        config: 模型配置

    Returns:
        ParameterCount
    """
    model = ARTransformer(config)
    components: Dict[str, int] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        top = name.split('.')[0]
        components[top] = components.get(top, 0) + param.numel()

    heads = components.get('heads', 0)
    backbone = sum(v for k, v in components.items() if k != 'heads')
    return ParameterCount(components=components, backbone=backbone, heads=heads)
