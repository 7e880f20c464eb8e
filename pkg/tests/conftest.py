"""测试公共夹具: 极小的分词器、AR 模型与 token 缓存"""

import pytest
import torch

from core.storage import TokenCache
from core.tokenizer import TokenizerConfig, VQTokenizer
from core.transformer import ARConfig, ARTransformer

VOCAB = 8
SEQ_LEN = 4
NUM_CLASSES = 3
CODE_DIM = 4
CHECKSUM = 'ab' * 32


def make_ar_config(**overrides) -> ARConfig:
    params = dict(
        num_layers=2, hidden_dim=8, num_heads=2, vocab_size=VOCAB, seq_len=SEQ_LEN,
        num_classes=NUM_CLASSES, dropout=0.0, head_hidden=16, codebook_dim=CODE_DIM,
    )
    params.update(overrides)
    return ARConfig(**params)


def randomize_(model: torch.nn.Module, seed: int = 0, std: float = 0.3) -> torch.nn.Module:
    """打破 AdaLN-Zero 初始化,让每一层都参与计算"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(torch.randn(param.shape, generator=generator) * std)
    return model


def make_cache(count: int = 24, seed: int = 0, checksum: str = CHECKSUM) -> TokenCache:
    generator = torch.Generator().manual_seed(seed)
    return TokenCache(
        labels=torch.arange(count) % NUM_CLASSES,
        indices=torch.randint(0, VOCAB, (count, SEQ_LEN), generator=generator),
        vocab_size=VOCAB, height=2, width=2, num_classes=NUM_CLASSES, checksum=checksum,
    )


@pytest.fixture
def ar_config() -> ARConfig:
    return make_ar_config()


@pytest.fixture
def model(ar_config) -> ARTransformer:
    torch.manual_seed(0)
    return randomize_(ARTransformer(ar_config)).eval()


@pytest.fixture
def codebook() -> torch.Tensor:
    return torch.randn(VOCAB, CODE_DIM, generator=torch.Generator().manual_seed(1))


@pytest.fixture
def tokenizer() -> VQTokenizer:
    """4×4 图像 → 2×2 网格,与 AR 夹具的 N=4、K=8、c=4 对应"""
    torch.manual_seed(0)
    config = TokenizerConfig(image_size=4, channels=8, downsample=2, codebook_size=VOCAB,
                             codebook_dim=CODE_DIM, epochs=1, batch_size=8)
    tok = VQTokenizer(config)
    with torch.no_grad():
        tok.quantizer.codebook.weight.copy_(torch.randn(VOCAB, CODE_DIM, generator=torch.Generator().manual_seed(2)))
    return tok.eval()


@pytest.fixture
def train_cache() -> TokenCache:
    return make_cache(count=24, seed=0)


@pytest.fixture
def val_cache() -> TokenCache:
    return make_cache(count=12, seed=1)
