import math

import pytest
import torch

from core.regularizers import (
    NoiseSchedule,
    RegConfig,
    ar_loss,
    corrupt,
    embedding_reg_loss,
    sample_epsilon,
    schedule_value,
    total_loss,
)
from core.transformer import ARTransformer, ProjectionHead
from tests.conftest import CODE_DIM, NUM_CLASSES, SEQ_LEN, VOCAB, make_ar_config, randomize_
from utils.errors import ConfigError, InputError, TrainingFault


@pytest.mark.parametrize('t,expected', [(0.0, 1.0), (0.375, 0.5), (0.75, 0.0), (0.9, 0.0), (1.0, 0.0)])
def test_truncated_schedule_reaches_zero_at_three_quarters(t, expected):
    assert schedule_value(t) == pytest.approx(expected, abs=1e-12)


def test_other_schedules():
    assert schedule_value(0.25, NoiseSchedule('annealed_linear')) == pytest.approx(0.75)
    assert schedule_value(0.9, NoiseSchedule('fixed', level=0.3)) == 0.3
    assert schedule_value(0.0, NoiseSchedule('uniform_range', level=0.2)) == 0.2


def test_schedule_rejects_bad_progress_and_kind():
    with pytest.raises(InputError):
        schedule_value(1.5)
    with pytest.raises(ConfigError):
        NoiseSchedule('cosine')
    with pytest.raises(ConfigError):
        NoiseSchedule('fixed', level=1.5)


def test_sample_epsilon_bounded_by_schedule():
    generator = torch.Generator().manual_seed(0)
    eps = sample_epsilon(0.3, NoiseSchedule(), 500, generator)
    cap = schedule_value(0.3)

    assert eps.shape == (500,)
    assert float(eps.min()) >= 0.0 and float(eps.max()) <= cap
    assert torch.equal(sample_epsilon(0.3, NoiseSchedule('fixed', level=0.2), 4), torch.full((4,), 0.2, dtype=torch.float64))


def test_corrupt_extremes():
    seq = torch.randint(0, 8, (4, 16), generator=torch.Generator().manual_seed(0))

    clean = corrupt(seq, 0.0, 8, torch.Generator().manual_seed(1))
    assert torch.equal(clean.noisy, seq)
    assert not clean.mask.any()

    full = corrupt(seq, 1.0, 8, torch.Generator().manual_seed(1))
    assert full.mask.all()
    assert torch.equal(full.noisy, full.replacements)


# χ²(7) 在 p = 0.01 处的上分位点
CHI2_7DOF_P01 = 18.475


def test_corrupt_statistics():
    seq = torch.zeros(200, 500, dtype=torch.long)
    record = corrupt(seq, 0.3, 8, torch.Generator().manual_seed(0))
    n = seq.numel()

    sigma = math.sqrt(0.3 * 0.7 / n)
    assert abs(record.mask.double().mean().item() - 0.3) <= 3 * sigma
    assert torch.equal(record.noisy[~record.mask], seq[~record.mask])

    replaced = record.noisy[record.mask]
    observed = torch.bincount(replaced, minlength=8).double()
    expected = replaced.numel() / 8
    chi2 = ((observed - expected) ** 2 / expected).sum().item()
    assert chi2 < CHI2_7DOF_P01


def test_full_corruption_keeps_clean_token_at_one_over_k():
    k = 4
    seq = torch.randint(0, k, (200, 500), generator=torch.Generator().manual_seed(3))
    record = corrupt(seq, 1.0, k, torch.Generator().manual_seed(4))

    sigma = math.sqrt((1 / k) * (1 - 1 / k) / seq.numel())
    kept = (record.noisy == seq).double().mean().item()
    assert abs(kept - 1 / k) <= 3 * sigma


def test_sample_epsilon_monte_carlo_mean():
    t = 0.3
    cap = schedule_value(t)
    n = 100_000
    eps = sample_epsilon(t, NoiseSchedule(), n, torch.Generator().manual_seed(5))

    sigma = cap / math.sqrt(12 * n)
    assert abs(eps.mean().item() - cap / 2) <= 3 * sigma


def test_corrupt_per_sequence_epsilon():
    seq = torch.zeros(2, 1000, dtype=torch.long)
    record = corrupt(seq, torch.tensor([0.0, 0.5]), 8, torch.Generator().manual_seed(0))
    assert not record.mask[0].any()
    assert record.mask[1].double().mean().item() == pytest.approx(0.5, abs=0.06)


def test_corrupt_rejects_bad_epsilon():
    with pytest.raises(InputError):
        corrupt(torch.zeros(1, 4, dtype=torch.long), 1.2, 8)


def test_ar_loss_uniform_logits_is_log_k():
    logits = torch.zeros(2, 4, 8)
    targets = torch.randint(0, 8, (2, 4))
    assert ar_loss(logits, targets).item() == pytest.approx(math.log(8))


def test_ar_loss_rejects_non_finite_logits():
    logits = torch.zeros(1, 2, 8)
    logits[0, 0, 0] = float('nan')
    with pytest.raises(TrainingFault):
        ar_loss(logits, torch.zeros(1, 2, dtype=torch.long))


def _heads(dtype=torch.float32):
    torch.manual_seed(0)
    return {
        'shallow': ProjectionHead(8, 16, 4).to(dtype),
        'deep': ProjectionHead(8, 16, 4).to(dtype),
    }


def test_embedding_reg_loss_range_and_codebook_frozen():
    codebook = torch.randn(8, 4, requires_grad=True)
    seq = torch.randint(0, 8, (3, 5))
    feats = torch.randn(3, 5, 8, requires_grad=True)
    tapped = {0: feats, 1: feats * 2}

    loss = embedding_reg_loss(tapped, _heads(), seq, codebook, RegConfig(tap_shallow=0, tap_deep=1))
    loss.backward()

    assert 0.0 <= loss.item() <= 4.0
    assert codebook.grad is None
    assert feats.grad is not None


def test_embedding_reg_loss_terms_can_be_disabled():
    codebook = torch.randn(8, 4)
    seq = torch.randint(0, 8, (3, 5))
    tapped = {0: torch.randn(3, 5, 8), 1: torch.randn(3, 5, 8)}
    heads = _heads()

    both = embedding_reg_loss(tapped, heads, seq, codebook, RegConfig(tap_shallow=0, tap_deep=1))
    shallow = embedding_reg_loss(tapped, heads, seq, codebook, RegConfig(tap_shallow=0, tap_deep=1, deep=False))
    deep = embedding_reg_loss(tapped, heads, seq, codebook, RegConfig(tap_shallow=0, tap_deep=1, shallow=False))

    assert both.item() == pytest.approx(shallow.item() + deep.item(), rel=1e-5)
    with pytest.raises(InputError):
        embedding_reg_loss({0: tapped[0]}, heads, seq, codebook, RegConfig(tap_shallow=0, tap_deep=1))


def test_embedding_reg_loss_targets_current_and_next_token():
    # 投影头恒等: 位置 s 的特征恰为 z[x_{s-1}] 时浅层项为 0
    codebook = torch.randn(8, 4)
    seq = torch.randint(0, 8, (2, 5))
    identity = {'shallow': torch.nn.Identity(), 'deep': torch.nn.Identity()}
    z = codebook[seq]
    shallow_feats = torch.cat([torch.zeros(2, 1, 4), z[:, :-1]], dim=1)
    deep_feats = torch.cat([torch.zeros(2, 1, 4), z[:, 1:]], dim=1)

    loss = embedding_reg_loss({0: shallow_feats, 1: deep_feats}, identity, seq, codebook,
                              RegConfig(tap_shallow=0, tap_deep=1))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_embedding_reg_loss_gradcheck():
    codebook = torch.randn(8, 4, dtype=torch.float64)
    seq = torch.randint(0, 8, (2, 4))
    heads = _heads(torch.float64)
    config = RegConfig(tap_shallow=0, tap_deep=1)
    shallow = torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True)
    deep = torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True)

    def fn(a, b):
        return embedding_reg_loss({0: a, 1: b}, heads, seq, codebook, config)

    assert torch.autograd.gradcheck(fn, (shallow, deep), eps=1e-6, atol=1e-5)


def test_total_loss_lambda_zero_is_exact():
    ar = torch.tensor(1.25)
    reg = torch.tensor(float('nan'))
    assert total_loss(ar, reg, 0.0) is ar
    assert total_loss(ar, torch.tensor(0.5), 2.0).item() == pytest.approx(2.25)


def test_reg_config_rejects_bad_lambda():
    with pytest.raises(ConfigError):
        RegConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        RegConfig(lam=float('inf'))


def test_total_loss_gradcheck_through_full_model():
    torch.manual_seed(0)
    model = randomize_(ARTransformer(make_ar_config())).double().eval()
    seq = torch.randint(0, VOCAB, (3, SEQ_LEN), generator=torch.Generator().manual_seed(1))
    labels = torch.tensor([0, 1, NUM_CLASSES])
    noisy = corrupt(seq, 0.3, VOCAB, torch.Generator().manual_seed(2)).noisy
    codebook = torch.randn(VOCAB, CODE_DIM, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    reg_config = RegConfig(lam=1.0, tap_shallow=0, tap_deep=1)

    names = [
        'token_embedding.weight',
        'class_embedding.weight',
        'blocks.0.attn.qkv.weight',
        'blocks.1.adaLN_modulation.1.weight',
        'blocks.1.mlp.0.weight',
        'heads.shallow.net.0.weight',
        'heads.deep.net.2.weight',
    ]
    params = dict(model.named_parameters())
    inputs = tuple(params[name].detach().clone().requires_grad_(True) for name in names)

    def fn(*tensors):
        overrides = dict(zip(names, tensors))
        output = torch.func.functional_call(model, overrides, (noisy, labels))
        ar = ar_loss(output.logits, seq)
        overridden_heads = {
            'shallow': lambda x: torch.func.functional_call(
                model.heads['shallow'], {'net.0.weight': overrides['heads.shallow.net.0.weight']}, (x,)),
            'deep': lambda x: torch.func.functional_call(
                model.heads['deep'], {'net.2.weight': overrides['heads.deep.net.2.weight']}, (x,)),
        }
        reg = embedding_reg_loss(output.tapped, overridden_heads, seq, codebook, reg_config)
        return total_loss(ar, reg, reg_config.lam)

    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-5, rtol=1e-4)
