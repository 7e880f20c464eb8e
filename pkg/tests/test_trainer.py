import json
import os

import pytest
import torch

from core.regularizers import NoiseSchedule, RegConfig, schedule_value
from core.storage import StorageManager, load_checkpoint
from core.trainer import (
    MODE_MATRIX,
    STREAMS,
    MetricsLog,
    TrainConfig,
    build_optimizer,
    load_ar_model,
    lr_at,
    stream_generator,
    train_loop,
    train_step,
)
from core.transformer import ARTransformer
from tests.conftest import CHECKSUM, NUM_CLASSES, SEQ_LEN, VOCAB, make_ar_config, make_cache
from utils.errors import ConfigError, InputError, IntegrityError


def _train_config(**overrides):
    params = dict(epochs=2, batch_size=8, peak_lr=1e-2, final_lr=1e-4, warmup_fraction=0.25, mode='rear',
                  reg=RegConfig(lam=1.0, tap_shallow=0, tap_deep=1), seed=0, checkpoint_every=1)
    params.update(overrides)
    return TrainConfig(**params)


def _batch(batch_size=8, seed=0):
    generator = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, VOCAB, (batch_size, SEQ_LEN), generator=generator)
    labels = torch.arange(batch_size) % NUM_CLASSES
    return tokens, labels


def test_mode_matrix():
    assert MODE_MATRIX == {
        'vanilla': (False, False), 'noise_only': (True, False),
        'embed_only': (False, True), 'rear': (True, True),
    }
    assert not _train_config(mode='vanilla').reg_active
    assert _train_config(mode='embed_only').effective_lambda == 1.0
    assert _train_config(mode='rear', reg=RegConfig(lam=0.0, tap_shallow=0, tap_deep=1)).effective_lambda == 0.0


def test_train_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        _train_config(mode='scheduled_sampling')
    with pytest.raises(ConfigError):
        _train_config(warmup_fraction=1.0)
    with pytest.raises(ConfigError):
        _train_config(precision='fp16')


def test_lr_schedule_endpoints():
    config = _train_config(peak_lr=3e-4, final_lr=1e-5)
    total = 100

    assert lr_at(0, total, config) == 0.0
    assert lr_at(25, total, config) == 3e-4
    assert lr_at(100, total, config) == 1e-5
    assert lr_at(10, total, config) == pytest.approx(3e-4 * 10 / 25)
    decay = [lr_at(s, total, config) for s in range(25, 101)]
    assert all(b <= a for a, b in zip(decay, decay[1:]))
    with pytest.raises(InputError):
        lr_at(101, total, config)


@pytest.mark.parametrize('total,fraction', [(1, 0.25), (2, 0.9), (3, 0.9), (4, 0.75)])
def test_lr_schedule_short_runs_still_reach_final_lr(total, fraction):
    config = _train_config(peak_lr=3e-4, final_lr=1e-5, warmup_fraction=fraction)

    assert lr_at(0, total, config) == 0.0
    assert lr_at(total, total, config) == 1e-5
    if total > 1:
        assert max(lr_at(s, total, config) for s in range(total + 1)) == 3e-4


def test_stream_generators_are_independent_and_reproducible():
    a = torch.rand(4, generator=stream_generator(0, 'noise', 3))
    b = torch.rand(4, generator=stream_generator(0, 'noise', 3))
    c = torch.rand(4, generator=stream_generator(0, 'dropout', 3))
    d = torch.rand(4, generator=stream_generator(1, 'noise', 3))

    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert not torch.equal(a, d)


def _fresh_model(**overrides):
    torch.manual_seed(0)
    return ARTransformer(make_ar_config(**overrides))


def test_train_step_clips_gradients(codebook):
    model = _fresh_model()
    config = _train_config(grad_clip=1e-3)
    optimizer = build_optimizer(model, config)
    tokens, labels = _batch()

    result = train_step(model, optimizer, tokens, labels, codebook, config, t=0.0, step_index=0, lr=1e-3)

    assert result.grad_norm <= 1e-3 + 1e-6
    assert result.grad_norm_pre_clip > result.grad_norm
    assert result.total_loss == pytest.approx(result.ar_loss + result.reg_loss, rel=1e-5)
    assert 0.0 <= result.reg_loss <= 4.0


def test_vanilla_step_leaves_heads_untouched(codebook):
    model = _fresh_model()
    before = {k: v.clone() for k, v in model.heads.state_dict().items()}
    config = _train_config(mode='vanilla')
    tokens, labels = _batch()

    result = train_step(model, build_optimizer(model, config), tokens, labels, codebook, config, 0.0, 0, 1e-2)

    assert result.reg_loss == 0.0
    assert result.eps_max == 0.0
    assert all(torch.equal(before[k], v) for k, v in model.heads.state_dict().items())


def test_rear_step_updates_heads(codebook):
    model = _fresh_model()
    before = {k: v.clone() for k, v in model.heads.state_dict().items()}
    config = _train_config(mode='rear')
    tokens, labels = _batch()

    train_step(model, build_optimizer(model, config), tokens, labels, codebook, config, 0.0, 0, 1e-2)

    assert any(not torch.equal(before[k], v) for k, v in model.heads.state_dict().items())


def test_noise_respects_schedule(codebook):
    model = _fresh_model()
    config = _train_config(mode='noise_only', noise=NoiseSchedule('annealed_truncated'))
    optimizer = build_optimizer(model, config)
    tokens, labels = _batch()

    early = train_step(model, optimizer, tokens, labels, codebook, config, 0.3, 0, 1e-3)
    late = train_step(model, optimizer, tokens, labels, codebook, config, 0.8, 1, 1e-3)

    assert 0.0 < early.eps_max <= schedule_value(0.3)
    assert late.eps_max == 0.0


def test_label_dropout_rate(codebook):
    model = _fresh_model()
    config = _train_config(mode='vanilla', label_dropout=0.5)
    optimizer = build_optimizer(model, config)
    tokens, labels = _batch(batch_size=64)

    dropped = sum(
        train_step(model, optimizer, tokens, labels, codebook, config, 0.0, step, 1e-4).labels_dropped
        for step in range(20)
    )
    assert dropped / (64 * 20) == pytest.approx(0.5, abs=0.05)


def test_metrics_log_truncate(tmp_path):
    log = MetricsLog(str(tmp_path / 'metrics.jsonl'))
    for step in (1, 2, 3):
        log.append({'type': 'step', 'step': step})
    log.truncate_after(2)
    assert [r['step'] for r in log.read()] == [1, 2]


def _run(run_dir, config, codebook, train_cache, val_cache, **kwargs):
    return train_loop(train_cache, val_cache, codebook, make_ar_config(), config, str(run_dir),
                      {'seed': config.seed}, torch.device('cpu'), **kwargs)


def test_train_loop_writes_artifacts(tmp_path, codebook, train_cache, val_cache):
    result = _run(tmp_path, _train_config(), codebook, train_cache, val_cache)

    final_eval = json.loads((tmp_path / 'final_eval.json').read_text(encoding='utf-8'))
    assert final_eval['mode'] == 'rear'
    assert 0.0 <= final_eval['val_ctr'] <= 1.0
    assert final_eval['val_perplexity'] >= 1.0
    assert result.final_eval == final_eval

    records = MetricsLog(str(tmp_path / 'metrics.jsonl')).read()
    steps = [r for r in records if r['type'] == 'step']
    epochs = [r for r in records if r['type'] == 'epoch']
    assert len(steps) == 2 * 3
    assert [e['epoch'] for e in epochs] == [1, 2]
    assert steps[-1]['lr'] == pytest.approx(1e-4)

    assert len(StorageManager(str(tmp_path)).list_checkpoints()) == 2
    model, container = load_ar_model(result.last_checkpoint, torch.device('cpu'))
    assert container.meta['tokenizer_checksum'] == CHECKSUM
    assert container.meta['step'] == 6
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), result.model.state_dict().values()))


def test_resume_is_bitwise_identical(tmp_path, codebook, train_cache, val_cache):
    config = _train_config()
    straight = _run(tmp_path / 'straight', config, codebook, train_cache, val_cache)

    interrupted_dir = tmp_path / 'interrupted'
    partial = _run(interrupted_dir, config, codebook, train_cache, val_cache, stop_after_epoch=1)
    assert partial.final_eval == {}
    resumed = _run(interrupted_dir, config, codebook, train_cache, val_cache)

    assert resumed.resumed_from is not None
    for key, value in straight.model.state_dict().items():
        assert torch.equal(value, resumed.model.state_dict()[key]), key

    assert MetricsLog(str(interrupted_dir / 'metrics.jsonl')).read() == \
        MetricsLog(str(tmp_path / 'straight' / 'metrics.jsonl')).read()


def test_resume_rejects_other_mode(tmp_path, codebook, train_cache, val_cache):
    _run(tmp_path, _train_config(epochs=1), codebook, train_cache, val_cache)
    with pytest.raises(ConfigError):
        _run(tmp_path, _train_config(epochs=1, mode='vanilla'), codebook, train_cache, val_cache)


def test_train_loop_rejects_mismatched_caches(tmp_path, codebook, train_cache):
    other = make_cache(count=6, seed=3, checksum='cd' * 32)
    with pytest.raises(IntegrityError):
        _run(tmp_path, _train_config(), codebook, train_cache, other)


def test_checkpoint_contains_training_state(tmp_path, codebook, train_cache, val_cache):
    result = _run(tmp_path, _train_config(epochs=1), codebook, train_cache, val_cache)
    container = load_checkpoint(result.last_checkpoint)

    assert container.meta['mode'] == 'rear'
    assert container.meta['optimizer_groups']
    # 随机流由 (seed, 流名, step) 派生,检查点只需记录这三者
    assert container.meta['streams'] == sorted(STREAMS)
    assert container.meta['seed'] == 0 and container.meta['step'] == 3
    assert not any(k.startswith('rng/') for k in container.arrays)
    assert any(k.startswith('optim/') for k in container.arrays)
    assert os.path.basename(result.last_checkpoint) == 'step_00000003.ckpt'
