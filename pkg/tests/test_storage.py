import os

import pytest
import torch
from PIL import Image

from core.storage import (
    CheckpointContainer,
    StorageManager,
    TokenCache,
    build_token_cache,
    cache_file_size,
    load_checkpoint,
    load_token_cache,
    load_tokenizer,
    module_arrays,
    optimizer_arrays,
    read_report,
    restore_module,
    restore_optimizer,
    save_checkpoint,
    save_token_cache,
    save_tokenizer,
    state_checksum,
    write_image_grid,
    write_report,
)
from core.datasets import ImageDataset
from tests.conftest import CHECKSUM, make_cache
from utils.errors import InputError, IntegrityError, MissingArtifactError


def _container():
    return CheckpointContainer(
        config={'seed': 3, 'mode': 'rear'},
        arrays={
            'a/float': torch.randn(3, 4),
            'a/double': torch.randn(2, dtype=torch.float64),
            'b/long': torch.arange(5),
            'b/bool': torch.tensor([True, False]),
            'c/bf16': torch.randn(4).to(torch.bfloat16),
            'c/scalar': torch.tensor(7.0),
        },
        meta={'epoch': 2, 'nested': {'x': [1, 2]}},
    )


def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / 'c.ckpt')
    original = _container()
    save_checkpoint(path, original)
    loaded = load_checkpoint(path)

    assert loaded.config == original.config
    assert loaded.meta == original.meta
    assert list(loaded.arrays) == list(original.arrays)
    for name, tensor in original.arrays.items():
        assert loaded.arrays[name].dtype == tensor.dtype
        assert torch.equal(loaded.arrays[name], tensor), name
    assert not os.path.exists(path + '.tmp')


def test_checkpoint_detects_tampering(tmp_path):
    path = tmp_path / 'c.ckpt'
    save_checkpoint(str(path), _container())
    data = bytearray(path.read_bytes())

    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError, match='CRC'):
        load_checkpoint(str(path))

    path.write_bytes(bytes(data[:-20]))
    with pytest.raises(IntegrityError):
        load_checkpoint(str(path))

    path.write_bytes(b'NOTACKPT' + bytes(data[8:]))
    with pytest.raises(IntegrityError, match='magic'):
        load_checkpoint(str(path))

    with pytest.raises(MissingArtifactError):
        load_checkpoint(str(tmp_path / 'missing.ckpt'))


def test_module_and_optimizer_round_trip(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))
    optimizer = torch.optim.AdamW(net.parameters(), lr=1e-2, betas=(0.9, 0.96))
    net(torch.randn(5, 3)).sum().backward()
    optimizer.step()

    arrays = module_arrays(net)
    optim, groups = optimizer_arrays(optimizer)
    arrays.update(optim)
    save_checkpoint(str(tmp_path / 'm.ckpt'), CheckpointContainer({}, arrays, {'optimizer_groups': groups}))
    container = load_checkpoint(str(tmp_path / 'm.ckpt'))

    torch.manual_seed(1)
    other = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))
    other_optimizer = torch.optim.AdamW(other.parameters(), lr=5.0)
    restore_module(other, container)
    restore_optimizer(other_optimizer, container)

    for a, b in zip(net.state_dict().values(), other.state_dict().values()):
        assert torch.equal(a, b)
    assert other_optimizer.param_groups[0]['lr'] == 1e-2
    assert other_optimizer.param_groups[0]['betas'] == (0.9, 0.96)
    exp_avg = optimizer.state_dict()['state'][0]['exp_avg']
    assert torch.equal(other_optimizer.state_dict()['state'][0]['exp_avg'], exp_avg)

    with pytest.raises(IntegrityError):
        restore_module(torch.nn.Linear(3, 4), container)


def test_token_cache_layout_and_checksum(tmp_path):
    path = str(tmp_path / 'train.tokens')
    cache = make_cache(count=5)
    save_token_cache(path, cache)

    assert os.path.getsize(path) == cache_file_size(5, 2, 2) == 64 + 5 * (2 + 2 * 4)
    loaded = load_token_cache(path, expected_checksum=CHECKSUM)
    assert torch.equal(loaded.indices, cache.indices)
    assert torch.equal(loaded.labels, cache.labels)
    assert (loaded.vocab_size, loaded.height, loaded.width, loaded.checksum) == (8, 2, 2, CHECKSUM)

    with pytest.raises(IntegrityError, match='tokenize'):
        load_token_cache(path, expected_checksum='00' * 32)
    with pytest.raises(MissingArtifactError):
        load_token_cache(str(tmp_path / 'nope.tokens'))


def test_token_cache_rejects_out_of_range_and_truncation(tmp_path):
    bad = make_cache(count=3)
    bad.indices[0, 0] = 9
    path = tmp_path / 'bad.tokens'
    save_token_cache(str(path), bad)
    with pytest.raises(IntegrityError):
        load_token_cache(str(path))

    good = tmp_path / 'good.tokens'
    save_token_cache(str(good), make_cache(count=3))
    good.write_bytes(good.read_bytes()[:-1])
    with pytest.raises(IntegrityError):
        load_token_cache(str(good))


def test_tokenizer_save_load_and_cache_build(tmp_path, tokenizer):
    path = str(tmp_path / 'tokenizer.ckpt')
    save_tokenizer(path, tokenizer, [{'epoch': 0, 'val_psnr': 10.0}], {'seed': 0})
    loaded = load_tokenizer(path)

    assert state_checksum(loaded) == state_checksum(tokenizer)
    assert not loaded.training
    assert not any(p.requires_grad for p in loaded.parameters())

    images = torch.rand(5, 3, 4, 4)
    dataset = ImageDataset(images, torch.tensor([0, 1, 2, 0, 1]))
    cache = build_token_cache(dataset, loaded, str(tmp_path / 'val.tokens'), num_classes=3, batch_size=2)
    assert cache.indices.shape == (5, 4)
    assert torch.equal(cache.indices, tokenizer.tokenize(images).reshape(5, -1))
    assert load_token_cache(str(tmp_path / 'val.tokens'), state_checksum(tokenizer)).checksum == cache.checksum

    with pytest.raises(MissingArtifactError):
        load_tokenizer(str(tmp_path / 'missing.ckpt'))


def test_image_grid_geometry(tmp_path):
    path = write_image_grid(torch.rand(16, 3, 32, 32), str(tmp_path / 'grid.png'), columns=4)
    with Image.open(path) as img:
        assert img.size == (4 * 34 + 2, 4 * 34 + 2)

    with pytest.raises(InputError):
        write_image_grid(torch.rand(0, 3, 4, 4), str(tmp_path / 'empty.png'))


def test_report_round_trip_and_validation(tmp_path):
    report = {'experiment': 'ctr', 'conditions': [], 'summary': [],
              'records': [{'seed': 0, 'condition': 'x', 'ctr': 0.5, 'perplexity': 2.0}]}
    json_path, csv_path = write_report(report, str(tmp_path / 'ctr.json'))

    assert read_report(json_path) == report
    assert os.path.exists(csv_path)
    with pytest.raises(InputError):
        write_report({**report, 'records': [{'seed': 0, 'condition': 'x', 'perplexity': 0.5}]},
                     str(tmp_path / 'bad.json'))


def test_storage_manager_latest_checkpoint(tmp_path):
    storage = StorageManager(str(tmp_path / 'run'))
    assert storage.latest_checkpoint() is None

    storage.save_checkpoint(12, _container())
    storage.save_checkpoint(5, _container())

    assert storage.latest_checkpoint().endswith('step_00000012.ckpt')
    assert len(storage.list_checkpoints()) == 2
    assert [h['step'] for h in storage.get_history()] == [5, 12]


def test_token_cache_rejects_oversized_vocab(tmp_path):
    cache = TokenCache(torch.zeros(1, dtype=torch.long), torch.zeros(1, 4, dtype=torch.long),
                       vocab_size=70000, height=2, width=2, num_classes=3, checksum=CHECKSUM)
    with pytest.raises(InputError):
        save_token_cache(str(tmp_path / 'x.tokens'), cache)
