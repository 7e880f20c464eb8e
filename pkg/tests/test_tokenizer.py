import pytest
import torch

from core.tokenizer import (
    TokenizerConfig,
    VQTokenizer,
    codebook_usage,
    de_rasterize,
    lookup,
    nearest_incorrect,
    nearest_incorrect_table,
    quantize,
    rasterize,
    train_tokenizer,
)
from utils.errors import ConfigError, InputError


def test_quantize_picks_nearest_entry_and_breaks_ties_low():
    codebook = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    latent = torch.tensor([[1.0, 0.1], [0.1, 0.9]]).T.reshape(1, 2, 1, 2)

    quantized, indices = quantize(latent, codebook)

    assert indices.tolist() == [[[0, 2]]]
    assert torch.equal(quantized[0, :, 0, 1], codebook[2])


def test_quantize_rejects_channel_mismatch():
    with pytest.raises(ConfigError):
        quantize(torch.zeros(1, 3, 2, 2), torch.zeros(4, 2))


def test_rasterize_is_row_major():
    grid = torch.tensor([[[0, 1], [2, 3]]])
    seq = rasterize(grid)

    assert seq.tolist() == [[0, 1, 2, 3]]
    assert torch.equal(de_rasterize(seq, 2, 2), grid)


def test_de_rasterize_rejects_wrong_length():
    with pytest.raises(InputError):
        de_rasterize(torch.zeros(1, 5, dtype=torch.long), 2, 2)


def test_lookup_rejects_out_of_range_indices():
    codebook = torch.randn(4, 3)
    assert lookup(torch.tensor([[0, 3]]), codebook).shape == (1, 2, 3)
    with pytest.raises(InputError):
        lookup(torch.tensor([4]), codebook)
    with pytest.raises(InputError):
        lookup(torch.tensor([-1]), codebook)


def test_nearest_incorrect_uses_cosine_and_never_returns_itself():
    codebook = torch.tensor([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0]])

    assert nearest_incorrect(0, codebook) == 1
    assert nearest_incorrect(2, codebook) == 1
    table = nearest_incorrect_table(codebook)
    assert table.tolist() == [nearest_incorrect(k, codebook) for k in range(4)]
    assert all(table[k] != k for k in range(4))


def test_nearest_incorrect_needs_two_entries():
    with pytest.raises(InputError):
        nearest_incorrect_table(torch.randn(1, 3))
    with pytest.raises(InputError):
        nearest_incorrect(5, torch.randn(3, 2))


def test_tokenizer_shapes_and_pixel_range(tokenizer):
    images = torch.rand(3, 3, 4, 4)

    latent = tokenizer.encode(images)
    grid = tokenizer.tokenize(images)
    recon = tokenizer.decode_tokens(grid)

    assert latent.shape == (3, 4, 2, 2)
    assert grid.shape == (3, 2, 2)
    assert int(grid.max()) < 8
    assert recon.shape == images.shape
    assert float(recon.min()) >= 0.0 and float(recon.max()) <= 1.0


def test_tokenizer_rejects_wrong_image_size(tokenizer):
    with pytest.raises(ConfigError):
        tokenizer.encode(torch.rand(1, 3, 8, 8))
    with pytest.raises(ConfigError):
        tokenizer.decode(torch.rand(1, 4, 3, 3))


def test_perceptual_features_come_from_encoder(tokenizer):
    features = tokenizer.perceptual_features(torch.rand(2, 3, 4, 4))
    assert [tuple(f.shape) for f in features] == [(2, 8, 4, 4), (2, 8, 2, 2)]


def test_train_tokenizer_records_history():
    torch.manual_seed(0)
    config = TokenizerConfig(image_size=4, channels=8, downsample=2, codebook_size=8, codebook_dim=4,
                             epochs=2, batch_size=8)
    images = torch.rand(24, 3, 4, 4)

    tok, history = train_tokenizer(images[:16], images[16:], config, seed=0)

    assert [h['epoch'] for h in history] == [0, 1, 2]
    assert all('val_psnr' in h for h in history)
    assert 0.0 < codebook_usage(tok, images) <= 1.0
    assert not tok.training


def test_train_tokenizer_rejects_empty_set():
    with pytest.raises(InputError):
        train_tokenizer(torch.zeros(0, 3, 4, 4), torch.zeros(1, 3, 4, 4),
                        TokenizerConfig(image_size=4, channels=8, downsample=2, codebook_size=8, codebook_dim=4))


def test_codebook_receives_no_gradient():
    tok = VQTokenizer(TokenizerConfig(image_size=4, channels=8, downsample=2, codebook_size=8, codebook_dim=4))
    recon, vq_loss, _ = tok(torch.rand(4, 3, 4, 4))
    ((recon ** 2).mean() + vq_loss).backward()
    assert tok.quantizer.codebook.weight.grad is None


def _brute_force_nearest(vector, codebook):
    best, best_dist = 0, None
    for k in range(codebook.shape[0]):
        dist = sum((float(a) - float(b)) ** 2 for a, b in zip(vector, codebook[k]))
        if best_dist is None or dist < best_dist:
            best, best_dist = k, dist
    return best


def test_quantize_matches_exhaustive_search():
    generator = torch.Generator().manual_seed(11)
    for _ in range(100):
        codebook = torch.randn(8, 3, dtype=torch.float64, generator=generator)
        latent = torch.randn(1, 3, 2, 3, dtype=torch.float64, generator=generator)

        _, indices = quantize(latent, codebook)

        for i in range(2):
            for j in range(3):
                assert indices[0, i, j].item() == _brute_force_nearest(latent[0, :, i, j], codebook)


def _brute_force_nearest_incorrect(index, codebook):
    def cos(a, b):
        dot = sum(float(x) * float(y) for x, y in zip(a, b))
        na = sum(float(x) ** 2 for x in a) ** 0.5
        nb = sum(float(y) ** 2 for y in b) ** 0.5
        return dot / (na * nb + 1e-8)

    best, best_sim = None, None
    for k in range(codebook.shape[0]):
        if k == index:
            continue
        sim = cos(codebook[k], codebook[index])
        if best_sim is None or sim > best_sim:
            best, best_sim = k, sim
    return best


def test_nearest_incorrect_table_matches_brute_force():
    generator = torch.Generator().manual_seed(12)
    for _ in range(50):
        codebook = torch.randn(6, 4, dtype=torch.float64, generator=generator)
        table = nearest_incorrect_table(codebook)
        assert table.tolist() == [_brute_force_nearest_incorrect(k, codebook) for k in range(6)]
