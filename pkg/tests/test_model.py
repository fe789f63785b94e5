import itertools

import numpy as np
import pytest

from ebgame import numerics as nx
from ebgame.errors import ConfigError, ContractError, ParseError, ShapeError
from ebgame.model import (
    ModelConfig,
    PatchGrid,
    decode,
    discriminate,
    encode,
    generate,
    init_discriminator,
    init_generator,
    load_checkpoint,
    mask_from_columns,
    mask_indices,
    masked_column_count,
    partition_patches,
    patchify,
    positional_encoding,
    sample_wave_mask,
    save_checkpoint,
    unpatchify,
)
from ebgame.numerics import Tensor

GRID = PatchGrid(128, 128, 16)
SMALL = ModelConfig(image_size=16, patch_size=4, embed_dim=8, enc_depth=1, dec_dim=8,
                    dec_depth=1, disc_dim=8, disc_depth=1, num_heads=2)


# --- patches ---------------------------------------------------------------------

def test_patch_counts():
    assert patchify(np.zeros((128, 128)), GRID).shape == (64, 256)
    assert patchify(np.zeros((128, 128)), PatchGrid(128, 128, 8)).shape == (256, 64)


def test_patch_order_row_major():
    img = np.arange(16.0).reshape(4, 4)
    p = patchify(img, PatchGrid(4, 4, 2))
    assert p.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


@pytest.mark.parametrize("p", [1, 2, 8, 16, 128])
def test_patch_round_trip(p):
    img = np.random.default_rng(p).random((3, 128, 128))
    grid = PatchGrid(128, 128, p)
    assert np.array_equal(unpatchify(patchify(img, grid), grid), img)


def test_single_patch_grid():
    img = np.random.default_rng(0).random((16, 16))
    grid = PatchGrid(16, 16, 16)
    assert np.array_equal(patchify(img, grid)[0], img.ravel())


def test_patch_errors():
    with pytest.raises(ConfigError):
        PatchGrid(128, 128, 10)
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((63, 256)), GRID)
    with pytest.raises(ShapeError):
        patchify(np.zeros((64, 128)), GRID)


# --- masking ---------------------------------------------------------------------

def _check_mask_geometry(m, grid):
    union = {r * grid.cols + c for c in m.columns for r in range(grid.rows)}
    assert set(m.masked) == union
    assert len(m.masked) == grid.rows * len(m.columns)
    assert set(m.columns) == {c for _, c in m.seed_patches}


@pytest.mark.parametrize("ratio,k", [(0.0, 0), (0.01, 1), (0.3, 2), (0.5, 4), (0.3125, 3), (1.0, 8)])
def test_masked_column_count(ratio, k):
    assert masked_column_count(8, ratio) == k


def test_mask_ratio_extremes():
    rng = np.random.default_rng(0)
    m0 = sample_wave_mask(GRID, 0.0, rng)
    assert m0.columns == () and m0.masked == ()
    m1 = sample_wave_mask(GRID, 1.0, rng)
    assert len(m1.columns) == 8 and len(m1.masked) == 64


def test_mask_fixed_seed_example():
    m = sample_wave_mask(GRID, 0.3, np.random.default_rng(42))
    assert len(m.columns) == 2 and len(m.masked) == 16
    for k in m.masked:
        assert any(k % 8 == c for _, c in m.seed_patches)


def test_mask_invariants_over_many_draws():
    rng = np.random.default_rng(123)
    hist = np.zeros(8, int)
    for _ in range(10_000):
        m = sample_wave_mask(GRID, 0.3, rng)
        _check_mask_geometry(m, GRID)
        assert len(m.columns) == 2
        hist[list(m.columns)] += 1
    mode = int(np.argmax(hist))
    assert 2 <= mode <= 5
    # unimodal: non-decreasing up to the mode, non-increasing after
    assert all(hist[i] <= hist[i + 1] for i in range(mode))
    assert all(hist[i] >= hist[i + 1] for i in range(mode, 7))


def test_mask_deterministic():
    a = [sample_wave_mask(GRID, 0.3, np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]


def test_uniform_mode_and_bad_ratio():
    m = sample_wave_mask(GRID, 0.5, np.random.default_rng(0), mode="uniform")
    _check_mask_geometry(m, GRID)
    with pytest.raises(ConfigError):
        sample_wave_mask(GRID, 1.5, np.random.default_rng(0))


def test_partition_2x2_column_one():
    grid = PatchGrid(2, 2, 1)
    seq = np.array([[1.0], [2.0], [3.0], [4.0]])  # x1..x4
    vis, msk = partition_patches(seq, mask_from_columns(grid, [1]))
    assert msk.ravel().tolist() == [2.0, 4.0]
    assert vis.ravel().tolist() == [1.0, 3.0]


def test_partition_empty_and_full():
    seq = np.arange(64.0)[:, None]
    vis, msk = partition_patches(seq, mask_from_columns(GRID, []))
    assert vis.shape[0] == 64 and msk.shape[0] == 0
    vis, msk = partition_patches(seq, mask_from_columns(GRID, range(8)))
    assert vis.shape[0] == 0 and msk.shape[0] == 64
    with pytest.raises(ShapeError):
        partition_patches(np.zeros((4, 1)), mask_from_columns(GRID, [0]))


def test_mask_indices_restore():
    masks = [mask_from_columns(GRID, [3, 4]), mask_from_columns(GRID, [0, 7])]
    keep, drop, restore = mask_indices(masks)
    order = np.concatenate([keep, drop], axis=1)
    assert np.array_equal(np.take_along_axis(order, restore, axis=1), np.tile(np.arange(64), (2, 1)))


# --- positional encoding ---------------------------------------------------------

def test_pe_distinct_positions():
    pe = positional_encoding(GRID, 64)
    assert pe.shape == (64, 64)
    for a, b in itertools.combinations(range(64), 2):
        assert not np.allclose(pe[a], pe[b])


def test_pe_origin_and_determinism():
    pe = positional_encoding(GRID, 32)
    row, col = pe[0, :16], pe[0, 16:]
    for half in (row, col):
        assert np.all(half[:8] == 0.0) and np.all(half[8:] == 1.0)
    assert np.array_equal(pe, positional_encoding(GRID, 32))
    with pytest.raises(ConfigError):
        positional_encoding(GRID, 7)


# --- encoder / decoder -----------------------------------------------------------

def _rand_params(cfg, seed=0, scale=0.3):
    gen = init_generator(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for t in gen.tensors.values():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return gen


def test_encode_shapes_and_equivariance():
    gen = _rand_params(SMALL)
    rng = np.random.default_rng(1)
    vis = rng.random((5, 16))
    pos = np.array([0, 3, 7, 9, 12])
    out = encode(vis, pos, gen).data
    assert out.shape == (1, 5, 8)
    perm = rng.permutation(5)
    out_p = encode(vis[perm], pos[perm], gen).data
    assert np.allclose(out_p[0], out[0][perm], atol=1e-12)


def test_encode_zero_blocks_is_normed_embedding():
    gen = _rand_params(SMALL)
    for name, t in gen.tensors.items():
        if name.startswith("enc.blocks") and (".attn." in name or ".mlp." in name):
            t.data = np.zeros_like(t.data)
    vis = np.random.default_rng(2).random((4, 16))
    pos = np.array([1, 2, 5, 15])
    h = vis @ gen["enc.patch.w"].data + gen["enc.patch.b"].data + positional_encoding(SMALL.grid, 8)[pos]
    mu, var = h.mean(-1, keepdims=True), h.var(-1, keepdims=True)
    expected = (h - mu) / np.sqrt(var + SMALL.ln_eps) * gen["enc.norm.g"].data + gen["enc.norm.b"].data
    assert np.allclose(encode(vis, pos, gen).data[0], expected, atol=1e-12)


def test_encode_empty_visible():
    with pytest.raises(ContractError):
        encode(np.zeros((0, 16)), np.zeros(0, int), init_generator(SMALL))


def test_generate_contracts():
    gen = _rand_params(SMALL)
    img = np.random.default_rng(3).random((2, 16, 16))
    patches = patchify(img, SMALL.grid)
    masks = [mask_from_columns(SMALL.grid, [1]), mask_from_columns(SMALL.grid, [2])]
    rec = generate(patches, masks, gen)
    assert rec.predicted_masked.shape == (2, 4, 16)
    assert rec.predicted_all.shape == (2, 16, 16)
    for b, m in enumerate(masks):
        assert np.array_equal(rec.full.data[b, list(m.masked)], rec.predicted_masked.data[b])
        assert np.array_equal(rec.full.data[b, list(m.visible)], patches[b, list(m.visible)])
        assert np.array_equal(rec.predicted_all.data[b, list(m.masked)], rec.predicted_masked.data[b])
    full = rec.full_image()
    assert full.shape == (2, 16, 16)
    assert np.array_equal(full[:, :, :4], img[:, :, :4])


def test_zero_head_predicts_bias():
    gen = init_generator(SMALL, 0)
    gen["dec.head.b"].data = np.linspace(0, 1, 16)
    img = np.random.default_rng(4).random((16, 16))
    rec = generate(patchify(img, SMALL.grid), [mask_from_columns(SMALL.grid, [0, 3])], gen)
    assert np.array_equal(rec.predicted_masked.data[0], np.tile(np.linspace(0, 1, 16), (8, 1)))


def test_decode_shape_mismatch():
    gen = init_generator(SMALL)
    with pytest.raises(ShapeError):
        decode(Tensor(np.zeros((1, 3, 8))), [mask_from_columns(SMALL.grid, [0])], gen, np.zeros((1, 3, 16)))


def test_generate_deterministic_and_default_model():
    cfg = ModelConfig()
    gen = _rand_params(cfg, scale=0.02)
    img = np.random.default_rng(5).random((128, 128))
    mask = sample_wave_mask(cfg.grid, 0.3, np.random.default_rng(5))
    a = generate(patchify(img, cfg.grid), [mask], gen).full.data
    b = generate(patchify(img, cfg.grid), [mask], gen).full.data
    assert np.array_equal(a, b)


def test_combined_backward_reaches_every_parameter():
    gen = _rand_params(SMALL)
    disc = init_discriminator(SMALL)
    img = np.random.default_rng(6).random((2, 16, 16))
    patches = patchify(img, SMALL.grid)
    masks = [mask_from_columns(SMALL.grid, [1]), mask_from_columns(SMALL.grid, [3])]
    rec = generate(patches, masks, gen)
    _, drop, _ = mask_indices(masks)
    err = rec.predicted_masked - patches[np.arange(2)[:, None], drop]
    d = discriminate(rec.predicted_masked, drop, disc)
    loss = nx.mean(err * err) - nx.mean(nx.log(d)) + nx.mean(nx.tabs(rec.full - patches))
    nx.backward(loss)
    for name, t in gen.tensors.items():
        assert t.grad is not None and np.all(np.isfinite(t.grad)), name
        assert np.any(t.grad != 0), name


# --- discriminator ---------------------------------------------------------------

def test_discriminator_outputs():
    disc = init_discriminator(SMALL, 0)
    x = np.random.default_rng(7).random((3, 16)) * 10
    p = discriminate(x, [0, 5, 9], disc).data
    assert p.shape == (1, 3)
    assert np.all((p > 0) & (p < 1))
    disc["disc.head.w"].data = np.zeros_like(disc["disc.head.w"].data)
    assert np.array_equal(discriminate(x, [0, 5, 9], disc).data, np.full((1, 3), 0.5))
    with pytest.raises(ContractError):
        discriminate(np.zeros((0, 16)), np.zeros(0, int), disc)


# --- parameters and checkpoints --------------------------------------------------

def test_parameter_counts_fixed():
    a, b = init_generator(SMALL, 0), init_generator(SMALL, 1)
    assert a.num_parameters() == b.num_parameters() > 0
    assert all(np.all(np.isfinite(t.data)) for t in a.tensors.values())
    assert np.all(a["dec.head.w"].data == 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=10)
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=66, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(mask_sampling="triangular")


def test_checkpoint_round_trip(tmp_path):
    gen, disc = _rand_params(SMALL, 3), init_discriminator(SMALL, 3)
    save_checkpoint(tmp_path / "ck.bin", gen, disc, {"gamma_con": 1.0})
    g2, d2, extra = load_checkpoint(tmp_path / "ck.bin")
    assert g2.config == SMALL and extra == {"gamma_con": 1.0}
    for src, dst in ((gen, g2), (disc, d2)):
        assert list(src.tensors) == list(dst.tensors)
        for k in src.tensors:
            assert np.array_equal(src[k].data, dst[k].data)
    save_checkpoint(tmp_path / "ck2.bin", g2, d2, extra)
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.bin")
    gen = init_generator(SMALL)
    save_checkpoint(tmp_path / "ck.bin", gen)
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-10])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "trunc.bin")
