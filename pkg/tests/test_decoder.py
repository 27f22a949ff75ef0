import numpy as np
import pytest

from edgekit import tensor as T
from edgekit.decoder import (BiMLADecoder, DecoderConfig, MLADecoder,
                             UpsampleBlock, build_decoder, flatten_map,
                             reshape_tokens)
from edgekit.errors import ConfigError, ShapeError
from edgekit.gradcheck import check_gradients
from edgekit.tensor import Tensor

rng = np.random.default_rng(21)


def small_cfg(variant="global", pc=4, arch="bimla", c=4):
    return DecoderConfig(variant=variant, in_channels=c, path_channels=pc,
                         smooth_channels=4, arch=arch)


def test_reshape_tokens_round_trip():
    tokens = Tensor(rng.normal(size=(1, 4, 5)))
    m = reshape_tokens(tokens, (2, 2))
    assert m.shape == (1, 5, 2, 2)
    back = flatten_map(m)
    assert np.array_equal(back.data, tokens.data)


def test_reshape_tokens_one_hot_position():
    tokens = np.zeros((1, 4, 1))
    tokens[0, 2, 0] = 1.0  # third token of a (2,2) grid -> row 1, col 0
    m = reshape_tokens(Tensor(tokens), (2, 2))
    assert m.data[0, 0, 1, 0] == 1.0
    assert m.data.sum() == 1.0


def test_reshape_tokens_grid_mismatch():
    with pytest.raises(ShapeError):
        reshape_tokens(Tensor(np.zeros((1, 4, 2))), (1, 3))


def _identity_paths(dec: BiMLADecoder):
    """Set every path conv to the identity map (requires pc == C)."""
    c = dec.cfg.in_channels
    k = dec.cfg.conv_kernel
    eye1 = np.eye(c).reshape(c, c, 1, 1)
    eyek = np.zeros((c, c, k, k))
    eyek[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    for mod in list(dec.td_proj) + list(dec.bu_proj):
        mod.weight.data = eye1.copy()
        mod.bias.data[:] = 0.0
    for mod in list(dec.td_conv) + list(dec.bu_conv):
        mod.weight.data = eyek.copy()
        mod.bias.data[:] = 0.0


def test_top_down_identity_closed_form():
    dec = BiMLADecoder(small_cfg(), np.random.default_rng(0))
    _identity_paths(dec)
    taps = [Tensor(rng.normal(size=(1, 4, 4))) for _ in range(4)]
    paths = dec.paths(taps, (2, 2))
    maps = [reshape_tokens(t, (2, 2)).data for t in taps]
    for level in range(4):
        expect = np.sum(maps[level:], axis=0)
        assert np.allclose(paths[level].data, expect, atol=1e-12)


def test_bottom_up_identity_closed_form():
    dec = BiMLADecoder(small_cfg(), np.random.default_rng(0))
    _identity_paths(dec)
    taps = [Tensor(rng.normal(size=(1, 4, 4))) for _ in range(4)]
    paths = dec.paths(taps, (2, 2))
    maps = [reshape_tokens(t, (2, 2)).data for t in taps]
    assert np.allclose(paths[7].data, np.sum(maps, axis=0), atol=1e-12)
    assert np.allclose(paths[4].data, maps[0], atol=1e-12)


def test_path_symmetry_identity_weights():
    dec = BiMLADecoder(small_cfg(), np.random.default_rng(0))
    _identity_paths(dec)
    taps = [Tensor(rng.normal(size=(1, 4, 4))) for _ in range(4)]
    paths = dec.paths(taps, (2, 2))
    assert np.allclose(paths[0].data, paths[7].data, atol=1e-12)


def test_single_top_level_reaches_every_top_down_output():
    dec = BiMLADecoder(small_cfg(), np.random.default_rng(0))
    _identity_paths(dec)
    taps = [Tensor(np.zeros((1, 4, 4))) for _ in range(3)]
    taps.append(Tensor(rng.normal(size=(1, 4, 4))))
    paths = dec.paths(taps, (2, 2))
    top_map = reshape_tokens(taps[3], (2, 2)).data
    for level in range(4):
        assert np.allclose(paths[level].data, top_map, atol=1e-12)


def test_zero_taps_zero_paths():
    dec = BiMLADecoder(small_cfg(), np.random.default_rng(0))
    for mods in (dec.td_proj, dec.td_conv, dec.bu_proj, dec.bu_conv):
        for m in mods:
            m.bias.data[:] = 0.0
    taps = [Tensor(np.zeros((1, 4, 4))) for _ in range(4)]
    for p in dec.paths(taps, (2, 2)):
        assert np.allclose(p.data, 0.0)


def test_upsample_extents():
    up = UpsampleBlock(2, ((4, 2), (16, 8)), np.random.default_rng(0))
    up.eval()
    out = up(Tensor(rng.normal(size=(1, 2, 4, 4))), (64, 64))
    assert out.shape == (1, 2, 64, 64)
    out = up(Tensor(rng.normal(size=(1, 2, 20, 20))), (320, 320))
    assert out.shape == (1, 2, 320, 320)


def test_decode_output_extent_and_paths():
    for variant, patch in (("global", 16), ("local", 8)):
        cfg = small_cfg(variant)
        dec = BiMLADecoder(cfg, np.random.default_rng(0))
        dec.eval()
        grid = (2, 3)
        out_hw = (grid[0] * patch, grid[1] * patch)
        taps = [Tensor(rng.normal(size=(1, 6, 4))) for _ in range(4)]
        feats, paths = dec(taps, grid, out_hw)
        assert feats.shape == (1, 4, *out_hw)
        assert len(paths) == 8
        assert cfg.total_upsample == patch


def test_zero_taps_constant_output():
    dec = BiMLADecoder(small_cfg(), np.random.default_rng(0))
    dec.eval()
    taps = [Tensor(np.zeros((1, 4, 4))) for _ in range(4)]
    feats, _ = dec(taps, (2, 2), (32, 32))
    for ch in range(feats.shape[1]):
        assert np.ptp(feats.data[0, ch]) < 1e-12


def test_local_variant_receptive_field_confined():
    cfg = small_cfg("local")
    dec = BiMLADecoder(cfg, np.random.default_rng(3))
    dec.eval()
    base = [rng.normal(size=(1, 9, 4)) for _ in range(4)]
    feats0, _ = dec([Tensor(t) for t in base], (3, 3), (24, 24))
    bumped = [t.copy() for t in base]
    ti, tj = 1, 1  # middle token of the (3,3) grid
    bumped[2][0, ti * 3 + tj] += 1.0
    feats1, _ = dec([Tensor(t) for t in bumped], (3, 3), (24, 24))
    diff = np.abs(feats1.data - feats0.data).sum(axis=(0, 1))
    # fine-variant upsampling footprint: stride 8, kernels (4,2) then (8,4),
    # crop offset 6 -> rows [8 i - 6, 8 i + 14)
    lo, hi = 8 * ti - 6, 8 * ti + 14
    mask = np.zeros((24, 24), dtype=bool)
    mask[max(lo, 0):hi, max(lo, 0):hi] = True
    assert diff[~mask].max() < 1e-12
    assert diff[mask].max() > 0


def test_mla_arm_top_down_only():
    cfg = small_cfg(arch="mla")
    dec = build_decoder(cfg, np.random.default_rng(0))
    assert isinstance(dec, MLADecoder)
    dec.eval()
    taps = [Tensor(rng.normal(size=(1, 4, 4))) for _ in range(4)]
    feats, paths = dec(taps, (2, 2), (32, 32))
    assert len(paths) == 4
    assert feats.shape == (1, 4, 32, 32)


def test_decoder_config_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(variant="mid", in_channels=4, path_channels=4,
                      smooth_channels=4)
    with pytest.raises(ConfigError):
        DecoderConfig(variant="global", in_channels=4, path_channels=4,
                      smooth_channels=4, arch="other")


def test_decoder_gradcheck_small():
    cfg = small_cfg("local", pc=2)
    dec = BiMLADecoder(cfg, np.random.default_rng(1))
    dec.train()
    taps_data = [rng.normal(size=(1, 4, 4)) for _ in range(4)]
    weights = rng.normal(size=(1, 4, 16, 16))

    def loss_fn():
        feats, _ = dec([Tensor(t) for t in taps_data], (2, 2), (16, 16))
        return T.tensor_sum(T.mul(feats, weights))

    report = check_gradients(loss_fn, list(dec.named_parameters()),
                             np.random.default_rng(0), probes_per_tensor=2)
    assert report.max_rel_err < 1e-4
