import numpy as np
import pytest

from edgekit import tensor as T
from edgekit.errors import ConfigError, PartitionError, ShapeError, UsageError
from edgekit.model import (EdgeDetector, ModelConfig, partition_windows,
                           reassemble_windows)
from edgekit.tensor import Tensor

rng = np.random.default_rng(5)


def tiny_cfg(**over):
    base = dict(input_hw=(32, 32), scales=(1.0,))
    base.update(over)
    return ModelConfig.toy(**base)


@pytest.fixture(scope="module")
def net():
    return EdgeDetector(tiny_cfg(), seed=3)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).random((1, 3, 32, 32))


def test_partition_four_windows_row_major():
    img = np.arange(3 * 320 * 320, dtype=np.float64).reshape(1, 3, 320, 320)
    wins = partition_windows(img)
    assert len(wins) == 4
    assert all(w.shape == (1, 3, 160, 160) for w in wins)
    # pixel (0, W-1) lands in the top-right window at (0, W/2-1)
    assert wins[1][0, 0, 0, 159] == img[0, 0, 0, 319]
    assert np.array_equal(wins[0], img[:, :, :160, :160])
    assert np.array_equal(wins[2], img[:, :, 160:, :160])


def test_partition_round_trip_bit_exact():
    img = rng.random((2, 3, 64, 64))
    assert np.array_equal(reassemble_windows(partition_windows(img)), img)


def test_partition_odd_extent_rejected():
    with pytest.raises(PartitionError):
        partition_windows(np.zeros((1, 3, 33, 64)))


def test_stage1_shapes_and_range(net, image):
    with T.no_grad():
        f_g, e_g, paths = net.run_stage1(image)
    assert e_g.shape == (1, 1, 32, 32)
    assert 0.0 < e_g.data.min() and e_g.data.max() < 1.0
    assert f_g.shape[2:] == (32, 32)
    assert len(paths) == 8


def test_stage2_shapes_and_fusion_requirement(net, image):
    with T.no_grad():
        f_g, _, _ = net.run_stage1(image)
        f_r, e_r, paths, fused = net.run_stage2(image, f_g)
    assert e_r.shape == (1, 1, 32, 32)
    assert fused.shape[2:] == (32, 32)
    assert len(paths) == 8
    with pytest.raises(UsageError):
        net.run_stage2(image, None)


def test_stage1_deterministic_replay(net, image):
    with T.no_grad():
        _, a, _ = net.run_stage1(image)
        _, b, _ = net.run_stage1(image)
    assert np.array_equal(a.data, b.data)


def test_window_taps_match_per_window_encoding(net, image):
    """Batched window encoding equals encoding each window separately,
    regardless of processing order."""
    with T.no_grad():
        merged, grid = net.local_stage.window_taps(image)
        windows = partition_windows(image)
        per_window = []
        for w in (windows[2], windows[0], windows[3], windows[1]):  # any order
            taps, g = net.local_stage.encoder(np.ascontiguousarray(w))
            per_window.append((w, taps, g))
    order = {id(windows[i]): i for i in range(4)}
    gh, gw = 2, 2
    for level in range(4):
        whole = merged[level].data.reshape(1, grid[0], grid[1], -1)
        for w, taps, g in per_window:
            wi = order[id(w)]
            iy, ix = divmod(wi, 2)
            block = taps[level].data.reshape(1, gh, gw, -1)
            sub = whole[:, iy * gh:(iy + 1) * gh, ix * gw:(ix + 1) * gw]
            assert np.abs(sub - block).max() < 1e-12


def test_window_locality_of_taps(net, image):
    """Zeroing one window's content changes only that window's tap rows."""
    with T.no_grad():
        base, grid = net.local_stage.window_taps(image)
        modified = image.copy()
        modified[:, :, :16, :16] = 0.0  # window 0 (top-left)
        changed, _ = net.local_stage.window_taps(modified)
    gh = gw = 2
    for level in range(4):
        a = base[level].data.reshape(grid[0], grid[1], -1)
        b = changed[level].data.reshape(grid[0], grid[1], -1)
        diff = np.abs(a - b).sum(axis=-1)
        assert diff[:gh, :gw].max() > 0
        outside = diff.copy()
        outside[:gh, :gw] = 0
        assert outside.max() == 0.0


def test_ffm_switch_is_live(net, image):
    with T.no_grad():
        f_g, _, _ = net.run_stage1(image)
        _, e_on, _, _ = net.run_stage2(image, f_g, ffm_enabled=True)
        _, e_off, _, _ = net.run_stage2(image, f_g, ffm_enabled=False)
    assert e_on.shape == e_off.shape == (1, 1, 32, 32)
    assert not np.allclose(e_on.data, e_off.data)
    for e in (e_on, e_off):
        assert 0.0 < e.data.min() and e.data.max() < 1.0


def test_ffm_identity_and_prior_only_modulation(image):
    net2 = EdgeDetector(tiny_cfg(), seed=9)
    fusion = net2.local_stage.fusion
    f_g = Tensor(rng.normal(size=(1, 16, 8, 8)))
    f_r = Tensor(rng.normal(size=(1, 16, 8, 8)))
    fusion.scale_gen.weight.data[:] = 0.0
    fusion.scale_gen.bias.data[:] = 1.0
    fusion.shift_gen.weight.data[:] = 0.0
    fusion.shift_gen.bias.data[:] = 0.0
    assert np.allclose(fusion.modulate(f_g, f_r).data, f_r.data)
    fusion.scale_gen.bias.data[:] = 0.0
    fusion.shift_gen.weight.data[:] = 0.3
    shift = fusion.shift_gen(f_g).data
    assert np.allclose(fusion.modulate(f_g, f_r).data, shift)


def test_ffm_gradients_reach_both_branches():
    net2 = EdgeDetector(tiny_cfg(), seed=1)
    net2.train()
    f_g = Tensor(rng.normal(size=(1, 16, 8, 8)), requires_grad=True)
    f_r = Tensor(rng.normal(size=(1, 16, 8, 8)), requires_grad=True)
    with T.fresh_tape():
        out = net2.local_stage.fusion(f_g, f_r)
        T.backward(T.tensor_sum(out))
    assert f_g.grad is not None and np.abs(f_g.grad).max() > 0
    assert f_r.grad is not None and np.abs(f_r.grad).max() > 0


def test_ffm_extent_mismatch(net):
    with pytest.raises(ShapeError):
        net.local_stage.fusion(Tensor(np.zeros((1, 16, 8, 8))),
                               Tensor(np.zeros((1, 16, 4, 4))))


def test_infer_stage_modes(image):
    two = EdgeDetector(tiny_cfg(), seed=12)
    one = EdgeDetector(tiny_cfg(stage_mode="stage1_only"), seed=12)
    out_two = two.infer(image)
    out_one = one.infer(image)
    with T.no_grad():
        _, e_g, _ = one.run_stage1(image)
    assert np.array_equal(out_one, e_g.data)
    assert not np.array_equal(out_one, out_two)


def test_infer_accepts_single_image(net):
    single = rng.random((3, 32, 32))
    out = net.infer(single)
    assert out.shape == (1, 32, 32)


def test_infer_repeat_bit_identical(net, image):
    assert np.array_equal(net.infer(image), net.infer(image))


def test_multiscale_single_scale_equals_infer():
    cfg = ModelConfig.toy(input_hw=(32, 32), scales=(0.5, 1.0, 1.5))
    net2 = EdgeDetector(cfg, seed=2)
    img = rng.random((1, 3, 32, 32))
    assert np.array_equal(net2.infer_multiscale(img, (1.0,)), net2.infer(img))


def test_multiscale_range_and_commutativity():
    cfg = ModelConfig.toy(input_hw=(32, 32), scales=(0.5, 1.0, 1.5))
    net2 = EdgeDetector(cfg, seed=2)
    img = rng.random((1, 3, 32, 32))
    a = net2.infer_multiscale(img, (0.5, 1.0, 1.5))
    b = net2.infer_multiscale(img, (1.5, 0.5, 1.0))
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.abs(a - b).max() < 1e-12


def test_multiscale_empty_scales_rejected(net, image):
    with pytest.raises(ConfigError):
        net.infer_multiscale(image, ())


def test_output_shape_for_legal_sizes():
    for h in (32, 64, 96):
        for w in (32, 64):
            cfg = ModelConfig.toy(input_hw=(h, w), scales=(1.0,))
            m = EdgeDetector(cfg, seed=0)
            out = m.infer(np.random.default_rng(1).random((1, 3, h, w)))
            assert out.shape == (1, 1, h, w)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig.toy(input_hw=(40, 64))  # not divisible by 16
    with pytest.raises(ConfigError):
        ModelConfig.toy(stage_mode="three_stage")
    with pytest.raises(ConfigError):
        ModelConfig.toy(scales=())


def test_state_round_trip(net):
    state = net.state_arrays()
    other = EdgeDetector(tiny_cfg(), seed=99)
    other.load_state_arrays({k: v.copy() for k, v in state.items()})
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), other.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
    bad = dict(state)
    bad.pop(sorted(bad)[0])
    with pytest.raises(UsageError):
        other.load_state_arrays(bad)


def test_canonical_text_round_trip():
    cfg = ModelConfig.toy(input_hw=(64, 64))
    assert ModelConfig.from_canonical_text(cfg.canonical_text()) == cfg
