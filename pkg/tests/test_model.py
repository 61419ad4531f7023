import math

import numpy as np
import pytest

from lidarconf import model as M
from reference_net import finite_difference_check, reference_loss, tiny_batch, tiny_config

FULL = M.FULL_CONFIG


def test_full_parameter_count():
    n = M.init_params(FULL, 0).count
    assert n == 15_224_609
    assert abs(n - 16e6) / 16e6 < 0.1


def test_full_channel_plan():
    assert [FULL.scale_channels[k] for k in M.SCALES] == [64, 128, 256, 512, 512, 512]
    assert FULL.feature_width == 1984


def test_scale_subset_schedule():
    # scales added coarsest first, full resolution last
    widths = []
    for i in range(1, 7):
        cfg = M.ArchConfig(scale_subset=M.SCALES[-i:])
        widths.append(cfg.feature_width)
    assert widths == [512, 1024, 1536, 1792, 1920, 1984]


def test_parse_scale():
    assert M.parse_scale("1/8") == 8 and M.parse_scale("8") == 8 and M.parse_scale("1") == 1
    with pytest.raises(ValueError):
        M.parse_scale("1/3")


def test_arch_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        M.ArchConfig(block_channels=(1, 2, 3))
    with pytest.raises(ValueError):
        M.ArchConfig(mlp_layers=(8, 2))
    with pytest.raises(ValueError):
        M.ArchConfig(scale_subset=())
    cfg = M.ArchConfig(width_scale=0.125, scale_subset=(32, 4), depth_scale=10.0)
    assert M.ArchConfig.from_text(cfg.to_text()) == cfg
    assert M.ArchConfig.from_text("width_scale = 1/8\n").width_scale == 0.125


@pytest.fixture(scope="module")
def small_params():
    return M.init_params(M.DESK_CONFIG, 3)


def test_zero_input_gives_zero_pyramid(small_params):
    pyr = M.encoder_forward(np.zeros((40, 48, 3)), np.zeros((40, 48)), small_params)
    assert all(not np.any(level) for level in pyr.values())


def test_pyramid_shape_law(small_params, rng):
    for _ in range(10):
        H, W = rng.integers(32, 90, 2)
        pyr = M.encoder_forward(rng.uniform(size=(H, W, 3)), np.zeros((H, W)), small_params)
        h, w = H, W
        assert pyr[1].shape[1:] == (H, W)
        for k in M.SCALES[1:]:
            h, w = -(-h // 2), -(-w // 2)
            assert pyr[k].shape == (M.DESK_CONFIG.scale_channels[k], h, w)
    pyr = M.encoder_forward(np.zeros((64, 64, 3)), np.zeros((64, 64)), small_params)
    assert pyr[32].shape[1:] == (2, 2)


def test_sample_features_indexing(small_params, rng):
    pyr = M.encoder_forward(rng.uniform(size=(36, 40, 3)), np.zeros((36, 40)), small_params)
    np.testing.assert_array_equal(M.sample_features(pyr, (5, 7), (1,)), pyr[1][:, 7, 5])
    np.testing.assert_array_equal(M.sample_features(pyr, (5, 7), (2,)), pyr[2][:, 3, 2])
    v = M.sample_features(pyr, (np.array([5, 39]), np.array([7, 35])), M.SCALES)
    assert v.shape == (2, M.DESK_CONFIG.feature_width)
    np.testing.assert_array_equal(v[1, -M.DESK_CONFIG.scale_channels[32]:], pyr[32][:, 1, 1])
    with pytest.raises(ValueError, match="outside"):
        M.sample_features(pyr, (40, 0), (1,))


def test_mlp_unit_vector_and_zero():
    cfg = M.ArchConfig(mlp_layers=(1,), scale_subset=(32,), width_scale=1 / 64)
    p = M.init_params(cfg)
    f = np.arange(1.0, cfg.feature_width + 1)
    p.tensors["mlp0.w"][:] = 0.0
    assert M.mlp_forward(f, p) == 0.0
    p.tensors["mlp0.w"][0, 0] = 1.0
    assert M.mlp_forward(f, p) == 1.0
    with pytest.raises(ValueError, match="width"):
        M.mlp_forward(f[:-1], p)


def test_mlp_fuzz_finite(small_params, rng):
    feats = rng.normal(scale=10, size=(10_000, M.DESK_CONFIG.feature_width))
    raw = M.mlp_forward(feats, small_params)
    assert raw.shape == (10_000,) and np.all(np.isfinite(raw))
    assert np.all(M.sigma_from_raw(raw) >= 1.0)


def test_sigma_from_raw():
    assert M.sigma_from_raw(0.0) == pytest.approx(1 + math.log(2), abs=1e-15)
    assert abs(M.sigma_from_raw(-40.0) - 1.0) < 1e-12
    assert M.sigma_from_raw(40.0) == pytest.approx(41.0, abs=1e-12)
    assert np.isfinite(M.sigma_from_raw(1e6))
    x = np.linspace(-30, 30, 1001)
    s = M.sigma_from_raw(x)
    assert np.all(np.diff(s) > 0) and np.all(s > 1.0)


def test_init_deterministic_and_scaled():
    a = M.init_params(FULL, 7)
    b = M.init_params(FULL, 7)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    for name, arr in a.tensors.items():
        if name.endswith(".b"):
            assert not arr.any()
        elif arr.size >= 1000:
            target = M.init_std(FULL, arr.shape) ** 2
            assert abs(arr.var() / target - 1) < 0.2, name


def test_gradients_match_reference():
    params = M.init_params(tiny_config(), 0)
    assert 1000 <= params.count <= 2000
    batch = tiny_batch()
    res = M.model_backward(batch, params, "gaussian_star")
    assert res.loss == pytest.approx(reference_loss(params, batch, "gaussian_star"), rel=1e-12)
    worst, where = finite_difference_check(params, batch, res.grads, "gaussian_star")
    assert worst < 1e-4, where


def test_backward_skips_empty_batch(small_params):
    empty = (np.zeros((32, 32, 3)), np.zeros((32, 32)), np.zeros((32, 32)))
    res = M.model_backward([empty], small_params)
    assert res.skipped and res.loss is None and res.valid_px == 0
    assert not any(g.any() for g in res.grads.values())


def test_loss_scale_is_linear():
    params = M.init_params(tiny_config(), 1)
    batch = tiny_batch(seed=4)
    a = M.model_backward(batch, params, "laplacian_star")
    b = M.model_backward(batch, params, "laplacian_star", loss_scale=2.0)
    assert b.loss == 2 * a.loss
    for k in a.grads:
        np.testing.assert_array_equal(b.grads[k], 2 * a.grads[k])


def test_threaded_backward_identical():
    params = M.init_params(tiny_config(), 2)
    batch = tiny_batch(seed=1) + tiny_batch(seed=2) + tiny_batch(seed=3)
    a = M.model_backward(batch, params, workers=1)
    b = M.model_backward(batch, params, workers=3)
    assert a.loss == b.loss
    assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)


def test_forward_deterministic_and_sparse(small_params, rng):
    img = rng.uniform(size=(48, 64, 3))
    dep = np.where(rng.uniform(size=(48, 64)) < 0.1, rng.uniform(2, 30, (48, 64)), 0.0)
    s1 = M.predict_sigma(small_params, img, dep)
    s2 = M.predict_sigma(small_params, img, dep)
    assert np.array_equal(s1, s2)
    assert np.array_equal(s1 > 0, dep > 0)
    assert np.all(s1[dep > 0] >= 1.0)
    assert M.model_loss([(img, dep, dep)], small_params) == pytest.approx(
        M.model_backward([(img, dep, dep)], small_params).loss, rel=1e-12)


def test_checkpoint_round_trip(tmp_path, small_params):
    f = tmp_path / "m.bin"
    M.save_params(small_params, f)
    back = M.load_params(f)
    assert back.config == small_params.config
    for k, v in small_params.tensors.items():
        np.testing.assert_array_equal(back[k], v.astype(np.float32))
    g = tmp_path / "again.bin"
    M.save_params(back, g)
    assert g.read_bytes() == f.read_bytes()


def test_checkpoint_errors(tmp_path, small_params):
    f = tmp_path / "m.bin"
    f.write_bytes(b"NOTAMODEL" * 4)
    with pytest.raises(ValueError, match="checkpoint"):
        M.load_params(f)
    M.save_params(small_params, f)
    raw = f.read_bytes()
    f.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        M.load_params(f)
    f.write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(ValueError):
        M.load_params(f)
