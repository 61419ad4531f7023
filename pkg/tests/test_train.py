import numpy as np
import pytest

from lidarconf import model as M
from lidarconf import train as T
from lidarconf.depthio import DepthFrame
from lidarconf.scene import packaged_spec, synth_scene
from reference_net import tiny_config


def make_frame(rng, shape=(100, 100)):
    H, W = shape
    depth = np.where(rng.uniform(size=shape) < 0.2, rng.uniform(2, 20, shape), 0.0)
    return DepthFrame(rng.uniform(size=(H, W, 3)), depth, reference=depth.copy(),
                      outliers=np.zeros(shape, bool))


@pytest.fixture(scope="module")
def desk_frames():
    spec = packaged_spec("desk")
    return [synth_scene(spec, s).to_depth_frame() for s in range(6)]


# ---------------------------------------------------------------- crops


def test_identity_crop(rng):
    f = make_frame(rng, (40, 60))
    c = T.sample_crop(f, (40, 60), rng)
    assert np.array_equal(c.image, f.image) and np.array_equal(c.depth, f.depth)
    assert np.array_equal(c.reference, f.reference)


def test_crop_rasters_aligned(rng):
    f = make_frame(rng)
    f.image[..., 0] = np.arange(100)[:, None] * 1000 + np.arange(100)
    c = T.sample_crop(f, (30, 20), rng)
    top, left = divmod(int(c.image[0, 0, 0]), 1000)
    assert np.array_equal(c.depth, f.depth[top : top + 30, left : left + 20])
    assert np.array_equal(c.reference, f.reference[top : top + 30, left : left + 20])


def test_crop_sequence_deterministic(rng):
    f = make_frame(rng)
    f.image[..., 0] = np.arange(100)[:, None] * 1000 + np.arange(100)
    a = np.random.default_rng(4)
    b = np.random.default_rng(4)
    xs = [T.sample_crop(f, (50, 50), a).image[0, 0, 0] for _ in range(20)]
    ys = [T.sample_crop(f, (50, 50), b).image[0, 0, 0] for _ in range(20)]
    assert xs == ys and len(set(xs)) > 1


def test_crop_coverage(rng):
    f = make_frame(rng)
    f.image[..., 0] = np.arange(100)[:, None] * 1000 + np.arange(100)
    tops, lefts = set(), set()
    g = np.random.default_rng(0)
    for _ in range(10_000):
        top, left = divmod(int(T.sample_crop(f, (50, 50), g).image[0, 0, 0]), 1000)
        tops.add(top)
        lefts.add(left)
    assert tops == set(range(51)) and lefts == set(range(51))


def test_crop_too_large(rng):
    with pytest.raises(ValueError, match="larger"):
        T.sample_crop(make_frame(rng, (40, 60)), (41, 10), rng)


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient():
    theta = {"w": np.array([1.0, -2.0])}
    state = T.AdamState.zeros_like(theta)
    state.m["w"][:] = 0.5
    state.v["w"][:] = 0.25
    state.t = 3
    before_m = state.m["w"].copy()
    T.adam_step(theta, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * before_m)
    np.testing.assert_allclose(state.v["w"], 0.999 * 0.25)
    fresh = {"w": np.array([1.0, -2.0])}
    st = T.AdamState.zeros_like(fresh)
    T.adam_step(fresh, {"w": np.zeros(2)}, st, lr=0.1)
    assert np.array_equal(fresh["w"], [1.0, -2.0])


def test_adam_first_step_is_sign_step():
    g = np.array([3.0, -0.2, 1e-3])
    theta = {"w": np.zeros(3)}
    T.adam_step(theta, {"w": g}, T.AdamState.zeros_like(theta), lr=0.01)
    np.testing.assert_allclose(theta["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic_bowl():
    theta = {"w": np.array([1.0, -3.0, 0.5])}
    state = T.AdamState.zeros_like(theta)
    for _ in range(500):
        T.adam_step(theta, {"w": 2 * theta["w"]}, state, lr=0.1)
    assert np.all(np.abs(theta["w"]) < 1e-3)


def test_adam_shape_mismatch():
    theta = {"w": np.zeros(3)}
    with pytest.raises(ValueError, match="shape"):
        T.adam_step(theta, {"w": np.zeros(4)}, T.AdamState.zeros_like(theta), lr=0.1)


# ---------------------------------------------------------------- config


def test_config_round_trip_and_validation():
    cfg = T.TrainConfig(loss_kind="laplacian-star", window=7, crop=(32, 64), exclude_center=True,
                        learning_rate=2.5e-4, proxy_source="external", clip_grad_norm=3.0)
    assert cfg.loss_kind == "laplacian_star"
    assert T.TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        T.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        T.TrainConfig(window=8)
    with pytest.raises(ValueError):
        T.TrainConfig(loss_kind="l2")
    with pytest.raises(Exception):
        T.TrainConfig.from_text("momentum = 0.9\n")


# ---------------------------------------------------------------- training


SMALL = T.TrainConfig(crop=(32, 64), learning_rate=1e-3, epochs=2, batch_size=2, seed=5)


def test_train_deterministic(desk_frames):
    arch = M.ArchConfig(width_scale=1 / 16, depth_scale=10.0)
    p1, log1 = T.train(desk_frames, arch, SMALL)
    p2, log2 = T.train(desk_frames, arch, SMALL, workers=2)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1.tensors)
    assert [s.loss for s in log1.steps] == [s.loss for s in log2.steps]
    assert len(log1.epoch_loss) == 2 and len(log1.steps) + log1.skipped_batches == 6
    assert all(np.isfinite(s.loss) and s.valid_px > 0 for s in log1.steps)


def test_loss_decreases(desk_frames):
    arch = M.ArchConfig(width_scale=1 / 16, depth_scale=10.0)
    cfg = T.TrainConfig(crop=(64, 256), learning_rate=1e-3, epochs=4, batch_size=1, seed=0)
    _, log = T.train(desk_frames, arch, cfg)
    assert log.epoch_loss[-1] < log.epoch_loss[0]


def test_log_csv(tmp_path, desk_frames):
    _, log = T.train(desk_frames[:2], tiny_config(), T.TrainConfig(crop=(32, 32), epochs=1))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,valid_px,grad_norm"
    assert len(lines) == 1 + len(log.steps)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good_params(rng):
    # a huge depth makes the squared residual overflow to inf
    frame = make_frame(rng, (32, 32))
    frame.depth[frame.depth > 0] = 1e200
    frame.depth[0, 0] = 1e-200
    cfg = T.TrainConfig(loss_kind="gaussian", crop=(32, 32), epochs=1, batch_size=1)
    with pytest.raises(T.TrainingDiverged) as err:
        T.train([frame], tiny_config(), cfg)
    assert "non-finite" in str(err.value)
    assert all(np.all(np.isfinite(t)) for t in err.value.params.tensors.values())
    assert err.value.log.steps == []


def test_all_empty_crops_are_skipped(rng):
    frame = make_frame(rng, (32, 32))
    frame.depth[:] = 0.0
    _, log = T.train([frame], tiny_config(), T.TrainConfig(crop=(32, 32), epochs=2, batch_size=1))
    assert log.steps == [] and log.skipped_batches == 2


def test_external_proxy_needs_reference(rng):
    frame = make_frame(rng, (32, 32))
    frame.reference = None
    with pytest.raises(ValueError, match="reference"):
        T.train([frame], tiny_config(), T.TrainConfig(crop=(32, 32), proxy_source="external"))


def test_external_proxy_trains(desk_frames):
    cfg = T.TrainConfig(crop=(32, 64), epochs=1, proxy_source="external", learning_rate=1e-3)
    _, log = T.train(desk_frames[:2], tiny_config(), cfg)
    assert log.steps and all(np.isfinite(s.loss) for s in log.steps)
