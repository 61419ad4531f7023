"""Multi-scale convolutional encoder with a per-pixel MLP confidence head.

The network reads RGB + sparse depth, builds a six-level feature pyramid
(full resolution, then 1/2 ... 1/32), gathers the pyramid features of every
valid depth pixel by nearest-cell lookup and maps them through an MLP to an
uncertainty ``sigma = 1 + softplus(raw) >= 1``.

Everything is plain numpy in float64 with a hand-written reverse pass so the
gradients can be checked against finite differences. Arrays are channel-first
``(C, H, W)``; pixel coordinates are ``(u, v) = (column, row)``.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import loss as losses
from .kvfile import KVError, floats, format_kv, ints, parse_kv, to_dict

SCALES = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class ArchConfig:
    """Layer plan. Channel widths are given at full size and multiplied by
    ``width_scale`` (rounded, at least 1); the final MLP width stays 1.

    ``scale_subset`` lists pyramid denominators to sample (1 = full res).
    """

    stem_channels: tuple[int, ...] = (32, 64, 64)
    block_channels: tuple[int, ...] = (128, 256, 512, 512, 512)
    mlp_layers: tuple[int, ...] = (512, 128, 1)
    leaky_slope: float = 0.01
    scale_subset: tuple[int, ...] = SCALES
    width_scale: float = 1.0
    depth_scale: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "scale_subset", tuple(sorted(set(int(s) for s in self.scale_subset))))
        if len(self.stem_channels) != 3:
            raise ValueError("stem needs exactly 3 conv layers")
        if len(self.block_channels) != 5:
            raise ValueError("encoder needs exactly 5 blocks")
        if not self.mlp_layers or self.mlp_layers[-1] != 1:
            raise ValueError("mlp_layers must end with width 1")
        if not self.scale_subset or not set(self.scale_subset) <= set(SCALES):
            raise ValueError(f"scale_subset must be a non-empty subset of {SCALES}")
        if self.width_scale <= 0 or self.depth_scale <= 0:
            raise ValueError("width_scale and depth_scale must be positive")

    def _scaled(self, c: int) -> int:
        return max(1, int(round(c * self.width_scale)))

    @property
    def stem(self) -> tuple[int, ...]:
        return tuple(self._scaled(c) for c in self.stem_channels)

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(self._scaled(c) for c in self.block_channels)

    @property
    def mlp(self) -> tuple[int, ...]:
        return tuple(self._scaled(c) for c in self.mlp_layers[:-1]) + (1,)

    @property
    def scale_channels(self) -> dict[int, int]:
        return dict(zip(SCALES, (self.stem[-1],) + self.blocks))

    @property
    def feature_width(self) -> int:
        ch = self.scale_channels
        return sum(ch[s] for s in self.scale_subset)

    def to_text(self) -> str:
        return format_kv([
            ("stem_channels", list(self.stem_channels)),
            ("block_channels", list(self.block_channels)),
            ("mlp_layers", list(self.mlp_layers)),
            ("leaky_slope", float(self.leaky_slope)),
            ("scale_subset", list(self.scale_subset)),
            ("width_scale", float(self.width_scale)),
            ("depth_scale", float(self.depth_scale)),
        ])

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        return cls.from_mapping(to_dict(parse_kv(text)))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(kv) - known
        if unknown:
            raise KVError(f"unknown architecture keys: {sorted(unknown)}")
        args: dict = {}
        for key in ("stem_channels", "block_channels", "mlp_layers"):
            if key in kv:
                args[key] = tuple(ints(kv[key]))
        if "scale_subset" in kv:
            args["scale_subset"] = tuple(parse_scale(t) for t in kv["scale_subset"].split())
        for key in ("leaky_slope", "depth_scale"):
            if key in kv:
                args[key] = floats(kv[key], 1)[0]
        if "width_scale" in kv:
            args["width_scale"] = float(Fraction(kv["width_scale"]))
        return cls(**args)


def parse_scale(token: str) -> int:
    """``'1/8'`` or ``'8'`` -> 8; ``'1'`` -> 1."""
    frac = Fraction(token)
    den = frac.denominator if frac.numerator == 1 else int(frac)
    if den not in SCALES:
        raise ValueError(f"unsupported pyramid scale {token!r}")
    return den


FULL_CONFIG = ArchConfig()
DESK_CONFIG = ArchConfig(width_scale=0.125, depth_scale=10.0)


@dataclass
class ModelParams:
    config: ArchConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]


def param_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 4
    for i, c in enumerate(config.stem):
        shapes[f"stem{i}.w"] = (c, cin, 3, 3)
        shapes[f"stem{i}.b"] = (c,)
        cin = c
    for i, c in enumerate(config.blocks):
        for j in range(2):
            shapes[f"block{i}.conv{j}.w"] = (c, cin, 3, 3)
            shapes[f"block{i}.conv{j}.b"] = (c,)
            cin = c
    fin = config.feature_width
    for k, c in enumerate(config.mlp):
        shapes[f"mlp{k}.w"] = (c, fin)
        shapes[f"mlp{k}.b"] = (c,)
        fin = c
    return shapes


def init_std(config: ArchConfig, shape: tuple[int, ...]) -> float:
    """He-style std for leaky ReLU: ``sqrt(2 / ((1 + a^2) * fan_in))``."""
    fan_in = int(np.prod(shape[1:]))
    return float(np.sqrt(2.0 / ((1.0 + config.leaky_slope**2) * fan_in)))


def init_params(config: ArchConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, init_std(config, shape), size=shape)
    return ModelParams(config, tensors)


# --------------------------------------------------------------------------
# layers


def _leaky(x, a):
    return np.where(x > 0, x, a * x)


def _leaky_back(dy, x, a):
    return dy * np.where(x > 0, 1.0, a)


def _im2col(x):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return win.transpose(0, 3, 4, 1, 2).reshape(C * 9, H * W)


def conv3x3(x, w, b):
    """3x3 conv, stride 1, zero padding 1. Returns output and im2col cache."""
    C, H, W = x.shape
    cols = _im2col(x)
    y = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return y.reshape(w.shape[0], H, W), cols


def conv3x3_back(dy, cols, w, in_shape):
    C, H, W = in_shape
    Cout = w.shape[0]
    dy2 = dy.reshape(Cout, H * W)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    dcols = (w.reshape(Cout, -1).T @ dy2).reshape(C, 3, 3, H, W)
    dxp = np.zeros((C, H + 2, W + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + H, kx : kx + W] += dcols[:, ky, kx]
    return dxp[:, 1:-1, 1:-1], dw, db


def maxpool2(x):
    """2x2 / stride 2 max pooling in ceil mode (odd edges padded with -inf)."""
    C, H, W = x.shape
    H2, W2 = -(-H // 2), -(-W // 2)
    xp = np.full((C, 2 * H2, 2 * W2), -np.inf)
    xp[:, :H, :W] = x
    win = xp.reshape(C, H2, 2, W2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H2, W2, 4)
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2_back(dy, arg, in_shape):
    C, H, W = in_shape
    H2, W2 = dy.shape[1:]
    dwin = np.zeros((C, H2, W2, 4))
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dxp = dwin.reshape(C, H2, W2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, 2 * H2, 2 * W2)
    return dxp[:, :H, :W]


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|); exact x for large x
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigma_from_raw(raw):
    """``1 + softplus(raw)``; never below 1, equal to 1 + raw for large raw."""
    return 1.0 + softplus(raw)


# --------------------------------------------------------------------------
# forward


def _input_tensor(image, depth, config: ArchConfig):
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.shape != depth.shape + (3,):
        raise ValueError(f"image {image.shape} and depth {depth.shape} rasters differ")
    H, W = depth.shape
    if H < 32 or W < 32:
        raise ValueError(f"input must be at least 32x32, got {H}x{W}")
    x = np.empty((4, H, W))
    x[:3] = image.transpose(2, 0, 1)
    x[3] = depth / config.depth_scale
    return x


def _encoder(x, params: ModelParams, keep_cache: bool):
    """Returns the pyramid and, if asked, ``(stem_cache, block_caches)``.

    A conv cache entry is ``(name, cols, in_shape, pre_activation)``; a block
    cache is ``(pool_argmax, pool_in_shape, [conv0, conv1])``.
    """
    a = params.config.leaky_slope
    t = params.tensors
    stem_cache, block_caches = [], []
    pyramid = {}
    h = x
    for i in range(3):
        name = f"stem{i}"
        z, cols = conv3x3(h, t[name + ".w"], t[name + ".b"])
        if keep_cache:
            stem_cache.append((name, cols, h.shape, z))
        h = _leaky(z, a)
    pyramid[1] = h
    for i in range(5):
        pool_shape = h.shape
        h, arg = maxpool2(h)
        convs = []
        for j in range(2):
            name = f"block{i}.conv{j}"
            z, cols = conv3x3(h, t[name + ".w"], t[name + ".b"])
            if keep_cache:
                convs.append((name, cols, h.shape, z))
            h = _leaky(z, a)
        if keep_cache:
            block_caches.append((arg, pool_shape, convs))
        pyramid[2 ** (i + 1)] = h
    return pyramid, (stem_cache, block_caches)


def encoder_forward(image, depth, params: ModelParams) -> dict[int, np.ndarray]:
    """Feature pyramid keyed by denominator: ``{1: stem, 2: block0, ..., 32: block4}``.

    Depth enters as meters divided by ``config.depth_scale``.
    """
    x = _input_tensor(image, depth, params.config)
    return _encoder(x, params, keep_cache=False)[0]


def _cells(pixels, k):
    u = np.asarray(pixels[0])
    v = np.asarray(pixels[1])
    return v // k, u // k


def sample_features(pyramid: dict[int, np.ndarray], pixels, scale_subset: Sequence[int]) -> np.ndarray:
    """Pyramid features at pixel(s) ``(u, v)``; full resolution first, coarsest last.

    ``pixels`` is a pair of scalars or of equal-length integer arrays. The
    cell read at denominator ``k`` is ``(u // k, v // k)``.
    """
    H, W = pyramid[1].shape[1:]
    u = np.asarray(pixels[0])
    v = np.asarray(pixels[1])
    if np.any(u < 0) or np.any(u >= W) or np.any(v < 0) or np.any(v >= H):
        raise ValueError(f"pixel outside the {W}x{H} raster")
    parts = []
    for k in sorted(set(scale_subset)):
        rows, cols = _cells((u, v), k)
        parts.append(pyramid[k][:, rows, cols])
    return np.concatenate(parts, axis=0).T if u.ndim else np.concatenate(parts)


def mlp_forward(features, params: ModelParams, _cache: list | None = None):
    """Raw head output for an ``(N, F)`` (or ``(F,)``) feature array."""
    cfg = params.config
    h = np.asarray(features, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    n_layers = len(cfg.mlp)
    if h.shape[1] != params.tensors["mlp0.w"].shape[1]:
        raise ValueError(
            f"feature width {h.shape[1]} does not match MLP input {params.tensors['mlp0.w'].shape[1]}"
        )
    for k in range(n_layers):
        w, b = params.tensors[f"mlp{k}.w"], params.tensors[f"mlp{k}.b"]
        z = h @ w.T + b
        if _cache is not None:
            _cache.append((h, z))
        h = _leaky(z, cfg.leaky_slope) if k < n_layers - 1 else z
    raw = h[:, 0]
    return raw[0] if single else raw


@dataclass
class Forward:
    """Everything the reverse pass needs for one sample."""

    rows: np.ndarray
    cols: np.ndarray
    raw: np.ndarray
    sigma: np.ndarray
    x_shape: tuple
    pyramid: dict
    enc_cache: tuple
    mlp_cache: list


def forward(params: ModelParams, image, depth, keep_cache: bool = True) -> Forward:
    cfg = params.config
    x = _input_tensor(image, depth, cfg)
    rows, cols = np.nonzero(np.asarray(depth) > 0)
    if rows.size == 0:
        return Forward(rows, cols, np.zeros(0), np.zeros(0), x.shape, {}, ([], []), [])
    pyramid, enc_cache = _encoder(x, params, keep_cache)
    feats = sample_features(pyramid, (cols, rows), cfg.scale_subset)
    mlp_cache: list = []
    raw = mlp_forward(feats, params, mlp_cache if keep_cache else None)
    return Forward(rows, cols, raw, sigma_from_raw(raw), x.shape, pyramid, enc_cache, mlp_cache)


def predict_sigma(params: ModelParams, image, depth) -> np.ndarray:
    """Dense ``(H, W)`` map: sigma on valid pixels, 0 elsewhere."""
    depth = np.asarray(depth, dtype=np.float64)
    fw = forward(params, image, depth, keep_cache=False)
    out = np.zeros(depth.shape)
    out[fw.rows, fw.cols] = fw.sigma
    return out


# --------------------------------------------------------------------------
# reverse pass


def _backward_one(params: ModelParams, fw: Forward, dsigma: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(sigma) per valid pixel."""
    cfg = params.config
    t = params.tensors
    a = cfg.leaky_slope
    grads = {name: np.zeros_like(v) for name, v in t.items()}

    # head
    g = (dsigma * sigmoid(fw.raw))[:, None]
    n_layers = len(cfg.mlp)
    for k in reversed(range(n_layers)):
        h_in, z = fw.mlp_cache[k]
        if k < n_layers - 1:
            g = _leaky_back(g, z, a)
        grads[f"mlp{k}.w"] = g.T @ h_in
        grads[f"mlp{k}.b"] = g.sum(axis=0)
        g = g @ t[f"mlp{k}.w"]

    # scatter sampled-feature gradients back onto the pyramid
    dpyr = {}
    offset = 0
    ch = cfg.scale_channels
    for k in cfg.scale_subset:
        c = ch[k]
        lvl = fw.pyramid[k]
        h, w = lvl.shape[1:]
        r, cc = _cells((fw.cols, fw.rows), k)
        flat = np.zeros((h * w, c))
        np.add.at(flat, r * w + cc, g[:, offset : offset + c])
        dpyr[k] = flat.T.reshape(c, h, w)
        offset += c

    stem_cache, block_caches = fw.enc_cache
    dh = None
    for i in reversed(range(5)):
        k = 2 ** (i + 1)
        if k in dpyr:
            dh = dpyr[k] if dh is None else dh + dpyr[k]
        if dh is None:
            continue  # nothing sampled at this level or deeper
        arg, pool_shape, convs = block_caches[i]
        for name, cols, in_shape, z in reversed(convs):
            dh = _leaky_back(dh, z, a)
            dh, dw, db = conv3x3_back(dh, cols, t[name + ".w"], in_shape)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
        dh = maxpool2_back(dh, arg, pool_shape)
    if 1 in dpyr:
        dh = dpyr[1] if dh is None else dh + dpyr[1]
    for name, cols, in_shape, z in reversed(stem_cache):
        dh = _leaky_back(dh, z, a)
        dh, dw, db = conv3x3_back(dh, cols, t[name + ".w"], in_shape)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
    return grads


@dataclass
class BackwardResult:
    loss: float | None  # mean over valid pixels; None when skipped
    grads: dict[str, np.ndarray]
    valid_px: int
    skipped: bool


def _sample_pass(params: ModelParams, kind: str, item):
    """Loss sum, gradients and pixel count for one ``(image, depth, proxy)``.

    The model sees every valid depth pixel; the loss covers those that also
    have a proxy label.
    """
    image, depth, proxy = item
    fw = forward(params, image, depth, keep_cache=True)
    ds = np.asarray(proxy)[fw.rows, fw.cols]
    used = ds > 0
    n = int(used.sum())
    if n == 0:
        return 0.0, None, 0
    if not np.all(np.isfinite(fw.sigma[used])):
        return float("nan"), None, n  # let the caller abort on the non-finite loss
    d = np.asarray(depth)[fw.rows, fw.cols]
    dsigma = np.zeros(fw.rows.size)
    per_px = losses.loss_value(kind, d[used], ds[used], fw.sigma[used])
    dsigma[used] = losses.loss_grad_sigma(kind, d[used], ds[used], fw.sigma[used])
    return float(per_px.sum()), _backward_one(params, fw, dsigma), n


def model_backward(
    batch: Sequence[tuple],
    params: ModelParams,
    loss_kind: str = "gaussian_star",
    loss_scale: float = 1.0,
    workers: int = 1,
) -> BackwardResult:
    """Mean loss over all valid pixels of the batch and its exact gradients.

    ``batch`` holds ``(image, depth, proxy)`` triples. Samples may run on
    ``workers`` threads; per-sample sums are reduced in batch order so the
    result does not depend on the thread count.
    """
    kind = losses.normalize_kind(loss_kind)
    if workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda item: _sample_pass(params, kind, item), batch))
    else:
        parts = [_sample_pass(params, kind, item) for item in batch]

    n = sum(p[2] for p in parts)
    grads = {name: np.zeros_like(v) for name, v in params.tensors.items()}
    if n == 0:
        return BackwardResult(None, grads, 0, True)
    total = 0.0
    for loss_sum, g, _ in parts:
        total += loss_sum
        if g is None:
            continue
        for name in grads:
            grads[name] += g[name]
    scale = loss_scale / n
    for name in grads:
        grads[name] *= scale
    return BackwardResult(loss_scale * total / n, grads, n, False)


def model_loss(batch: Sequence[tuple], params: ModelParams, loss_kind: str = "gaussian_star") -> float | None:
    """Forward-only counterpart of :func:`model_backward`."""
    kind = losses.normalize_kind(loss_kind)
    total, n = 0.0, 0
    for image, depth, proxy in batch:
        fw = forward(params, image, depth, keep_cache=False)
        ds = np.asarray(proxy)[fw.rows, fw.cols]
        used = ds > 0
        if not used.any():
            continue
        d = np.asarray(depth)[fw.rows, fw.cols]
        total += float(losses.loss_value(kind, d[used], ds[used], fw.sigma[used]).sum())
        n += int(used.sum())
    return None if n == 0 else total / n


# --------------------------------------------------------------------------
# checkpoint file

MAGIC = b"LCONFMDL"
VERSION = 1


def save_params(params: ModelParams, path: str | Path) -> None:
    """Magic, u32 version, u32-length config text, u32 tensor count, then per
    tensor: u16 name length, name, u8 ndim, u32 dims, float32 data."""
    cfg = params.config.to_text().encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params.tensors))]
    for name, arr in params.tensors.items():
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(MAGIC)
    version, cfg_len = struct.unpack_from("<II", raw, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ArchConfig.from_text(raw[pos : pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    expected = param_shapes(config)
    if count != len(expected):
        raise ValueError(f"{path}: {count} tensors, config implies {len(expected)}")
    tensors = {}
    for name_exp, shape_exp in expected.items():
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        if name != name_exp or tuple(shape) != shape_exp:
            raise ValueError(
                f"{path}: tensor {name} {tuple(shape)} does not match config ({name_exp} {shape_exp})"
            )
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelParams(config, tensors)
