"""Independent forward pass of the confidence network, used as a gradient oracle.

It shares no code with ``lidarconf.model``: convolutions are written as nine
shifted ``einsum`` calls and pooling as an explicit stack of the four window
candidates. Every leaky-ReLU sign mask and pooling argmax can be recorded on
one pass and replayed on later passes. Replaying the pattern recorded at the
unperturbed parameters makes the function smooth in a neighbourhood, so
central differences with a coarse step do not straddle kinks.
"""
from __future__ import annotations

import numpy as np

from lidarconf import loss as losses


def conv3x3(x, w, b):
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    y = np.zeros((w.shape[0], H, W)) + b[:, None, None]
    for ky in range(3):
        for kx in range(3):
            y += np.einsum("oc,chw->ohw", w[:, :, ky, kx], xp[:, ky : ky + H, kx : kx + W])
    return y


def leaky(z, slope, key, pattern, record):
    mask = pattern[key] if pattern is not None else z > 0
    if record is not None:
        record[key] = mask
    return np.where(mask, z, slope * z)


def pool2(x, key, pattern, record):
    C, H, W = x.shape
    H2, W2 = -(-H // 2), -(-W // 2)
    cand = []
    for di in range(2):
        for dj in range(2):
            c = np.full((C, H2, W2), -np.inf)
            sub = x[:, di::2, dj::2]
            c[:, : sub.shape[1], : sub.shape[2]] = sub
            cand.append(c)
    cand = np.stack(cand)
    k = pattern[key] if pattern is not None else np.argmax(cand, 0)
    if record is not None:
        record[key] = k
    return np.take_along_axis(cand, k[None], 0)[0]


def reference_loss(params, batch, kind, pattern=None, record=None):
    """Mean per-pixel loss over all used pixels of ``batch``."""
    cfg = params.config
    a = cfg.leaky_slope
    t = params.tensors
    total, n = 0.0, 0
    for si, (img, dep, prox) in enumerate(batch):
        h = np.concatenate([img.transpose(2, 0, 1), dep[None] / cfg.depth_scale])
        pyr = {}
        for i in range(3):
            h = leaky(conv3x3(h, t[f"stem{i}.w"], t[f"stem{i}.b"]), a, (si, "s", i), pattern, record)
        pyr[1] = h
        for i in range(5):
            h = pool2(h, (si, "p", i), pattern, record)
            for j in range(2):
                name = f"block{i}.conv{j}"
                h = leaky(conv3x3(h, t[name + ".w"], t[name + ".b"]), a, (si, "b", i, j), pattern, record)
            pyr[2 ** (i + 1)] = h
        vs, us = np.nonzero(dep > 0)
        f = np.concatenate([pyr[k][:, vs // k, us // k] for k in cfg.scale_subset], 0).T
        for k in range(len(cfg.mlp)):
            z = f @ t[f"mlp{k}.w"].T + t[f"mlp{k}.b"]
            f = leaky(z, a, (si, "m", k), pattern, record) if k < len(cfg.mlp) - 1 else z
        sigma = 1.0 + np.logaddexp(0.0, f[:, 0])
        used = prox[vs, us] > 0
        total += losses.loss_value(kind, dep[vs, us][used], prox[vs, us][used], sigma[used]).sum()
        n += int(used.sum())
    return total / n


def finite_difference_check(params, batch, grads, kind, h=1e-3):
    """Worst relative error of ``grads`` against pattern-frozen central differences.

    Relative error uses the denominator ``max(|g|, 1e-8)``.
    """
    pattern = {}
    reference_loss(params, batch, kind, record=pattern)
    worst, where = 0.0, None
    for name, arr in params.tensors.items():
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = reference_loss(params, batch, kind, pattern)
            arr[idx] = orig - h
            fm = reference_loss(params, batch, kind, pattern)
            arr[idx] = orig
            fd = (fp - fm) / (2 * h)
            rel = abs(fd - g[idx]) / max(abs(g[idx]), 1e-8)
            if rel > worst:
                worst, where = rel, (name, idx)
    return worst, where


def tiny_batch(seed=0, shape=(33, 35), density=0.3):
    """Odd-sized raster (exercises ceil-mode pooling) with an O(1) loss."""
    from lidarconf.depthio import compute_proxy_labels

    rng = np.random.default_rng(seed)
    H, W = shape
    img = rng.uniform(size=(H, W, 3))
    dep = np.where(rng.uniform(size=(H, W)) < density, rng.uniform(4, 6, size=(H, W)), 0.0)
    return [(img, dep, compute_proxy_labels(dep, 5, "min"))]


def tiny_config():
    from lidarconf.model import ArchConfig

    return ArchConfig(stem_channels=(16, 24, 24), block_channels=(24, 24, 32, 32, 32),
                      mlp_layers=(64, 1), width_scale=1 / 8)
