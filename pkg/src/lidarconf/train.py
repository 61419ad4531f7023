"""Unsupervised training: random crops, proxy labels, Adam.

All randomness (initialization, epoch shuffles, crop positions) flows from
``TrainConfig.seed``, so two runs on the same data are bit-identical.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from . import loss as losses
from .depthio import DepthFrame, compute_proxy_labels
from .kvfile import KVError, floats, format_kv, ints, parse_kv, to_dict
from .model import ArchConfig, ModelParams, init_params, model_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "gaussian_star"
    reducer: Literal["min", "avg"] = "min"
    window: int = 9
    exclude_center: bool = False
    learning_rate: float = 1e-5
    batch_size: int = 2
    epochs: int = 3
    crop: tuple[int, int] = (320, 1216)  # (height, width)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    proxy_source: Literal["patch", "external"] = "patch"
    crop_rejection: int = 0  # redraws allowed for crops without valid depth
    clip_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", losses.normalize_kind(self.loss_kind))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.window % 2 == 0:
            raise ValueError("window must be odd")
        if self.reducer not in ("min", "avg"):
            raise ValueError(f"unknown reducer {self.reducer!r}")
        if self.proxy_source not in ("patch", "external"):
            raise ValueError(f"unknown proxy_source {self.proxy_source!r}")

    def to_text(self) -> str:
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            items.append((f.name, list(v) if isinstance(v, tuple) else v))
        return format_kv(items)

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise KVError(f"unknown training keys: {sorted(unknown)}")
        args: dict = {}
        for key, value in kv.items():
            if key == "crop":
                args[key] = tuple(ints(value, 2))
            elif key in ("window", "batch_size", "epochs", "seed", "crop_rejection"):
                args[key] = ints(value, 1)[0]
            elif key == "exclude_center":
                args[key] = value.strip().lower() in ("1", "true", "yes")
            elif key in ("loss_kind", "reducer", "proxy_source"):
                args[key] = value.strip()
            else:
                args[key] = floats(value, 1)[0]
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(to_dict(parse_kv(text)))


DESK_TRAIN = TrainConfig(crop=(64, 256), learning_rate=1e-3)


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    valid_px: int
    grad_norm: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    skipped_batches: int = 0
    wall_time: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "valid_px", "grad_norm"])
            for r in self.steps:
                w.writerow([r.step, repr(r.loss), r.valid_px, repr(r.grad_norm)])


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; carries the last finite parameters."""

    def __init__(self, message: str, params: ModelParams, log: TrainLog):
        super().__init__(message)
        self.params = params
        self.log = log


# --------------------------------------------------------------------------


def sample_crop(frame: DepthFrame, crop: tuple[int, int], rng: np.random.Generator) -> DepthFrame:
    """Uniformly placed ``(height, width)`` crop of every raster of ``frame``."""
    ch, cw = crop
    H, W = frame.shape
    if ch > H or cw > W:
        raise ValueError(f"crop {ch}x{cw} larger than frame {H}x{W}")
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    sl = (slice(top, top + ch), slice(left, left + cw))
    return DepthFrame(
        image=frame.image[sl],
        depth=frame.depth[sl],
        reference=None if frame.reference is None else frame.reference[sl],
        outliers=None if frame.outliers is None else frame.outliers[sl],
        name=frame.name,
    )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(x) for k, x in tensors.items()},
                   {k: np.zeros_like(x) for k, x in tensors.items()})


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``tensors`` and ``state``."""
    state.t += 1
    t = state.t
    for name, theta in tensors.items():
        g = grads[name]
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}: param {theta.shape}, grad {g.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def _proxy_for(frame: DepthFrame, cfg: TrainConfig) -> np.ndarray:
    if cfg.proxy_source == "external":
        if frame.reference is None:
            raise ValueError(f"frame {frame.name!r} has no reference depth for external proxies")
        return np.where((frame.depth > 0) & (frame.reference > 0), frame.reference, 0.0)
    if not (frame.depth > 0).any():
        return np.zeros_like(frame.depth)
    return compute_proxy_labels(frame.depth, cfg.window, cfg.reducer, cfg.exclude_center)


def train(
    dataset: Sequence[DepthFrame],
    arch: ArchConfig,
    cfg: TrainConfig,
    workers: int = 1,
    on_step: Callable[[StepRecord], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train from scratch; returns final parameters and the step log.

    Raises :class:`TrainingDiverged` on the first non-finite loss or gradient.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if cfg.proxy_source == "external" and any(f.reference is None for f in dataset):
        raise ValueError("external proxies need a reference depth on every frame")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, cfg.seed)
    state = AdamState.zeros_like(params.tensors)
    log_ = TrainLog()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for i in order[start : start + cfg.batch_size]:
                crop = sample_crop(dataset[i], cfg.crop, rng)
                for _ in range(cfg.crop_rejection):
                    if (crop.depth > 0).any():
                        break
                    crop = sample_crop(dataset[i], cfg.crop, rng)
                batch.append((crop.image, crop.depth, _proxy_for(crop, cfg)))
            res = model_backward(batch, params, cfg.loss_kind, workers=workers)
            if res.skipped:
                log_.skipped_batches += 1
                continue
            gnorm = _grad_norm(res.grads)
            if not (math.isfinite(res.loss) and math.isfinite(gnorm)):
                log_.wall_time = time.perf_counter() - t0
                raise TrainingDiverged(
                    f"non-finite loss/gradient at step {step} (epoch {epoch}): "
                    f"loss={res.loss}, grad_norm={gnorm}",
                    params,
                    log_,
                )
            if cfg.clip_grad_norm > 0 and gnorm > cfg.clip_grad_norm:
                for g in res.grads.values():
                    g *= cfg.clip_grad_norm / gnorm
            rec = StepRecord(step, epoch, res.loss, res.valid_px, gnorm)
            log_.steps.append(rec)
            epoch_losses.append(res.loss)
            if on_step is not None:
                on_step(rec)
            adam_step(params.tensors, res.grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            step += 1
        mean = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log_.epoch_loss.append(mean)
        log.info("epoch %d: mean loss %.5f over %d steps", epoch, mean, len(epoch_losses))
    log_.wall_time = time.perf_counter() - t0
    return params, log_
