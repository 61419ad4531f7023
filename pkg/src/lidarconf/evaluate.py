"""Sparsification curves, AUC, error metrics and confidence-based filtering.

Conventions used throughout:

* Pixels are evaluated where both the LiDAR depth and the reference are > 0.
* Sorting by confidence is stable in raster order, so ties between equal
  ``sigma`` values are broken by the earlier pixel being removed first.
* A curve has 50 levels at removal fractions 0.00 .. 0.98. Level ``i``
  removes ``min(i * step, N - 1)`` pixels with ``step = max(1, floor(0.02 N))``.
* AUC is the trapezoid over the fractions divided by 0.98, so a flat curve
  has AUC equal to its value.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

from .depthio import DepthFrame, abs_diff_confidence, compute_proxy_labels

log = logging.getLogger(__name__)

N_LEVELS = 50
STEP_FRACTION = 0.02
FRACTIONS = np.arange(N_LEVELS) * STEP_FRACTION
MIN_PIXELS = N_LEVELS


@dataclass(frozen=True)
class SparsificationCurve:
    fractions: np.ndarray
    rmse: np.ndarray
    n_pixels: int

    @property
    def degenerate(self) -> bool:
        return self.n_pixels < MIN_PIXELS


def removal_order(conf: np.ndarray) -> np.ndarray:
    """Indices sorted by decreasing ``conf``; ties keep raster order."""
    conf = np.asarray(conf, dtype=np.float64).ravel()
    return np.argsort(-conf, kind="stable")


def _retained_rmse(errors_sorted: np.ndarray) -> np.ndarray:
    """RMSE of ``errors_sorted[k:]`` for every k, without cancellation."""
    sq = errors_sorted * errors_sorted
    tail = np.cumsum(sq[::-1])[::-1]
    counts = np.arange(sq.size, 0, -1)
    return np.sqrt(tail / counts)


def level_counts(n: int) -> np.ndarray:
    """Pixels removed at each of the 50 levels for a frame of ``n`` pixels."""
    step = max(1, int(math.floor(STEP_FRACTION * n)))
    return np.minimum(np.arange(N_LEVELS) * step, n - 1)


def sparsification_curve(
    errors,
    conf=None,
    order: Literal["by_confidence", "by_error"] = "by_confidence",
) -> SparsificationCurve:
    errors = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    if errors.size == 0:
        raise ValueError("sparsification curve of an empty pixel set")
    if not np.all(np.isfinite(errors)):
        raise ValueError("errors must be finite")
    if order == "by_error":
        idx = removal_order(errors)
    elif order == "by_confidence":
        if conf is None:
            raise ValueError("by_confidence ordering needs a confidence array")
        conf = np.asarray(conf, dtype=np.float64).ravel()
        if conf.shape != errors.shape:
            raise ValueError("errors and confidence sizes differ")
        idx = removal_order(conf)
    else:
        raise ValueError(f"unknown order {order!r}")
    rm = _retained_rmse(errors[idx])
    return SparsificationCurve(FRACTIONS.copy(), rm[level_counts(errors.size)], errors.size)


def auc(curve: SparsificationCurve) -> float:
    y = curve.rmse
    x = curve.fractions
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5))
    return area / float(x[-1] - x[0])


def _masked(pred, ref, mask):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError("raster size mismatch")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return pred[mask] - ref[mask]


def rmse(pred, ref, mask=None) -> float:
    e = _masked(pred, ref, mask)
    return float(np.sqrt(np.mean(e * e)))


def mae(pred, ref, mask=None) -> float:
    return float(np.mean(np.abs(_masked(pred, ref, mask))))


# --------------------------------------------------------------------------
# filtering


def filter_depth(depth, conf, percentile: float | None = None, threshold: float | None = None) -> np.ndarray:
    """Invalidate the least confident points of a sparse depth map.

    Exactly one of ``percentile`` (drop ``ceil(p% of valid)`` points with the
    largest sigma) or ``threshold`` (drop points with sigma above ``t``) must be
    given. Returns a new array; kept pixels are copied unchanged.
    """
    depth = np.asarray(depth)
    conf = np.asarray(conf, dtype=np.float64)
    if depth.shape != conf.shape:
        raise ValueError(f"raster size mismatch: depth {depth.shape}, confidence {conf.shape}")
    if (percentile is None) == (threshold is None):
        raise ValueError("give exactly one of percentile or threshold")
    out = depth.copy()
    valid = depth > 0
    if percentile is not None:
        if not 0.0 <= percentile < 100.0:
            raise ValueError("percentile must be in [0, 100)")
        flat_idx = np.flatnonzero(valid)
        k = int(math.ceil(percentile / 100.0 * flat_idx.size - 1e-9))
        drop = flat_idx[removal_order(conf.ravel()[flat_idx])[:k]]
        out.ravel()[drop] = 0
    else:
        if not threshold >= 1.0:
            raise ValueError("threshold must be >= 1")
        out[valid & (conf > threshold)] = 0
    return out


def removal_count(percent: float, n: int) -> int:
    return min(n, int(math.ceil(percent / 100.0 * n - 1e-9)))


def rmse_at_removal(errors, conf, percent: float) -> float:
    """RMSE of the pixels left after removing ``percent`` % with the largest sigma."""
    errors = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    k = removal_count(percent, errors.size)
    if k >= errors.size:
        raise ValueError("removal leaves no pixels")
    kept = errors[removal_order(conf)[k:]]
    return float(np.sqrt(np.mean(kept * kept)))


def removal_for_target_rmse(errors, conf, target: float) -> tuple[int, float]:
    """Fewest pixels to drop, in sigma order, so the retained RMSE is <= ``target``.

    Returns ``(count, percent)``; ``count`` is ``None`` when no prefix reaches
    the target short of removing everything.
    """
    errors = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    rm = _retained_rmse(errors[removal_order(conf)])
    ok = np.flatnonzero(rm <= target)
    if ok.size == 0:
        return None, float("nan")
    k = int(ok[0])
    return k, 100.0 * k / errors.size


# --------------------------------------------------------------------------
# confidence providers and dataset evaluation

Provider = Callable[[int, DepthFrame], np.ndarray]


def proxy_provider(reducer: str = "min", window: int = 9, exclude_center: bool = False) -> Provider:
    """``|d - d*| + 1`` with patch proxy labels (the handcrafted baseline)."""

    def run(_i, frame):
        proxy = compute_proxy_labels(frame.depth, window, reducer, exclude_center)
        return abs_diff_confidence(frame.depth, proxy)

    return run


def oracle_provider() -> Provider:
    """Sigma equal to the true error: reproduces the optimal curve."""

    def run(_i, frame):
        return np.abs(frame.depth - frame.reference)

    return run


def random_provider(seed: int = 0) -> Provider:
    def run(i, frame):
        return np.random.default_rng([seed, i]).random(frame.depth.shape)

    return run


def model_provider(params) -> Provider:
    from .model import predict_sigma

    def run(_i, frame):
        return predict_sigma(params, frame.image, frame.depth)

    return run


@dataclass
class MethodResult:
    name: str
    frame_auc: list[float]
    mean_auc: float
    pooled_auc: float
    mean_curve: np.ndarray
    rmse_at_percent: float = float("nan")
    percent_for_target: float = float("nan")
    unreached_target: int = 0
    filtering: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    frames: list[str]
    optimal: MethodResult
    methods: dict[str, MethodResult]
    skipped: list[str] = field(default_factory=list)
    degenerate: list[str] = field(default_factory=list)
    removal_percent: float | None = None
    target_rmse: float | None = None
    pooled: bool = False
    filter_percentile: float | None = None

    def auc_of(self, name: str) -> float:
        r = self.optimal if name == "optimal" else self.methods[name]
        return r.pooled_auc if self.pooled else r.mean_auc

    def rows(self) -> list[dict]:
        out = []
        for r in [*self.methods.values(), self.optimal]:
            out.append({
                "method": r.name,
                "mean_auc": r.mean_auc,
                "pooled_auc": r.pooled_auc,
                "rmse_at_percent": r.rmse_at_percent,
                "percent_for_target": r.percent_for_target,
                "frames": len(r.frame_auc),
                **{k: r.filtering.get(k, float("nan")) for k in _FILTER_KEYS},
            })
        return out


_FILTER_KEYS = ("removed_percent", "rmse_before", "rmse_after", "mae_before", "mae_after")


def _result(name, curves, pooled_err, pooled_conf, order) -> MethodResult:
    aucs = [auc(c) for c in curves]
    pooled_curve = sparsification_curve(pooled_err, pooled_conf, order)
    res = MethodResult(
        name=name,
        frame_auc=aucs,
        mean_auc=float(np.mean(aucs)),
        pooled_auc=auc(pooled_curve),
        mean_curve=np.mean([c.rmse for c in curves], axis=0),
    )
    return res


def _frame_inputs(i, frame, methods):
    if frame.reference is None:
        return None, "no reference depth"
    mask = (frame.depth > 0) & (frame.reference > 0)
    if not mask.any():
        return None, "no pixel with both depth and reference"
    err = np.abs(frame.depth - frame.reference)[mask]
    confs = {}
    for m, provider in methods.items():
        c = np.asarray(provider(i, frame), dtype=np.float64)
        if c.shape != frame.depth.shape:
            raise ValueError(f"method {m!r} returned shape {c.shape} for frame {frame.name!r}")
        confs[m] = c
    return (err, mask, confs), ""


def evaluate_methods(
    dataset: Sequence[DepthFrame],
    methods: Mapping[str, Provider],
    removal_percent: float | None = None,
    target_rmse: float | None = None,
    pooled: bool = False,
    filter_percentile: float | None = None,
    workers: int = 1,
) -> EvalReport:
    """Sparsification AUCs for each method plus the optimal ordering.

    ``removal_percent`` adds the mean per-frame RMSE after dropping that share of
    pixels; ``target_rmse`` adds the mean per-frame percentage needed to reach it.
    ``filter_percentile`` adds pooled RMSE/MAE before and after percentile
    filtering with each method. ``pooled`` selects which AUC
    :meth:`EvalReport.auc_of` reports. Frames are processed by ``workers``
    threads and collected in dataset order.
    """
    jobs = list(enumerate(dataset))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(lambda job: _frame_inputs(*job, methods), jobs))
    else:
        outs = [_frame_inputs(i, f, methods) for i, f in jobs]

    names, skipped, degenerate = [], [], []
    per_frame = []  # (errors, {method: conf on evaluated pixels})
    filt = {m: ([], []) for m in methods}
    n_valid = 0
    n_removed = {m: 0 for m in methods}
    for (i, frame), (out, why) in zip(jobs, outs):
        name = frame.name or str(i)
        if out is None:
            log.warning("frame %r skipped: %s", name, why)
            skipped.append(name)
            continue
        err, mask, confs = out
        names.append(name)
        if err.size < MIN_PIXELS:
            degenerate.append(name)
        per_frame.append((err, {m: c[mask] for m, c in confs.items()}))
        if filter_percentile is not None:
            n_valid += int((frame.depth > 0).sum())
            ref_ok = frame.reference > 0
            for m, c in confs.items():
                kept = filter_depth(frame.depth, c, percentile=filter_percentile)
                m1 = (kept > 0) & ref_ok
                filt[m][0].append((frame.depth - frame.reference)[mask])
                filt[m][1].append((kept - frame.reference)[m1])
                n_removed[m] += int(((frame.depth > 0) & ~(kept > 0)).sum())
    if not per_frame:
        raise ValueError("no evaluable frames")

    all_err = np.concatenate([e for e, _ in per_frame])

    def summarize(name, conf_of, order):
        curves, rm, pct, miss = [], [], [], 0
        for err, confs in per_frame:
            conf = conf_of(err, confs)
            curves.append(sparsification_curve(err, conf, order))
            key = err if conf is None else conf
            if removal_percent is not None:
                rm.append(rmse_at_removal(err, key, removal_percent))
            if target_rmse is not None:
                k, p = removal_for_target_rmse(err, key, target_rmse)
                if k is None:
                    miss += 1
                else:
                    pct.append(p)
        pooled_conf = None if order == "by_error" else np.concatenate([conf_of(e, c) for e, c in per_frame])
        res = _result(name, curves, all_err, pooled_conf, order)
        if rm:
            res.rmse_at_percent = float(np.mean(rm))
        if pct:
            res.percent_for_target = float(np.mean(pct))
        res.unreached_target = miss
        return res

    optimal = summarize("optimal", lambda e, c: None, "by_error")
    results = {m: summarize(m, lambda e, c, m=m: c[m], "by_confidence") for m in methods}
    if filter_percentile is not None:
        for m, (before, after) in filt.items():
            results[m].filtering = _filter_summary(before, after, n_removed[m], n_valid)
    return EvalReport(names, optimal, results, skipped, degenerate, removal_percent,
                      target_rmse, pooled, filter_percentile)


def _filter_summary(before, after, n_removed, n_valid) -> dict:
    b = np.concatenate(before)
    a = np.concatenate(after)
    return {
        "rmse_before": float(np.sqrt(np.mean(b * b))),
        "rmse_after": float(np.sqrt(np.mean(a * a))) if a.size else float("nan"),
        "mae_before": float(np.mean(np.abs(b))),
        "mae_after": float(np.mean(np.abs(a))) if a.size else float("nan"),
        "removed_percent": 100.0 * n_removed / max(n_valid, 1),
    }


def filtering_stats(dataset: Sequence[DepthFrame], provider: Provider, percentile=None, threshold=None) -> dict:
    """Pooled RMSE/MAE against the reference before and after filtering."""
    before, after, n_valid, n_removed = [], [], 0, 0
    for i, frame in enumerate(dataset):
        if frame.reference is None:
            continue
        filtered = filter_depth(frame.depth, provider(i, frame), percentile, threshold)
        ref_ok = frame.reference > 0
        before.append((frame.depth - frame.reference)[(frame.depth > 0) & ref_ok])
        after.append((filtered - frame.reference)[(filtered > 0) & ref_ok])
        n_valid += int((frame.depth > 0).sum())
        n_removed += int(((frame.depth > 0) & ~(filtered > 0)).sum())
    if not before:
        raise ValueError("no frame carries a reference depth")
    return _filter_summary(before, after, n_removed, n_valid)


# --------------------------------------------------------------------------
# output


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    rows = report.rows()
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_frames_csv(report: EvalReport, path: str | Path) -> None:
    cols = [*report.methods, "optimal"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", *cols])
        for j, name in enumerate(report.frames):
            vals = [report.methods[m].frame_auc[j] for m in report.methods]
            w.writerow([name, *(repr(v) for v in vals), repr(report.optimal.frame_auc[j])])


def write_curves_csv(report: EvalReport, path: str | Path) -> None:
    results = [*report.methods.values(), report.optimal]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fraction", *(r.name for r in results)])
        for i, x in enumerate(FRACTIONS):
            w.writerow([f"{x:.2f}", *(repr(float(r.mean_curve[i])) for r in results)])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def curves_svg(curves: Mapping[str, np.ndarray], width: int = 560, height: int = 360) -> str:
    """Standalone SVG line plot of sparsification curves."""
    ml, mr, mt, mb = 60, 140, 20, 45
    pw, ph = width - ml - mr, height - mt - mb
    ymax = max(float(np.max(c)) for c in curves.values()) or 1.0
    ymax *= 1.05

    def px(x, y):
        return ml + pw * x / FRACTIONS[-1], mt + ph * (1.0 - y / ymax)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in np.linspace(0, FRACTIONS[-1], 8):
        x, _ = px(t, 0)
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 15}" text-anchor="middle">{100 * t:.0f}</text>')
    for t in np.linspace(0, ymax, 5):
        _, y = px(0, t)
        out.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">removed pixels (%)</text>')
    out.append(f'<text transform="translate(14,{mt + ph / 2}) rotate(-90)" text-anchor="middle">RMSE (m)</text>')
    for k, (name, c) in enumerate(curves.items()):
        col = _PALETTE[k % len(_PALETTE)]
        pts = " ".join("%.1f,%.1f" % px(x, y) for x, y in zip(FRACTIONS, c))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        ly = mt + 14 + 16 * k
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" y2="{ly - 4}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 35}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_curves_svg(report: EvalReport, path: str | Path) -> None:
    curves = {r.name: r.mean_curve for r in [*report.methods.values(), report.optimal]}
    Path(path).write_text(curves_svg(curves))
