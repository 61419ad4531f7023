"""Filter a depth map by confidence and measure what was removed.

Uses the handcrafted ``|d - d*_min| + 1`` score by default. Pass ``--model``
to use a checkpoint from ``lidarconf train`` instead.

    python3 demos/filter_outliers.py --frames 10 --percentile 5
"""
import argparse

import numpy as np

from lidarconf import evaluate as ev
from lidarconf import model, scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--percentile", type=float, default=5.0)
    ap.add_argument("--threshold", type=float, default=None,
                    help="sigma bound; replaces --percentile when given")
    ap.add_argument("--model", default=None)
    args = ap.parse_args()

    spec = scene.packaged_spec("desk")
    frames = [scene.synth_scene(spec, 500 + s).to_depth_frame() for s in range(args.frames)]
    provider = (ev.model_provider(model.load_params(args.model)) if args.model
                else ev.proxy_provider("min", 9))
    mode = ({"threshold": args.threshold} if args.threshold is not None
            else {"percentile": args.percentile})

    caught = missed = wrongly = 0
    for i, f in enumerate(frames):
        kept = ev.filter_depth(f.depth, provider(i, f), **mode)
        removed = (f.depth > 0) & (kept == 0)
        caught += int((removed & f.outliers).sum())
        missed += int((~removed & f.outliers).sum())
        wrongly += int((removed & ~f.outliers).sum())

    stats = ev.filtering_stats(frames, provider, **mode)
    print(f"filtering with {mode}")
    print(f"removed {stats['removed_percent']:.2f}% of points")
    print(f"outliers caught {caught}, missed {missed}; correct points removed {wrongly}")
    print(f"RMSE {stats['rmse_before']:.3f} -> {stats['rmse_after']:.3f} m, "
          f"MAE {stats['mae_before']:.3f} -> {stats['mae_after']:.3f} m")
    oracle = ev.filtering_stats(frames, ev.oracle_provider(), **mode)
    print(f"(oracle confidence at the same setting: RMSE {oracle['rmse_after']:.3f} m)")
    print(f"oracle outlier rate: {100 * np.mean([f.outliers[f.depth > 0].mean() for f in frames]):.2f}%")


if __name__ == "__main__":
    main()
