"""Train a confidence model on synthetic frames and compare it to baselines.

The defaults finish in about a minute. ``--frames 200 --epochs 3`` matches
the desk-scale acceptance setting.

    python3 demos/train_and_evaluate.py --frames 40 --epochs 2
"""
import argparse
import dataclasses
import time

from lidarconf import evaluate as ev
from lidarconf import model, scene
from lidarconf.train import DESK_TRAIN, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--test-frames", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--loss", default="gaussian_star")
    ap.add_argument("--window", type=int, default=9)
    args = ap.parse_args()

    spec = scene.packaged_spec("desk")
    train_set = [scene.synth_scene(spec, s).to_depth_frame() for s in range(args.frames)]
    test_set = [scene.synth_scene(spec, 10_000 + s).to_depth_frame() for s in range(args.test_frames)]

    cfg = dataclasses.replace(DESK_TRAIN, epochs=args.epochs, loss_kind=args.loss, window=args.window)
    t0 = time.perf_counter()
    params, log = train(train_set, model.DESK_CONFIG, cfg)
    print(f"trained {len(log.steps)} steps in {time.perf_counter() - t0:.1f} s "
          f"({params.count} parameters)")
    print("epoch losses:", " ".join(f"{x:.4f}" for x in log.epoch_loss))

    report = ev.evaluate_methods(test_set, {
        "learned": ev.model_provider(params),
        "|d-d*_min|": ev.proxy_provider("min", args.window),
        "|d-d*_avg|": ev.proxy_provider("avg", args.window),
        "random": ev.random_provider(0),
    }, removal_percent=5)
    print(f"\n{'method':<12} {'AUC':>8} {'RMSE@5%':>9}")
    for name in [*report.methods, "optimal"]:
        r = report.optimal if name == "optimal" else report.methods[name]
        print(f"{name:<12} {report.auc_of(name):8.4f} {r.rmse_at_percent:9.4f}")


if __name__ == "__main__":
    main()
