"""Command-line entry point: ``lidarconf {synth,train,eval,filter,ablate}``.

Exit codes: 0 success, 1 usage error, 2 input/output error, 3 numerical abort.
Every command writes a ``manifest.json`` next to its outputs recording the
argument vector, resolved configuration, seed, paths, version and wall time.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, depthio, evaluate as ev, model as mdl, scene
from .kvfile import KVError, parse_kv, read_kv, to_dict
from .loss import LOSS_KINDS
from .train import DESK_TRAIN, TrainConfig, TrainingDiverged, train

log = logging.getLogger("lidarconf")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

WINDOW_SWEEP = (5, 7, 9, 11, 13)
# rows coarsest-first: 1/32, then finer scales added one at a time, then all
SCALE_SWEEP = (
    ("1/32", (32,)),
    ("1/32+1/16", (32, 16)),
    ("1/32+...+1/8", (32, 16, 8)),
    ("1/32+...+1/4", (32, 16, 8, 4)),
    ("1/32+...+1/2", (32, 16, 8, 4, 2)),
    ("All", (32, 16, 8, 4, 2, 1)),
)
LOSS_SWEEP = LOSS_KINDS
PROXY_SWEEP = ("min", "avg")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers


def _load_dataset(path: str, kitti: bool) -> list[depthio.DepthFrame]:
    try:
        frames = depthio.load_kitti_selection(path) if kitti else scene.load_frames(path)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if not frames:
        raise InputError(f"no frames found in {path}")
    return frames


def _read_config(path: str | None, kind: str) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return to_dict(read_kv(path))
    except OSError as exc:
        raise InputError(f"cannot read {kind} config {path}: {exc}") from exc
    except KVError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _arch(args) -> mdl.ArchConfig:
    base = mdl.DESK_CONFIG if args.preset == "desk" else mdl.FULL_CONFIG
    kv = _read_config(args.arch, "architecture")
    if not kv:
        return base
    merged = to_dict(parse_kv(base.to_text()))
    merged.update(kv)
    try:
        return mdl.ArchConfig.from_mapping(merged)
    except (KVError, ValueError) as exc:
        raise InputError(f"{args.arch}: {exc}") from exc


def _train_config(args, frames) -> TrainConfig:
    base = DESK_TRAIN if args.preset == "desk" else TrainConfig()
    kv = _read_config(args.config, "training")
    try:
        cfg = TrainConfig.from_mapping(kv) if kv else base
    except (KVError, ValueError) as exc:
        raise InputError(f"{args.config}: {exc}") from exc
    over = {}
    for opt, key in (("loss", "loss_kind"), ("lr", "learning_rate"), ("epochs", "epochs"),
                     ("batch_size", "batch_size"), ("window", "window"), ("reducer", "reducer"),
                     ("proxy", "proxy_source"), ("clip_grad_norm", "clip_grad_norm"),
                     ("exclude_center", "exclude_center"), ("crop_rejection", "crop_rejection")):
        v = getattr(args, opt, None)
        if v is not None:
            over[key] = v
    if getattr(args, "crop", None) is not None:
        over["crop"] = tuple(args.crop)
    elif not kv:
        # default crop: the whole frame when it is smaller than the preset crop
        H, W = frames[0].shape
        over["crop"] = (min(cfg.crop[0], H), min(cfg.crop[1], W))
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = dataclasses.replace(cfg, **over)
    for f in frames:
        if cfg.crop[0] > f.shape[0] or cfg.crop[1] > f.shape[1]:
            raise UsageError(f"crop {cfg.crop} does not fit frame {f.name!r} of size {f.shape}")
    return cfg


def _write_manifest(out_dir: Path, command: str, argv, config: dict, seed, inputs, outputs, t0):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _model_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "model.bin"
    if not p.exists():
        raise InputError(f"model file not found: {p}")
    return p


def _load_model(path: str) -> mdl.ModelParams:
    p = _model_path(path)
    try:
        return mdl.load_params(p)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, argv, t0) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        spec = scene.read_scene_spec(args.spec) if args.spec else scene.packaged_spec(args.scene)
    except FileNotFoundError as exc:
        raise InputError(f"scene spec not found: {exc.filename}") from exc
    except (KVError, ValueError) as exc:
        raise InputError(f"invalid scene spec: {exc}") from exc
    if args.offset is not None:
        spec = spec.with_offset(args.offset)
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args.out)
    (out / "scene.txt").write_text(scene.format_scene_spec(spec))
    width = max(6, len(str(args.count - 1)))
    outputs = []

    def one(i):
        frame = scene.synth_scene(spec, seed + i)
        return scene.write_frame(frame, out / f"frame_{i:0{width}d}")

    outputs = _map(one, range(args.count), args.threads)
    log.info("wrote %d frames to %s", len(outputs), out)
    _write_manifest(out, "synth", argv, {"scene": scene.format_scene_spec(spec), "count": args.count},
                    seed, [args.spec or f"packaged:{args.scene}"], [out / "scene.txt", *outputs], t0)
    return EXIT_OK


def _map(fn, items, threads):
    items = list(items)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _run_training(frames, arch, cfg, threads, log_every=50):
    def progress(rec):
        if rec.step % log_every == 0:
            log.info("step %d epoch %d loss %.5f valid %d |g| %.3g", rec.step, rec.epoch, rec.loss,
                     rec.valid_px, rec.grad_norm)

    return train(frames, arch, cfg, workers=threads, on_step=progress)


def cmd_train(args, argv, t0) -> int:
    frames = _load_dataset(args.data, args.kitti)
    arch = _arch(args)
    cfg = _train_config(args, frames)
    out = _out_dir(args.out)
    (out / "arch.cfg").write_text(arch.to_text())
    (out / "train.cfg").write_text(cfg.to_text())
    config = {"arch": arch.to_text(), "train": cfg.to_text()}
    try:
        params, tlog = _run_training(frames, arch, cfg, args.threads)
    except TrainingDiverged as exc:
        mdl.save_params(exc.params, out / "last_good.bin")
        exc.log.write_csv(out / "train_log.csv")
        log.error("%s; last finite parameters saved to %s", exc, out / "last_good.bin")
        _write_manifest(out, "train", argv, config | {"status": "diverged"}, cfg.seed, [args.data],
                        [out / "last_good.bin", out / "train_log.csv"], t0)
        return EXIT_NUMERIC
    mdl.save_params(params, out / "model.bin")
    tlog.write_csv(out / "train_log.csv")
    log.info("trained %d steps in %.1f s; epoch losses %s", len(tlog.steps), tlog.wall_time,
             ", ".join(f"{x:.4f}" for x in tlog.epoch_loss))
    _write_manifest(out, "train", argv, config, cfg.seed, [args.data],
                    [out / "model.bin", out / "train_log.csv", out / "arch.cfg", out / "train.cfg"], t0)
    return EXIT_OK


def _methods(args):
    methods = {}
    inputs = []
    for path in args.model or []:
        params = _load_model(path)
        p = _model_path(path)
        name = p.parent.name if p.name == "model.bin" else p.stem
        methods[name or "model"] = ev.model_provider(params)
        inputs.append(p)
    for red in args.baseline or []:
        methods[f"absdiff_{red}"] = ev.proxy_provider(red, args.window, args.exclude_center)
    if args.oracle:
        methods["oracle"] = ev.oracle_provider()
    if args.random:
        methods["random"] = ev.random_provider(0 if args.seed is None else args.seed)
    if not methods:
        raise UsageError("give at least one of --model, --baseline, --oracle, --random")
    return methods, inputs


def _write_eval(report, out: Path) -> list[Path]:
    files = [out / "report.csv", out / "frames.csv", out / "curves.csv", out / "curves.svg"]
    ev.write_report_csv(report, files[0])
    ev.write_frames_csv(report, files[1])
    ev.write_curves_csv(report, files[2])
    ev.write_curves_svg(report, files[3])
    return files


def cmd_eval(args, argv, t0) -> int:
    frames = _load_dataset(args.data, args.kitti)
    methods, inputs = _methods(args)
    out = _out_dir(args.out)
    report = ev.evaluate_methods(frames, methods, args.removal_percent, args.target_rmse,
                                 args.pooled, args.filter_percentile, workers=args.threads)
    files = _write_eval(report, out)
    for name in [*report.methods, "optimal"]:
        log.info("%-16s AUC %.4f", name, report.auc_of(name))
    if report.skipped:
        log.warning("%d frame(s) skipped for lack of reference depth", len(report.skipped))
    config = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(out, "eval", argv, config, args.seed, [args.data, *inputs], files, t0)
    return EXIT_OK


def cmd_filter(args, argv, t0) -> int:
    if (args.percentile is None) == (args.threshold is None):
        raise UsageError("give exactly one of --percentile or --threshold")
    params = _load_model(args.model)
    try:
        rgb = depthio.read_rgb(args.rgb)
        depth = depthio.read_depth(args.depth)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if rgb.shape[:2] != depth.shape:
        raise InputError(f"image {rgb.shape[:2]} and depth {depth.shape} rasters differ")
    try:
        sigma = mdl.predict_sigma(params, rgb, depth)
        filtered = ev.filter_depth(depth, sigma, args.percentile, args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args.out)
    suffix = Path(args.depth).suffix.lower() if Path(args.depth).suffix.lower() == ".png" else ".raw"
    depth_out = out / f"filtered_depth{suffix}"
    depthio.write_depth(filtered, depth_out)
    depthio.write_confidence_raster(sigma, out / "confidence.raw")
    n_valid = int((depth > 0).sum())
    removed = n_valid - int((filtered > 0).sum())
    log.info("removed %d of %d points (%.2f%%)", removed, n_valid, 100.0 * removed / max(n_valid, 1))
    config = {k: v for k, v in vars(args).items() if k != "func"}
    config["removed"] = removed
    _write_manifest(out, "filter", argv, config, args.seed, [args.rgb, args.depth, _model_path(args.model)],
                    [depth_out, out / "confidence.raw"], t0)
    return EXIT_OK


def _sweep_points(name: str, cfg: TrainConfig, arch: mdl.ArchConfig):
    if name == "window":
        return [(f"{n}x{n}", arch, dataclasses.replace(cfg, window=n)) for n in WINDOW_SWEEP]
    if name == "scales":
        return [(label, dataclasses.replace(arch, scale_subset=sub), cfg) for label, sub in SCALE_SWEEP]
    if name == "loss":
        return [(k, arch, dataclasses.replace(cfg, loss_kind=k)) for k in LOSS_SWEEP]
    if name == "proxy":
        return [(r, arch, dataclasses.replace(cfg, reducer=r)) for r in PROXY_SWEEP]
    raise UsageError(f"unknown sweep {name!r}; expected window, scales, loss or proxy")


def cmd_ablate(args, argv, t0) -> int:
    frames = _load_dataset(args.data, args.kitti)
    test = _load_dataset(args.eval_data, args.kitti) if args.eval_data else frames
    arch = _arch(args)
    cfg = _train_config(args, frames)
    points = _sweep_points(args.sweep, cfg, arch)
    out = _out_dir(args.out)
    rows = []
    for label, arch_i, cfg_i in points:
        log.info("sweep %s = %s", args.sweep, label)
        try:
            params, tlog = _run_training(frames, arch_i, cfg_i, args.threads)
        except TrainingDiverged as exc:
            log.warning("%s diverged: %s", label, exc)
            rows.append({"setting": label, "auc": float("nan"), "status": "diverged",
                         "steps": len(exc.log.steps), "final_loss": float("nan")})
            continue
        report = ev.evaluate_methods(test, {"model": ev.model_provider(params)}, workers=args.threads)
        rows.append({"setting": label, "auc": report.auc_of("model"), "status": "ok",
                     "steps": len(tlog.steps), "final_loss": tlog.epoch_loss[-1]})
    table = out / "ablation.csv"
    with open(table, "w") as f:
        f.write("setting,auc,status,steps,final_loss\n")
        for r in rows:
            f.write(f"{r['setting']},{r['auc']!r},{r['status']},{r['steps']},{r['final_loss']!r}\n")
    md = out / "ablation.md"
    header = {"window": "Window size", "scales": "Sampled features", "loss": "Loss", "proxy": "Proxy"}[args.sweep]
    lines = [f"| {header} | AUC |", "|---|---|"]
    lines += [f"| {r['setting']} | {'diverged' if r['status'] != 'ok' else format(r['auc'], '.4f')} |"
              for r in rows]
    md.write_text("\n".join(lines) + "\n")
    print(md.read_text(), end="")
    config = {"sweep": args.sweep, "arch": arch.to_text(), "train": cfg.to_text()}
    _write_manifest(out, "ablate", argv, config, cfg.seed, [args.data, args.eval_data or args.data],
                    [table, md], t0)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_train_options(p):
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="architecture and training defaults (default: desk)")
    p.add_argument("--arch", metavar="CFG", help="architecture key-value file, overrides the preset")
    p.add_argument("--config", metavar="CFG", help="training key-value file, replaces the preset")
    p.add_argument("--loss", type=_loss_kind, help=f"one of {', '.join(LOSS_KINDS)} (hyphens accepted)")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--reducer", choices=("min", "avg"))
    p.add_argument("--proxy", choices=("patch", "external"))
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--clip-grad-norm", type=float)
    p.add_argument("--exclude-center", action="store_true", default=None,
                   help="leave each pixel out of its own proxy window")
    p.add_argument("--crop-rejection", type=int, metavar="N",
                   help="redraw a crop up to N times while it has no valid depth")
    p.add_argument("--kitti", action="store_true", help="data directory uses the KITTI depth-selection layout")


def _loss_kind(text: str) -> str:
    k = text.replace("-", "_").lower()
    if k not in LOSS_KINDS:
        raise argparse.ArgumentTypeError(f"unknown loss {text!r}")
    return k


def build_parser() -> argparse.ArgumentParser:
    # global options are accepted before or after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="run seed (overrides config files)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (default 1); results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = _Parser(prog="lidarconf", description="Unsupervised confidence for LiDAR depth maps.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"lidarconf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    s = sub.add_parser("synth", help="render a synthetic dataset")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--spec", help="scene spec file")
    g.add_argument("--scene", default="desk", help="packaged scene name (desk, two_plane)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--offset", type=float, nargs=3, metavar=("X", "Y", "Z"),
                   help="override the LiDAR offset from the camera (meters)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a confidence model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    _add_train_options(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="sparsification AUC of models and baselines")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--model", action="append", help="model file or training output directory")
    e.add_argument("--baseline", action="append", choices=("min", "avg"))
    e.add_argument("--window", type=int, default=9, help="baseline window (default 9)")
    e.add_argument("--exclude-center", action="store_true", help="baseline proxies leave the pixel out")
    e.add_argument("--oracle", action="store_true", help="include sigma = true error")
    e.add_argument("--random", action="store_true", help="include random confidence")
    e.add_argument("--pooled", action="store_true", help="report pooled instead of per-frame mean AUC")
    e.add_argument("--removal-percent", type=float)
    e.add_argument("--target-rmse", type=float)
    e.add_argument("--filter-percentile", type=float)
    e.add_argument("--kitti", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("filter", help="drop low-confidence points from one depth map")
    f.add_argument("--rgb", required=True)
    f.add_argument("--depth", required=True, help=".png (16-bit, /256) or .raw float raster")
    f.add_argument("--model", required=True)
    f.add_argument("--percentile", type=float)
    f.add_argument("--threshold", type=float)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter)

    a = sub.add_parser("ablate", help="train and evaluate one model per sweep point")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", help="evaluation set (default: the training set)")
    a.add_argument("--sweep", required=True, help="window, scales, loss or proxy")
    a.add_argument("--out", required=True)
    _add_train_options(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for name, default in (("seed", None), ("threads", 1), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        # numerical kernels run single-threaded; parallelism is over frames or batch members
        with threadpool_limits(limits=1):
            return args.func(args, argv, t0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
