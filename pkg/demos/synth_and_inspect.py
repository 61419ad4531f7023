"""Render one desk frame and save what the sensors see.

Writes PNGs of the camera image, the projected LiDAR depth and the oracle
outlier mask drawn over the image, then prints where the outliers sit.

    python3 demos/synth_and_inspect.py --seed 3 --out /tmp/inspect
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from lidarconf import scene


def depth_to_rgb(depth, max_depth=30.0):
    """Near = bright yellow, far = dark purple, no return = black."""
    t = np.clip(depth / max_depth, 0, 1)
    rgb = np.stack([1 - 0.6 * t, 1 - 0.9 * t, 0.2 + 0.3 * t], axis=-1)
    rgb[depth <= 0] = 0
    return (rgb * 255).astype(np.uint8)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scene", default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="inspect_out")
    ap.add_argument("--zoom", type=int, default=4)
    args = ap.parse_args()

    frame = scene.synth_scene(scene.packaged_spec(args.scene), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def save(arr, name):
        img = Image.fromarray(arr)
        img = img.resize((img.width * args.zoom, img.height * args.zoom), Image.NEAREST)
        img.save(out / name)

    image = (frame.image * 255).astype(np.uint8)
    save(image, "image.png")
    save(depth_to_rgb(frame.projected_depth), "lidar_depth.png")
    overlay = image.copy()
    valid = frame.projected_depth > 0
    overlay[valid & ~frame.outlier_mask] = (40, 200, 40)
    overlay[frame.outlier_mask] = (230, 30, 30)
    save(overlay, "outliers.png")

    n_valid = int(valid.sum())
    n_out = int(frame.outlier_mask.sum())
    err = np.abs(frame.projected_depth - frame.true_cam_depth)[frame.outlier_mask]
    print(f"{len(frame.lidar_cloud)} LiDAR returns, {n_valid} projected pixels "
          f"({100 * n_valid / valid.size:.1f}% density)")
    print(f"{n_out} outliers ({100 * n_out / max(n_valid, 1):.1f}% of projected pixels)")
    if n_out:
        print(f"outlier depth error: median {np.median(err):.2f} m, max {err.max():.2f} m")
        cols = np.nonzero(frame.outlier_mask)[1]
        print(f"outlier columns span {cols.min()}..{cols.max()}")
    print(f"images written to {out}/")


if __name__ == "__main__":
    main()
