"""Depth containers, proxy labels, the abs-diff baseline and file formats.

All binary formats are little-endian; layouts are documented in
``docs/formats.md``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .geometry import CameraModel, PointCloud, RigidPose, check_depthmap, check_rotation

Reducer = Literal["min", "avg"]


@dataclass
class DepthFrame:
    """One RGB + sparse depth sample, optionally with a reference depth."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), 0 = invalid
    reference: np.ndarray | None = None
    outliers: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.depth = check_depthmap(self.depth)
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != self.depth.shape + (3,):
            raise ValueError(
                f"image {self.image.shape} does not match depth raster {self.depth.shape}"
            )
        if self.reference is not None:
            self.reference = np.asarray(self.reference, dtype=np.float64)
            if self.reference.shape != self.depth.shape:
                raise ValueError("reference depth raster size mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


# --------------------------------------------------------------------------
# proxy labels and baseline confidence


def compute_proxy_labels(
    depth: np.ndarray, n: int = 9, reducer: Reducer = "min", exclude_center: bool = False
) -> np.ndarray:
    """Plausible depth for every valid pixel from the valid depths around it.

    The ``n x n`` window is clipped at the image border, so only real
    measurements enter the reducer. With ``exclude_center`` the pixel's own
    value is left out, falling back to it when it has no valid neighbour.
    Invalid pixels get 0.
    """
    if n % 2 == 0:
        raise ValueError("window must be odd")
    if n < 3:
        raise ValueError("window must be at least 3")
    if reducer not in ("min", "avg"):
        raise ValueError(f"unknown reducer {reducer!r}")
    depth = check_depthmap(depth)
    valid = depth > 0
    if not valid.any():
        raise ValueError("depth map has no valid pixels")
    H, W = depth.shape
    r = n // 2

    if reducer == "min":
        src = np.where(valid, depth, np.inf)
        padded = np.pad(src, r, constant_values=np.inf)
        acc = np.full((H, W), np.inf)
        for dy in range(n):
            for dx in range(n):
                if exclude_center and dy == r and dx == r:
                    continue
                np.minimum(acc, padded[dy : dy + H, dx : dx + W], out=acc)
        found = np.isfinite(acc)
    else:
        src = np.where(valid, depth, 0.0)
        padded = np.pad(src, r)
        pvalid = np.pad(valid, r).astype(np.float64)
        acc = np.zeros((H, W))
        cnt = np.zeros((H, W))
        for dy in range(n):
            for dx in range(n):
                if exclude_center and dy == r and dx == r:
                    continue
                acc += padded[dy : dy + H, dx : dx + W]
                cnt += pvalid[dy : dy + H, dx : dx + W]
        found = cnt > 0
        acc = np.divide(acc, cnt, out=np.zeros_like(acc), where=found)

    proxy = np.where(found, acc, depth)
    return np.where(valid, proxy, 0.0)


def abs_diff_confidence(depth: np.ndarray, proxy: np.ndarray) -> np.ndarray:
    """``|d - d*| + 1`` on valid pixels, 0 elsewhere."""
    depth = np.asarray(depth, dtype=np.float64)
    proxy = np.asarray(proxy, dtype=np.float64)
    if depth.shape != proxy.shape:
        raise ValueError(f"raster size mismatch: {depth.shape} vs {proxy.shape}")
    valid = depth > 0
    return np.where(valid, np.abs(depth - proxy) + 1.0, 0.0)


# --------------------------------------------------------------------------
# KITTI Velodyne scans


def read_velodyne_bin(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        offset = len(raw) - len(raw) % 16
        raise ValueError(f"{path}: truncated point record at byte offset {offset}")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def write_velodyne_bin(cloud: PointCloud, path: str | Path) -> None:
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    Path(path).write_bytes(rec.tobytes())


# --------------------------------------------------------------------------
# 16-bit depth PNG (KITTI depth completion devkit convention)

_PNG16_MODES = ("I;16", "I;16L", "I;16B")


def read_depth_png16(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in _PNG16_MODES:
            raise ValueError(f"{path}: expected a single-channel 16-bit image, got mode {im.mode}")
        raw = np.array(im, dtype=np.uint16)
    return raw.astype(np.float64) / 256.0


def write_depth_png16(depth: np.ndarray, path: str | Path) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    raw = np.clip(np.rint(depth * 256.0), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


# --------------------------------------------------------------------------
# KITTI calibration text

_PROJ_KEYS = ("P2", "P_rect_02")
_TR_KEYS = ("Tr", "Tr_velo_to_cam", "Tr_velo_cam")
# KITTI prints extrinsics with ~7 significant digits; larger deviations are errors
CALIB_ORTHO_TOL = 1e-4


def _parse_calib_text(text: str) -> dict[str, np.ndarray]:
    out = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, value = line.split(":", 1)
        try:
            out[key.strip()] = np.array([float(v) for v in value.split()])
        except ValueError:
            continue  # non-numeric entries such as calib_time
    return out


def read_calib(path: str | Path, width: int = 1242, height: int = 375) -> tuple[CameraModel, RigidPose]:
    """Camera intrinsics from ``P2`` and LiDAR-to-camera pose from ``Tr``.

    Also accepts the raw-recording layout with separate ``R:`` and ``T:``
    rows. KITTI files carry no raster size, hence the explicit arguments.
    Rotations within ``CALIB_ORTHO_TOL`` of orthonormal are snapped to the
    nearest rotation.
    """
    rows = _parse_calib_text(Path(path).read_text())
    proj = next((rows[k] for k in _PROJ_KEYS if k in rows), None)
    if proj is None:
        raise ValueError(f"{path}: missing projection matrix row (one of {', '.join(_PROJ_KEYS)})")
    if proj.size != 12:
        raise ValueError(f"{path}: projection row has {proj.size} values, expected 12")
    P = proj.reshape(3, 4)
    camera = CameraModel(P[0, 0], P[1, 1], P[0, 2], P[1, 2], width, height)

    tr = next((rows[k] for k in _TR_KEYS if k in rows), None)
    if tr is not None:
        if tr.size != 12:
            raise ValueError(f"{path}: transform row has {tr.size} values, expected 12")
        T = tr.reshape(3, 4)
        R, t = T[:, :3], T[:, 3]
    elif "R" in rows and "T" in rows:
        R, t = rows["R"].reshape(3, 3), rows["T"].reshape(3)
    else:
        raise ValueError(f"{path}: missing LiDAR-to-camera row (one of {', '.join(_TR_KEYS)})")
    try:
        check_rotation(R, CALIB_ORTHO_TOL)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    U, _, Vt = np.linalg.svd(R)
    return camera, RigidPose(U @ Vt, t)


# --------------------------------------------------------------------------
# float32 raw rasters: u32 width, u32 height, then float32 row-major


def write_float_raster(data: np.ndarray, path: str | Path) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("raster must be 2-D")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_float_raster(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: file too short for raster header")
    w, h = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * w * h:
        raise ValueError(
            f"{path}: header says {w}x{h} ({8 + 4 * w * h} bytes) but file has {len(raw)} bytes"
        )
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)


write_confidence_raster = write_float_raster
read_confidence_raster = read_float_raster


# --------------------------------------------------------------------------
# binary PPM / PBM


def _read_netpbm_header(raw: bytes, magic: bytes, n_fields: int) -> tuple[list[int], int]:
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < n_fields:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while raw[end : end + 1].isdigit():
            end += 1
        if end == pos:
            raise ValueError("malformed header")
        fields.append(int(raw[pos:end]))
        pos = end
    return fields, pos + 1  # single whitespace byte before the data


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h, maxval), off = _read_netpbm_header(raw, b"P6", 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    if len(raw) - off != w * h * 3:
        raise ValueError(f"{path}: pixel data size mismatch")
    data = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def write_pbm(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)  # rows padded to whole bytes, MSB first
    with open(path, "wb") as f:
        f.write(f"P4\n{w} {h}\n".encode())
        f.write(packed.tobytes())


def read_pbm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h), off = _read_netpbm_header(raw, b"P4", 2)
    row_bytes = (w + 7) // 8
    if len(raw) - off != row_bytes * h:
        raise ValueError(f"{path}: bitmap data size mismatch")
    packed = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1)[:, :w].astype(bool)


# --------------------------------------------------------------------------
# generic loaders


def read_rgb(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_depth(path: str | Path) -> np.ndarray:
    """Depth from a 16-bit PNG or a float32 ``.raw`` raster, by extension."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_depth_png16(path)
    return read_float_raster(path)


def write_depth(depth: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_depth_png16(depth, path)
    else:
        write_float_raster(depth, path)


def load_kitti_selection(root: str | Path) -> list[DepthFrame]:
    """Frames from a KITTI depth-selection style tree.

    Expects ``image/``, ``velodyne_raw/`` and ``groundtruth_depth/`` whose file
    names differ only in that directory token.
    """
    root = Path(root)
    lidar_dir = root / "velodyne_raw"
    if not lidar_dir.is_dir():
        raise FileNotFoundError(f"{lidar_dir} not found")
    frames = []
    for lp in sorted(lidar_dir.glob("*.png")):
        ip = root / "image" / lp.name.replace("velodyne_raw", "image")
        gp = root / "groundtruth_depth" / lp.name.replace("velodyne_raw", "groundtruth_depth")
        if not ip.exists():
            raise FileNotFoundError(f"no image for {lp.name}: {ip}")
        ref = read_depth_png16(gp) if gp.exists() else None
        frames.append(DepthFrame(read_rgb(ip), read_depth_png16(lp), ref, name=lp.stem))
    return frames
