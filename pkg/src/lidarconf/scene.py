"""Synthetic camera + LiDAR scenes with exactly labelled occlusion outliers.

A scene is a handful of axis-aligned rectangles and boxes. The camera sits at
``camera_position`` with its axes aligned to the world axes (x right, y down,
z forward). The LiDAR sits at ``camera_position + lidar_offset`` and uses the
KITTI Velodyne axis convention (x forward, y left, z up); its returns are ray
cast on a regular elevation/azimuth grid and projected into the camera raster.

Scene spec files are ``key = value`` text (see ``docs/formats.md``)::

    width = 256
    height = 64
    fx = 200
    fy = 200
    cx = 127.5
    cy = 31.5
    lidar_offset = 0.5 0 0
    scanlines = 20
    elevation = -11 9
    azimuth = -38 38
    azimuth_step = 0.3
    noise_std = 0.01
    tau_outlier = 1.0
    surface = rect z 30  -40 40  -15 1.6  color 0.35 0.45 0.7  checker 2.0
    surface = box -1 1  -1 1.6  5 6  color 0.8 0.3 0.2
    random_boxes = 4

The reference depth stored for a valid pixel is ray cast from the camera
through the exact sub-pixel location of the LiDAR return kept there, so a
return the camera can see always agrees with its reference. Invalid pixels
carry the depth seen through the pixel center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import depthio
from .geometry import (
    CameraModel,
    PointCloud,
    RigidPose,
    outlier_oracle,
    project_points,
    transform_points,
)
from .kvfile import KVError, floats, format_kv, parse_kv

_EPS_T = 1e-9
_AXES = {"x": 0, "y": 1, "z": 2}

# LiDAR frame (x fwd, y left, z up) -> camera axes (x right, y down, z fwd)
LIDAR_AXES_TO_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle on the plane ``axis = position``.

    ``lo``/``hi`` bound the two remaining coordinates in increasing axis order
    (for ``axis='z'`` that is x then y).
    """

    axis: int
    position: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    checker: float = 0.0


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    checker: float = 0.0


@dataclass(frozen=True)
class RandomBoxes:
    count: int = 0
    depth: tuple[float, float] = (4.0, 20.0)
    width: tuple[float, float] = (0.4, 3.0)
    height: tuple[float, float] = (0.5, 2.5)
    ground: float | None = None  # boxes rest on y = ground when given


@dataclass(frozen=True)
class SceneSpec:
    camera: CameraModel
    surfaces: tuple = ()
    camera_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lidar_offset: tuple[float, float, float] = (0.5, 0.0, 0.0)
    scanlines: int = 20
    elevation: tuple[float, float] = (-11.0, 9.0)
    azimuth: tuple[float, float] = (-38.0, 38.0)
    azimuth_step: float = 0.3
    noise_std: float = 0.01
    tau_outlier: float = 1.0
    random: RandomBoxes = field(default_factory=RandomBoxes)
    sky_color: tuple[float, float, float] = (0.75, 0.85, 0.95)

    def with_offset(self, offset) -> "SceneSpec":
        return replace(self, lidar_offset=tuple(float(o) for o in offset))


@dataclass(frozen=True)
class SyntheticFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    lidar_cloud: PointCloud  # LiDAR frame
    lidar_to_cam: RigidPose
    camera: CameraModel
    projected_depth: np.ndarray
    true_cam_depth: np.ndarray
    outlier_mask: np.ndarray
    seed: int = 0
    tau_outlier: float = 1.0

    def to_depth_frame(self, name: str = "") -> depthio.DepthFrame:
        return depthio.DepthFrame(
            image=self.image,
            depth=self.projected_depth,
            reference=self.true_cam_depth,
            outliers=self.outlier_mask,
            name=name or f"seed{self.seed}",
        )


# --------------------------------------------------------------------------
# spec parsing


def parse_scene_spec(text: str) -> SceneSpec:
    vals: dict[str, str] = {}
    surfaces = []
    for key, value in parse_kv(text):
        if key == "surface":
            surfaces.append(_parse_surface(value))
        elif key in vals:
            raise KVError(f"duplicate key {key!r}")
        else:
            vals[key] = value

    def num(key, default=None):
        if key not in vals:
            if default is None:
                raise KVError(f"scene spec is missing {key!r}")
            return default
        return floats(vals.pop(key), 1)[0]

    def vec(key, n, default):
        return tuple(floats(vals.pop(key), n)) if key in vals else default

    width, height = int(num("width")), int(num("height"))
    camera = CameraModel(
        fx=num("fx"),
        fy=num("fy"),
        cx=num("cx", (width - 1) / 2.0),
        cy=num("cy", (height - 1) / 2.0),
        width=width,
        height=height,
    )
    rnd = RandomBoxes(
        count=int(num("random_boxes", 0)),
        depth=vec("random_depth", 2, RandomBoxes.depth),
        width=vec("random_width", 2, RandomBoxes.width),
        height=vec("random_height", 2, RandomBoxes.height),
        ground=num("random_ground") if "random_ground" in vals else None,
    )
    spec = SceneSpec(
        camera=camera,
        surfaces=tuple(surfaces),
        camera_position=vec("camera_position", 3, (0.0, 0.0, 0.0)),
        lidar_offset=vec("lidar_offset", 3, (0.5, 0.0, 0.0)),
        scanlines=int(num("scanlines", 20)),
        elevation=vec("elevation", 2, (-11.0, 9.0)),
        azimuth=vec("azimuth", 2, (-38.0, 38.0)),
        azimuth_step=num("azimuth_step", 0.3),
        noise_std=num("noise_std", 0.01),
        tau_outlier=num("tau_outlier", 1.0),
        random=rnd,
        sky_color=vec("sky_color", 3, (0.75, 0.85, 0.95)),
    )
    if vals:
        raise KVError(f"unknown scene spec keys: {sorted(vals)}")
    if spec.scanlines < 1 or spec.azimuth_step <= 0:
        raise KVError("scanlines must be >= 1 and azimuth_step > 0")
    if spec.noise_std < 0 or spec.tau_outlier <= 0:
        raise KVError("noise_std must be >= 0 and tau_outlier > 0")
    return spec


def read_scene_spec(path: str | Path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())


def _parse_surface(value: str):
    toks = value.split()
    if not toks:
        raise KVError("empty surface line")
    kind, rest = toks[0], toks[1:]
    color, checker = (0.5, 0.5, 0.5), 0.0
    geo = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if tok == "color":
            color = tuple(float(t) for t in rest[i + 1 : i + 4])
            if len(color) != 3:
                raise KVError(f"color needs 3 values in surface {value!r}")
            i += 4
        elif tok == "checker":
            checker = float(rest[i + 1])
            i += 2
        else:
            geo.append(tok)
            i += 1
    if kind == "rect":
        if len(geo) != 6 or geo[0] not in _AXES:
            raise KVError(f"rect needs: axis position a0 a1 b0 b1, got {value!r}")
        a0, a1, b0, b1 = (float(g) for g in geo[2:])
        return Rect(_AXES[geo[0]], float(geo[1]), (min(a0, a1), min(b0, b1)),
                    (max(a0, a1), max(b0, b1)), color, checker)
    if kind == "box":
        if len(geo) != 6:
            raise KVError(f"box needs: x0 x1 y0 y1 z0 z1, got {value!r}")
        g = [float(t) for t in geo]
        return Box((min(g[0], g[1]), min(g[2], g[3]), min(g[4], g[5])),
                   (max(g[0], g[1]), max(g[2], g[3]), max(g[4], g[5])), color, checker)
    raise KVError(f"unknown surface kind {kind!r}")


def format_scene_spec(spec: SceneSpec) -> str:
    cam = spec.camera
    items = [
        ("width", cam.width), ("height", cam.height), ("fx", float(cam.fx)),
        ("fy", float(cam.fy)), ("cx", float(cam.cx)), ("cy", float(cam.cy)),
        ("camera_position", list(spec.camera_position)),
        ("lidar_offset", list(spec.lidar_offset)),
        ("scanlines", spec.scanlines), ("elevation", list(spec.elevation)),
        ("azimuth", list(spec.azimuth)), ("azimuth_step", float(spec.azimuth_step)),
        ("noise_std", float(spec.noise_std)), ("tau_outlier", float(spec.tau_outlier)),
        ("sky_color", list(spec.sky_color)),
    ]
    r = spec.random
    if r.count:
        items += [("random_boxes", r.count), ("random_depth", list(r.depth)),
                  ("random_width", list(r.width)), ("random_height", list(r.height))]
        if r.ground is not None:
            items.append(("random_ground", float(r.ground)))
    for s in spec.surfaces:
        if isinstance(s, Rect):
            axis = "xyz"[s.axis]
            geo = [s.position, s.lo[0], s.hi[0], s.lo[1], s.hi[1]]
            line = f"rect {axis} " + " ".join(repr(float(g)) for g in geo)
        else:
            geo = [s.lo[0], s.hi[0], s.lo[1], s.hi[1], s.lo[2], s.hi[2]]
            line = "box " + " ".join(repr(float(g)) for g in geo)
        line += " color " + " ".join(repr(float(c)) for c in s.color)
        if s.checker:
            line += f" checker {float(s.checker)!r}"
        items.append(("surface", line))
    return format_kv(items)


def packaged_spec(name: str = "desk") -> SceneSpec:
    """Load one of the scene specs shipped in ``lidarconf/data``."""
    path = Path(__file__).parent / "data" / f"{name}.scene"
    return read_scene_spec(path)


# --------------------------------------------------------------------------
# ray casting


def _hit_rect(s: Rect, o: np.ndarray, d: np.ndarray):
    a = s.axis
    others = [i for i in range(3) if i != a]
    da = d[:, a]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (s.position - o[a]) / da
    p0 = o[others[0]] + t * d[:, others[0]]
    p1 = o[others[1]] + t * d[:, others[1]]
    ok = (da != 0) & (t > _EPS_T)
    ok &= (p0 >= s.lo[0]) & (p0 <= s.hi[0]) & (p1 >= s.lo[1]) & (p1 <= s.hi[1])
    t = np.where(ok, t, np.inf)
    return t, np.full(t.shape, a)


def _hit_box(s: Box, o: np.ndarray, d: np.ndarray):
    lo, hi = np.asarray(s.lo), np.asarray(s.hi)
    n = d.shape[0]
    t_near = np.full(n, -np.inf)
    t_far = np.full(n, np.inf)
    near_axis = np.zeros(n, dtype=np.int64)
    for a in range(3):
        da = d[:, a]
        par = da == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[a] - o[a]) / da
            t2 = (hi[a] - o[a]) / da
        tmin = np.where(par, -np.inf, np.minimum(t1, t2))
        tmax = np.where(par, np.inf, np.maximum(t1, t2))
        outside = par & ((o[a] < lo[a]) | (o[a] > hi[a]))
        tmin = np.where(outside, np.inf, tmin)
        tmax = np.where(outside, -np.inf, tmax)
        upd = tmin > t_near
        near_axis = np.where(upd, a, near_axis)
        t_near = np.maximum(t_near, tmin)
        t_far = np.minimum(t_far, tmax)
    hit = (t_near <= t_far) & (t_far > _EPS_T)
    t = np.where(t_near > _EPS_T, t_near, t_far)
    return np.where(hit, t, np.inf), near_axis


def raycast(surfaces, origin, directions):
    """Nearest hit along each ray.

    Returns ``(t, surface_index, face_axis)``; ``t`` is ``inf`` and the index
    -1 where nothing is hit. Points are ``origin + t * direction``.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    best = np.full(d.shape[0], np.inf)
    which = np.full(d.shape[0], -1, dtype=np.int64)
    axis = np.zeros(d.shape[0], dtype=np.int64)
    for k, s in enumerate(surfaces):
        t, ax = _hit_rect(s, o, d) if isinstance(s, Rect) else _hit_box(s, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, k, which)
        axis = np.where(closer, ax, axis)
    return best, which, axis


def _shade(surfaces, which, axis, points, sky):
    """Surface color modulated by an optional in-plane checker texture."""
    rgb = np.tile(np.asarray(sky, dtype=np.float64), (which.shape[0], 1))
    for k, s in enumerate(surfaces):
        sel = which == k
        if not np.any(sel):
            continue
        col = np.asarray(s.color, dtype=np.float64)
        shade = np.ones(int(sel.sum()))
        if s.checker > 0:
            p = points[sel]
            ax = axis[sel]
            # in-plane coordinates: the two axes other than the face normal
            c0 = np.where(ax == 0, p[:, 1], p[:, 0])
            c1 = np.where(ax == 2, p[:, 1], p[:, 2])
            parity = (np.floor(c0 / s.checker) + np.floor(c1 / s.checker)) % 2
            shade = 1.0 - 0.35 * parity
        rgb[sel] = np.clip(col[None, :] * shade[:, None], 0.0, 1.0)
    return rgb


def _random_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box]:
    r = spec.random
    cam = spec.camera
    out = []
    for _ in range(r.count):
        z0 = rng.uniform(*r.depth)
        w = rng.uniform(*r.width)
        h = rng.uniform(*r.height)
        thick = min(w, 1.0)
        # horizontal center anywhere the camera can see at this depth
        half_fov = (cam.width / 2.0) / cam.fx
        xc = spec.camera_position[0] + rng.uniform(-half_fov, half_fov) * z0
        if r.ground is not None:
            y1 = r.ground
        else:
            half_v = (cam.height / 2.0) / cam.fy
            y1 = spec.camera_position[1] + rng.uniform(-half_v, half_v) * z0 + h / 2
        zc = spec.camera_position[2] + z0
        color = tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))
        checker = float(rng.choice([0.0, 0.25, 0.5]))
        out.append(Box((xc - w / 2, y1 - h, zc), (xc + w / 2, y1, zc + thick), color, checker))
    return out


def lidar_directions(spec: SceneSpec) -> np.ndarray:
    """Unit ray directions in the LiDAR frame, scanline-major order."""
    elev = np.deg2rad(np.linspace(spec.elevation[0], spec.elevation[1], spec.scanlines))
    n_az = int(math.floor((spec.azimuth[1] - spec.azimuth[0]) / spec.azimuth_step + 1e-9)) + 1
    az = np.deg2rad(spec.azimuth[0] + spec.azimuth_step * np.arange(n_az))
    E, A = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
    return d.reshape(-1, 3)


def lidar_pose(spec: SceneSpec) -> RigidPose:
    return RigidPose(LIDAR_AXES_TO_CAMERA, np.asarray(spec.lidar_offset, dtype=np.float64))


def synth_scene(spec: SceneSpec, seed: int) -> SyntheticFrame:
    """Render one frame; bit-identical for equal ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    surfaces = list(spec.surfaces) + _random_boxes(spec, rng)
    if not surfaces:
        raise ValueError("no surfaces")
    cam = spec.camera
    H, W = cam.height, cam.width
    cpos = np.asarray(spec.camera_position, dtype=np.float64)

    # camera rays through pixel centers; direction z-component is 1 so t = depth
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dirs = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], -1)
    dirs = dirs.reshape(-1, 3)
    t_cam, which, axis = raycast(surfaces, cpos, dirs)
    hit_pts = cpos + np.where(np.isfinite(t_cam), t_cam, 0.0)[:, None] * dirs
    image = _shade(surfaces, which, axis, hit_pts, spec.sky_color).reshape(H, W, 3)
    true_depth = np.where(np.isfinite(t_cam), t_cam, 0.0).reshape(H, W)

    # LiDAR returns
    pose = lidar_pose(spec)
    d_lidar = lidar_directions(spec)
    d_world = d_lidar @ pose.rotation.T
    origin = cpos + pose.translation
    t_l, which_l, axis_l = raycast(surfaces, origin, d_world)
    hit = np.isfinite(t_l)
    rng_noise = rng.normal(0.0, 1.0, size=t_l.shape[0])
    r = t_l[hit] + spec.noise_std * rng_noise[hit]
    pts_l = d_lidar[hit] * r[:, None]
    world_hits = origin + t_l[hit][:, None] * d_world[hit]
    intensity = _shade(surfaces, which_l[hit], axis_l[hit], world_hits, spec.sky_color).mean(1)
    cloud = PointCloud(pts_l, intensity)

    cam_cloud = transform_points(cloud, pose)
    projected, winner = project_points(cam_cloud, cam, "keep_nearest")

    # reference through the exact sub-pixel location of each kept return
    valid = winner >= 0
    p = cam_cloud.points[winner[valid]]
    t_ref, _, _ = raycast(surfaces, cpos, p / p[:, 2:3])
    ref = true_depth.copy()
    ref[valid] = np.where(np.isfinite(t_ref), t_ref, 0.0)

    mask = outlier_oracle(projected, ref, spec.tau_outlier)
    return SyntheticFrame(
        image=image,
        lidar_cloud=cloud,
        lidar_to_cam=pose,
        camera=cam,
        projected_depth=projected,
        true_cam_depth=ref,
        outlier_mask=mask,
        seed=seed,
        tau_outlier=spec.tau_outlier,
    )


# --------------------------------------------------------------------------
# frame directories

FRAME_FILES = ("image.ppm", "depth_proj.raw", "depth_true.raw", "outliers.pbm", "meta.txt")


def write_frame(frame: SyntheticFrame, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depthio.write_ppm(frame.image, out / "image.ppm")
    depthio.write_float_raster(frame.projected_depth, out / "depth_proj.raw")
    depthio.write_float_raster(frame.true_cam_depth, out / "depth_true.raw")
    depthio.write_pbm(frame.outlier_mask, out / "outliers.pbm")
    cam, pose = frame.camera, frame.lidar_to_cam
    Rt = np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1)
    meta = [
        ("width", cam.width), ("height", cam.height),
        ("fx", float(cam.fx)), ("fy", float(cam.fy)),
        ("cx", float(cam.cx)), ("cy", float(cam.cy)),
        ("lidar_to_cam", [float(x) for x in Rt]),
        ("seed", frame.seed), ("tau_outlier", float(frame.tau_outlier)),
        ("lidar_points", len(frame.lidar_cloud)),
        ("valid_pixels", int((frame.projected_depth > 0).sum())),
        ("outlier_pixels", int(frame.outlier_mask.sum())),
    ]
    (out / "meta.txt").write_text(format_kv(meta))
    return out


def read_frame(frame_dir: str | Path) -> depthio.DepthFrame:
    d = Path(frame_dir)
    missing = [f for f in FRAME_FILES if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    return depthio.DepthFrame(
        image=depthio.read_ppm(d / "image.ppm"),
        depth=depthio.read_float_raster(d / "depth_proj.raw"),
        reference=depthio.read_float_raster(d / "depth_true.raw"),
        outliers=depthio.read_pbm(d / "outliers.pbm"),
        name=d.name,
    )


def list_frames(data_dir: str | Path) -> list[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.txt").exists())


def load_frames(data_dir: str | Path) -> list[depthio.DepthFrame]:
    return [read_frame(p) for p in list_frames(data_dir)]
