"""Analytic z-depth rendering of cylinder worlds from a yaw-only camera."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Vec3, World

# Per-pixel hit codes produced by render_hit_ids: obstacle index for
# cylinders, then the six box faces, then NO_HIT for rays clamped to
# max_range.
NO_HIT = -1
FACE_FLOOR, FACE_CEILING, FACE_XMIN, FACE_XMAX, FACE_YMIN, FACE_YMAX = range(6)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model with square pixels; vertical fov follows from aspect."""

    width: int = 64
    height: int = 48
    hfov: float = math.radians(87.0)
    max_range: float = 10.0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8 pixels")
        if not 0 < self.hfov < math.pi:
            raise ValueError("hfov must be in (0, pi)")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(self.hfov / 2.0)

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan((self.height / 2.0) / self.focal)


@dataclass(frozen=True)
class CameraPose:
    """Camera position plus yaw; the optical axis stays horizontal."""

    position: Vec3
    yaw: float = 0.0


@dataclass
class DepthImage:
    """Row-major grid of z-depth values in meters."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64
    max_range: float

    @classmethod
    def full(cls, intr: CameraIntrinsics, value: float) -> "DepthImage":
        return cls(
            width=intr.width,
            height=intr.height,
            data=np.full((intr.height, intr.width), value, dtype=np.float64),
            max_range=intr.max_range,
        )

    def copy(self) -> "DepthImage":
        return DepthImage(self.width, self.height, self.data.copy(), self.max_range)


def _rotation(yaw: float) -> np.ndarray:
    """Camera-to-world rotation: x right, y down, z forward (optical axis)."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [s, 0.0, c],
            [-c, 0.0, s],
            [0.0, -1.0, 0.0],
        ]
    )


def pixel_directions(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions, one per pixel, scaled so dir_z = 1.

    With this parameterization the ray parameter t equals z-depth directly.
    Shape (height, width, 3).
    """
    f = intr.focal
    u = (np.arange(intr.width) - intr.width / 2.0) / f
    v = (np.arange(intr.height) - intr.height / 2.0) / f
    xx, yy = np.meshgrid(u, v)
    return np.stack([xx, yy, np.ones_like(xx)], axis=-1)


def camera_to_world(pose: CameraPose, pts_cam: np.ndarray) -> np.ndarray:
    """Map camera-frame points (..., 3) into the world frame."""
    r = _rotation(pose.yaw)
    return pts_cam @ r.T + pose.position.as_array()


def world_to_camera(pose: CameraPose, pts_world: np.ndarray) -> np.ndarray:
    r = _rotation(pose.yaw)
    return (pts_world - pose.position.as_array()) @ r


def backproject(
    pixel_u: int, pixel_v: int, depth: float, intr: CameraIntrinsics
) -> Vec3:
    """Camera-frame point whose z-depth along the (u, v) ray equals depth."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    f = intr.focal
    return Vec3(
        (pixel_u - intr.width / 2.0) / f * depth,
        (pixel_v - intr.height / 2.0) / f * depth,
        depth,
    )


def backproject_grid(img: DepthImage, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project every pixel of a depth image; shape (H, W, 3), camera frame."""
    dirs = pixel_directions(intr)
    return dirs * img.data[:, :, None]


def _render(world: World, pose: CameraPose, intr: CameraIntrinsics):
    o = pose.position.as_array()
    dirs = (pixel_directions(intr).reshape(-1, 3)) @ _rotation(pose.yaw).T
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, NO_HIT, dtype=np.int64)
    forward = np.array([math.cos(pose.yaw), math.sin(pose.yaw), 0.0])

    def consider(t, valid, hit_id):
        better = valid & (t < best_t)
        best_t[better] = t[better]
        best_id[better] = hit_id

    # Cylinders: convex intersection of an infinite cylinder with the z slab
    # [0, height].  The near boundary of that intersection is the visible
    # surface (lateral wall or a cap disk).
    centers, radii, heights = world.obstacle_arrays()
    dz = dirs[:, 2]
    for i in range(len(world.obstacles)):
        cx, cy = centers[i]
        rad, h = radii[i], heights[i]
        rel = np.array([cx - o[0], cy - o[1], 0.0])
        dist = math.hypot(rel[0], rel[1])
        if dist - rad > intr.max_range * 2.0 or rel @ forward < -rad:
            continue
        ox, oy = o[0] - cx, o[1] - cy
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
        c = ox * ox + oy * oy - rad * rad
        disc = b * b - 4.0 * a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            t_lat_in = np.where(a > 0, (-b - sq) / (2.0 * a), -np.inf)
            t_lat_out = np.where(a > 0, (-b + sq) / (2.0 * a), np.inf)
            # Vertical ray inside/outside the circle.
            inside = c < 0
            t_lat_in = np.where((a > 0) | inside, t_lat_in, np.inf)
            t_lat_out = np.where((a > 0) | inside, t_lat_out, -np.inf)
            t_slab_in = np.where(dz != 0, (0.0 - o[2]) / dz, -np.inf)
            t_slab_out = np.where(dz != 0, (h - o[2]) / dz, np.inf)
            swap = t_slab_in > t_slab_out
            t_slab_in, t_slab_out = (
                np.where(swap, t_slab_out, t_slab_in),
                np.where(swap, t_slab_in, t_slab_out),
            )
            in_slab = (dz != 0) | ((0.0 <= o[2]) & (o[2] <= h))
            t_slab_in = np.where((dz != 0), t_slab_in, np.where(in_slab, -np.inf, np.inf))
            t_slab_out = np.where((dz != 0), t_slab_out, np.where(in_slab, np.inf, -np.inf))
        t_in = np.maximum(t_lat_in, t_slab_in)
        t_out = np.minimum(t_lat_out, t_slab_out)
        valid = (disc >= 0) & (t_in <= t_out) & (t_in > 1e-12)
        consider(t_in, valid, i)

    # Box faces as planes; for a camera inside the bounds the nearest
    # positive-t plane hit is the actual face.
    lo, hi = world.config.bounds_min, world.config.bounds_max
    planes = [
        (2, lo.z, FACE_FLOOR),
        (2, hi.z, FACE_CEILING),
        (0, lo.x, FACE_XMIN),
        (0, hi.x, FACE_XMAX),
        (1, lo.y, FACE_YMIN),
        (1, hi.y, FACE_YMAX),
    ]
    n_cyl = len(world.obstacles)
    for axis, level, face in planes:
        d = dirs[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (level - o[axis]) / d
        valid = (d != 0) & (t > 1e-12)
        consider(t, valid, n_cyl + face)

    depth = np.minimum(best_t, intr.max_range)
    best_id[best_t >= intr.max_range] = NO_HIT
    return (
        depth.reshape(intr.height, intr.width),
        best_id.reshape(intr.height, intr.width),
    )


def render_depth(world: World, pose: CameraPose, intr: CameraIntrinsics) -> DepthImage:
    """Cast one pinhole ray per pixel and record the nearest hit's z-depth.

    Depth is the hit distance projected onto the optical axis, clamped to
    max_range; pixels with no hit in range hold exactly max_range.
    """
    depth, _ = _render(world, pose, intr)
    return DepthImage(intr.width, intr.height, depth, intr.max_range)


def render_hit_ids(world: World, pose: CameraPose, intr: CameraIntrinsics):
    """Like render_depth but also returns which primitive each pixel hit.

    Returns (DepthImage, ids) where ids[v, u] is the obstacle index, or
    len(obstacles) + FACE_* for a box face, or NO_HIT past max_range.
    """
    depth, ids = _render(world, pose, intr)
    return DepthImage(intr.width, intr.height, depth, intr.max_range), ids


def save_depth_image(path, img: DepthImage, intr: CameraIntrinsics, pose: CameraPose):
    """Write PGM ASCII with millimeter-quantized depths plus a sidecar header.

    The sidecar (path + '.meta') records intrinsics and pose so the frame is
    self-describing.  Quantization is round-half-even to integers.
    """
    mm = np.rint(img.data * 1000.0).astype(np.int64)
    maxval = int(round(img.max_range * 1000.0))
    with open(path, "w") as f:
        f.write(f"P2\n{img.width} {img.height}\n{maxval}\n")
        for row in mm:
            f.write(" ".join(str(v) for v in row) + "\n")
    p = pose.position
    with open(str(path) + ".meta", "w") as f:
        f.write(
            f"width {intr.width}\nheight {intr.height}\n"
            f"hfov {float(intr.hfov)!r}\nmax_range {float(intr.max_range)!r}\n"
            f"pose {float(p.x)!r} {float(p.y)!r} {float(p.z)!r} "
            f"{float(pose.yaw)!r}\n"
        )


def load_depth_image(path):
    """Inverse of save_depth_image; returns (DepthImage, intrinsics, pose)."""
    with open(path) as f:
        tokens = f.read().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM file")
    width, height, _maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    mm = np.array(tokens[4 : 4 + width * height], dtype=np.int64)
    data = mm.reshape(height, width).astype(np.float64) / 1000.0
    meta = {}
    with open(str(path) + ".meta") as f:
        for line in f:
            key, *vals = line.split()
            meta[key] = vals
    intr = CameraIntrinsics(
        width=int(meta["width"][0]),
        height=int(meta["height"][0]),
        hfov=float(meta["hfov"][0]),
        max_range=float(meta["max_range"][0]),
    )
    px, py, pz, yaw = (float(v) for v in meta["pose"])
    pose = CameraPose(Vec3(px, py, pz), yaw)
    img = DepthImage(width, height, data, intr.max_range)
    return img, intr, pose
