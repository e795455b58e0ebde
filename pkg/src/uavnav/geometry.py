"""Procedural worlds of cylindrical obstacles, plus exact distance queries."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Independent substreams per generation phase so that calling the Poisson
# sampler standalone or through generate_world yields the same points.
_STREAM_POISSON = 1
_STREAM_DIAMETERS = 2
_STREAM_ENDPOINTS = 3

_BRIDSON_K = 30


class PlacementError(RuntimeError):
    """Raised when start/goal cannot be placed with the required clearance."""


@dataclass(frozen=True)
class Vec3:
    """Point or vector in the world frame (meters, z up)."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Vec3":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder with its base on the floor plane z = 0."""

    center_x: float
    center_y: float
    radius: float
    height: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"cylinder radius must be positive, got {self.radius}")
        if not self.height > 0:
            raise ValueError(f"cylinder height must be positive, got {self.height}")


@dataclass(frozen=True)
class ScaleClass:
    """Named obstacle-diameter range in meters."""

    name: str
    diameter_min: float
    diameter_max: float

    def __post_init__(self):
        if not (0 < self.diameter_min <= self.diameter_max):
            raise ValueError(
                f"invalid diameter range [{self.diameter_min}, {self.diameter_max}]"
            )


SCALE_CLASSES = {
    c.name: c
    for c in (
        ScaleClass("Nominal", 0.10, 0.50),
        ScaleClass("US", 0.01, 0.05),
        ScaleClass("S", 0.10, 0.30),
        ScaleClass("M", 0.40, 0.80),
        ScaleClass("L", 1.00, 2.00),
        ScaleClass("XL", 4.00, 5.00),
        ScaleClass("MIX", 0.01, 5.00),
    )
}


def get_scale_class(name: str) -> ScaleClass:
    try:
        return SCALE_CLASSES[name]
    except KeyError:
        raise ValueError(
            f"unknown scale class {name!r}; choose from {sorted(SCALE_CLASSES)}"
        ) from None


@dataclass(frozen=True)
class WorldConfig:
    """Everything needed to regenerate a world deterministically."""

    bounds_min: Vec3 = Vec3(0.0, 0.0, 0.0)
    bounds_max: Vec3 = Vec3(20.0, 20.0, 3.0)
    scale_class: ScaleClass = field(default_factory=lambda: SCALE_CLASSES["Nominal"])
    poisson_radius: float = 2.0
    ceiling_height: float = 3.0
    # Minimum distance from start/goal to any obstacle surface.
    clearance: float = 0.6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bounds_min, self.bounds_max
        if not (lo.x < hi.x and lo.y < hi.y and lo.z < hi.z):
            raise ValueError(f"bounds_min must be < bounds_max, got {lo} vs {hi}")
        if not self.poisson_radius > 0:
            raise ValueError("poisson_radius must be positive")


@dataclass(frozen=True)
class World:
    """Immutable scene: obstacle set, bounds, and the start/goal pair."""

    obstacles: tuple
    config: WorldConfig
    start: Vec3
    goal: Vec3

    def obstacle_arrays(self):
        """(centers (K,2), radii (K,), heights (K,)) for vectorized queries."""
        k = len(self.obstacles)
        centers = np.empty((k, 2))
        radii = np.empty(k)
        heights = np.empty(k)
        for i, c in enumerate(self.obstacles):
            centers[i] = (c.center_x, c.center_y)
            radii[i] = c.radius
            heights[i] = c.height
        return centers, radii, heights


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def sample_poisson_disk(config: WorldConfig) -> list:
    """Bridson dart throwing over the xy rectangle of the bounds.

    The sampling domain is the bounds rectangle shrunk by poisson_radius/2 on
    every side, so obstacle centers stay inside the bounds.  Every pair of
    returned points is at least poisson_radius apart.  The sample is a pure
    function of the config seed.
    """
    r = config.poisson_radius
    x0 = config.bounds_min.x + r / 2
    x1 = config.bounds_max.x - r / 2
    y0 = config.bounds_min.y + r / 2
    y1 = config.bounds_max.y - r / 2
    if x1 <= x0 or y1 <= y0:
        return []

    rng = _rng(config.seed, _STREAM_POISSON)
    cell = r / math.sqrt(2.0)
    nx = max(1, math.ceil((x1 - x0) / cell))
    ny = max(1, math.ceil((y1 - y0) / cell))
    grid = np.full((nx, ny), -1, dtype=np.int64)

    points: list = []
    active: list = []

    def cell_of(p):
        return (
            min(nx - 1, int((p[0] - x0) / cell)),
            min(ny - 1, int((p[1] - y0) / cell)),
        )

    def far_enough(p):
        cx, cy = cell_of(p)
        r2 = r * r
        for gx in range(max(0, cx - 2), min(nx, cx + 3)):
            for gy in range(max(0, cy - 2), min(ny, cy + 3)):
                j = grid[gx, gy]
                if j >= 0:
                    q = points[j]
                    dx = p[0] - q[0]
                    dy = p[1] - q[1]
                    if dx * dx + dy * dy < r2:
                        return False
        return True

    def accept(p):
        grid[cell_of(p)] = len(points)
        points.append(p)
        active.append(len(points) - 1)

    first = (x0 + rng.random() * (x1 - x0), y0 + rng.random() * (y1 - y0))
    accept(first)

    while active:
        slot = int(rng.integers(len(active)))
        base = points[active[slot]]
        placed = False
        for _ in range(_BRIDSON_K):
            rho = r * (1.0 + rng.random())
            theta = 2.0 * math.pi * rng.random()
            cand = (base[0] + rho * math.cos(theta), base[1] + rho * math.sin(theta))
            if not (x0 <= cand[0] <= x1 and y0 <= cand[1] <= y1):
                continue
            if far_enough(cand):
                accept(cand)
                placed = True
                break
        if not placed:
            active.pop(slot)
    return points


def generate_world(config: WorldConfig) -> World:
    """Populate the bounds with Poisson-placed cylinders and endpoints.

    Diameters are uniform over the scale class range, heights equal the
    configured ceiling height.  Start sits near the center of the low-x face,
    goal near the high-x face; both are jittered until they clear every
    obstacle surface by at least config.clearance.
    """
    points = sample_poisson_disk(config)
    rng_d = _rng(config.seed, _STREAM_DIAMETERS)
    sc = config.scale_class
    diameters = rng_d.uniform(sc.diameter_min, sc.diameter_max, size=len(points))
    obstacles = tuple(
        Cylinder(p[0], p[1], d / 2.0, config.ceiling_height)
        for p, d in zip(points, diameters)
    )

    lo, hi = config.bounds_min, config.bounds_max
    span = hi.as_array() - lo.as_array()
    z_mid = lo.z + 0.5 * span[2]
    rng_e = _rng(config.seed, _STREAM_ENDPOINTS)

    centers = np.array([(c.center_x, c.center_y) for c in obstacles]).reshape(-1, 2)
    radii = np.array([c.radius for c in obstacles])

    def clear(x, y):
        if len(obstacles) == 0:
            return True
        d = np.hypot(centers[:, 0] - x, centers[:, 1] - y) - radii
        return bool(np.min(d) >= config.clearance)

    def place(face: str):
        for _ in range(1000):
            fx = rng_e.uniform(0.05, 0.15)
            x = lo.x + fx * span[0] if face == "low" else hi.x - fx * span[0]
            y = lo.y + 0.5 * span[1] + rng_e.uniform(-0.25, 0.25) * span[1]
            if clear(x, y):
                return Vec3(float(x), float(y), float(z_mid))
        raise PlacementError(
            f"could not place {face}-face endpoint with clearance "
            f"{config.clearance} m in 1000 attempts"
        )

    start = place("low")
    goal = place("high")
    return World(obstacles=obstacles, config=config, start=start, goal=goal)


def signed_distance_batch(world: World, pts: np.ndarray) -> np.ndarray:
    """Signed distance to the nearest surface for an (N, 3) array of points.

    The surfaces are every cylinder's lateral wall (negative inside), the
    floor, the ceiling, and the four bound walls.  Exact for this primitive
    set.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    lo, hi = world.config.bounds_min, world.config.bounds_max
    sd = np.minimum.reduce(
        [
            pts[:, 2] - lo.z,
            hi.z - pts[:, 2],
            pts[:, 0] - lo.x,
            hi.x - pts[:, 0],
            pts[:, 1] - lo.y,
            hi.y - pts[:, 1],
        ]
    )
    if world.obstacles:
        centers, radii, _ = world.obstacle_arrays()
        d = np.hypot(
            pts[:, 0:1] - centers[None, :, 0], pts[:, 1:2] - centers[None, :, 1]
        ) - radii[None, :]
        sd = np.minimum(sd, d.min(axis=1))
    return sd


def signed_distance(world: World, point: Vec3) -> float:
    """Signed distance from one point; see signed_distance_batch."""
    return float(signed_distance_batch(world, point.as_array()[None, :])[0])


def inflate_world(world: World, margin: float) -> World:
    """Minkowski-inflate all obstacle geometry by margin.

    Cylinder radii grow by margin and the bounds (walls, floor, ceiling) move
    inward by margin, so a sphere of that radius can be treated as a point.
    Cylinder tops are raised so pillars still span past the lowered ceiling.
    """
    cfg = world.config
    new_cfg = dataclasses.replace(
        cfg,
        bounds_min=Vec3(
            cfg.bounds_min.x + margin, cfg.bounds_min.y + margin, cfg.bounds_min.z + margin
        ),
        bounds_max=Vec3(
            cfg.bounds_max.x - margin, cfg.bounds_max.y - margin, cfg.bounds_max.z - margin
        ),
    )
    obstacles = tuple(
        Cylinder(c.center_x, c.center_y, c.radius + margin, c.height + margin)
        for c in world.obstacles
    )
    return World(
        obstacles=obstacles, config=new_cfg, start=world.start, goal=world.goal
    )


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def world_to_text(world: World) -> str:
    """Line-oriented serialization, lossless at 9 significant digits."""
    cfg = world.config
    lines = [
        "bounds "
        + " ".join(
            _fmt(v)
            for v in (
                cfg.bounds_min.x,
                cfg.bounds_min.y,
                cfg.bounds_min.z,
                cfg.bounds_max.x,
                cfg.bounds_max.y,
                cfg.bounds_max.z,
            )
        )
        + f" seed {cfg.seed} class {cfg.scale_class.name}"
        + f" poisson {_fmt(cfg.poisson_radius)}"
        + f" ceiling {_fmt(cfg.ceiling_height)}"
        + f" clearance {_fmt(cfg.clearance)}"
    ]
    for c in world.obstacles:
        lines.append(
            f"{_fmt(c.center_x)} {_fmt(c.center_y)} {_fmt(c.radius)} {_fmt(c.height)}"
        )
    s, g = world.start, world.goal
    lines.append(f"start {_fmt(s.x)} {_fmt(s.y)} {_fmt(s.z)}")
    lines.append(f"goal {_fmt(g.x)} {_fmt(g.y)} {_fmt(g.z)}")
    return "\n".join(lines) + "\n"


def world_from_text(text: str) -> World:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("bounds "):
        raise ValueError("world text must begin with a 'bounds' header line")
    tok = lines[0].split()
    vals = [float(t) for t in tok[1:7]]
    fields = dict(zip(tok[7::2], tok[8::2]))
    cfg = WorldConfig(
        bounds_min=Vec3(vals[0], vals[1], vals[2]),
        bounds_max=Vec3(vals[3], vals[4], vals[5]),
        scale_class=get_scale_class(fields["class"]),
        poisson_radius=float(fields["poisson"]),
        ceiling_height=float(fields["ceiling"]),
        clearance=float(fields["clearance"]),
        seed=int(fields["seed"]),
    )
    obstacles = []
    start = goal = None
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "start":
            start = Vec3(*(float(p) for p in parts[1:4]))
        elif parts[0] == "goal":
            goal = Vec3(*(float(p) for p in parts[1:4]))
        else:
            cx, cy, r, h = (float(p) for p in parts[:4])
            obstacles.append(Cylinder(cx, cy, r, h))
    if start is None or goal is None:
        raise ValueError("world text is missing start/goal lines")
    return World(obstacles=tuple(obstacles), config=cfg, start=start, goal=goal)


def save_world(world: World, path) -> None:
    with open(path, "w") as f:
        f.write(world_to_text(world))


def load_world(path) -> World:
    with open(path) as f:
        return world_from_text(f.read())
