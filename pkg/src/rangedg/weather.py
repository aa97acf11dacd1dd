"""Procedural labelled scenes and simplified adverse-weather corruption.

Scenes are built from a handful of primitives (ground plane, boxes, vertical
cylinders, vertical wall rectangles) and ray-cast from the sensor origin on a
ring x azimuth lattice. Corruption injects near-sensor scatter points,
attenuates intensity, truncates range and drops points. None of the numbers
here are physical; they only need to be ordered sensibly between presets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .projection import IGNORE_ID, PointCloud

GROUND, VEHICLE, POLE, BUILDING = 0, 1, 2, 3
CLASS_NAMES = ("ground", "vehicle", "pole", "building", "ignore")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    ground: bool = True
    sensor_height: float = 1.73
    vehicles: tuple[int, int] = (3, 8)
    poles: tuple[int, int] = (6, 14)
    walls: tuple[int, int] = (2, 5)
    vehicle_length: tuple[float, float] = (3.5, 5.0)
    vehicle_width: tuple[float, float] = (1.6, 2.0)
    vehicle_height: tuple[float, float] = (1.4, 1.8)
    pole_radius: tuple[float, float] = (0.15, 0.35)
    pole_height: tuple[float, float] = (4.0, 8.0)
    wall_length: tuple[float, float] = (10.0, 30.0)
    wall_height: tuple[float, float] = (4.0, 12.0)
    object_distance: tuple[float, float] = (4.0, 30.0)
    wall_distance: tuple[float, float] = (15.0, 35.0)
    rings: int = 32
    azimuth_steps: int = 1024
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)
    max_range: float = 50.0
    reflectance: tuple[float, float, float, float] = (0.2, 0.75, 0.5, 0.35)
    reflectance_jitter: float = 0.04
    num_classes: int = 5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        for name in ("vehicles", "poles", "walls"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} count range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.rings < 1 or self.azimuth_steps < 1:
            raise ValueError("sensor lattice must have at least one ring and one azimuth step")


@dataclass
class Box:
    center: np.ndarray  # 3
    half: np.ndarray  # 3
    yaw: float
    reflectance: float
    label: int = VEHICLE


@dataclass
class Cylinder:
    center_xy: np.ndarray  # 2
    radius: float
    z0: float
    z1: float
    reflectance: float
    label: int = POLE


@dataclass
class Wall:
    center: np.ndarray  # 3, bottom edge midpoint
    normal: np.ndarray  # 3, horizontal unit
    half_length: float
    height: float
    reflectance: float
    label: int = BUILDING


@dataclass
class Scene:
    ground_z: float | None
    ground_reflectance: float = 0.2
    boxes: list[Box] = field(default_factory=list)
    cylinders: list[Cylinder] = field(default_factory=list)
    walls: list[Wall] = field(default_factory=list)

    def empty(self) -> bool:
        return self.ground_z is None and not (self.boxes or self.cylinders or self.walls)


def ray_directions(rings: int, azimuth_steps: int, fov_up: float, fov_down: float) -> np.ndarray:
    """Unit rays at pixel-centre elevations and azimuths, ring-major, ``R x 3``."""
    total = fov_up + fov_down
    elev = fov_up - (np.arange(rings) + 0.5) * total / rings
    # azimuth convention matches the projection: theta = atan2(x, y)
    theta = np.pi * (1.0 - 2.0 * (np.arange(azimuth_steps) + 0.5) / azimuth_steps)
    e, t = np.meshgrid(elev, theta, indexing="ij")
    ce = np.cos(e)
    return np.stack([ce * np.sin(t), ce * np.cos(t), np.sin(e)], axis=-1).reshape(-1, 3)


def _hit_ground(d, z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = z / d[:, 2]
    return np.where((d[:, 2] < 0) & (t > 0), t, np.inf)


def _hit_box(d, box: Box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot.T @ (-box.center)
    dl = d @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-box.half - o) / dl
        t2 = (box.half - o) / dl
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dl == 0
    inside = np.abs(o) <= box.half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tmin, tmax = lo.max(axis=1), hi.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_cylinder(d, cyl: Cylinder):
    dx, dy = d[:, 0], d[:, 1]
    ox, oy = -cyl.center_xy[0], -cyl.center_xy[1]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - cyl.radius ** 2
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, (-b - sq) / (2 * a), np.inf)
    z = np.where(ok, t, 0.0) * d[:, 2]
    hit = ok & (t > 0) & (z >= cyl.z0) & (z <= cyl.z1)
    return np.where(hit, t, np.inf)


def _hit_wall(d, wall: Wall):
    n = wall.normal
    tangent = np.array([-n[1], n[0], 0.0])
    dn = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wall.center @ n) / dn
    p = t[:, None] * d
    along = np.abs((p - wall.center) @ tangent)
    z = p[:, 2] - wall.center[2]
    hit = (dn != 0) & (t > 0) & (along <= wall.half_length) & (z >= 0) & (z <= wall.height)
    return np.where(hit, t, np.inf)


def raycast(scene: Scene, dirs: np.ndarray, max_range: float):
    """First-hit distance, label and base reflectance per ray (``inf`` on miss)."""
    if scene.empty():
        raise ValueError("scene has no primitives")
    hits, labels, refl = [], [], []
    if scene.ground_z is not None:
        hits.append(_hit_ground(dirs, scene.ground_z))
        labels.append(GROUND)
        refl.append(scene.ground_reflectance)
    for prim, fn in [(b, _hit_box) for b in scene.boxes] + [(c, _hit_cylinder) for c in scene.cylinders] + [
        (w, _hit_wall) for w in scene.walls
    ]:
        hits.append(fn(dirs, prim))
        labels.append(prim.label)
        refl.append(prim.reflectance)
    t = np.stack(hits)
    first = np.argmin(t, axis=0)  # ties -> earliest primitive
    dist = t[first, np.arange(len(dirs))]
    dist = np.where(dist <= max_range, dist, np.inf)
    return dist, np.asarray(labels)[first], np.asarray(refl)[first]


def sample_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    g = -cfg.sensor_height
    base = cfg.reflectance

    def polar(lo_hi):
        r = rng.uniform(*lo_hi)
        a = rng.uniform(-np.pi, np.pi)
        return r * math.cos(a), r * math.sin(a)

    scene = Scene(g if cfg.ground else None, base[GROUND])
    for _ in range(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1)):
        x, y = polar(cfg.object_distance)
        half = np.array([rng.uniform(*cfg.vehicle_length), rng.uniform(*cfg.vehicle_width),
                         rng.uniform(*cfg.vehicle_height)]) / 2
        refl = float(np.clip(base[VEHICLE] + rng.normal(0, 0.08), 0, 1))
        scene.boxes.append(Box(np.array([x, y, g + half[2]]), half, rng.uniform(-np.pi, np.pi), refl))
    for _ in range(rng.integers(cfg.poles[0], cfg.poles[1] + 1)):
        x, y = polar(cfg.object_distance)
        scene.cylinders.append(Cylinder(np.array([x, y]), rng.uniform(*cfg.pole_radius), g,
                                        g + rng.uniform(*cfg.pole_height), base[POLE]))
    for _ in range(rng.integers(cfg.walls[0], cfg.walls[1] + 1)):
        x, y = polar(cfg.wall_distance)
        facing = math.atan2(-y, -x) + rng.normal(0, 0.3)
        normal = np.array([math.cos(facing), math.sin(facing), 0.0])
        scene.walls.append(Wall(np.array([x, y, g]), normal, rng.uniform(*cfg.wall_length) / 2,
                                rng.uniform(*cfg.wall_height), base[BUILDING]))
    return scene


def render_scene(scene: Scene, cfg: SceneConfig, rng: np.random.Generator) -> PointCloud:
    dirs = ray_directions(cfg.rings, cfg.azimuth_steps, cfg.fov_up, cfg.fov_down)
    dist, labels, refl = raycast(scene, dirs, cfg.max_range)
    hit = np.isfinite(dist)
    xyz = dirs[hit] * dist[hit, None]
    r = np.clip(refl[hit] + rng.normal(0, cfg.reflectance_jitter, hit.sum()), 0, 1)
    return PointCloud(xyz, r, labels[hit], "clean")


def generate_scene(cfg: SceneConfig) -> PointCloud:
    """Labelled clean scan for ``cfg.seed``; bit-identical for equal configs."""
    rng = np.random.default_rng(cfg.seed)
    scene = sample_scene(cfg, rng)
    if scene.empty():
        raise ValueError("scene config produces no primitives")
    return render_scene(scene, cfg, rng)


@dataclass(frozen=True)
class WeatherConfig:
    """Corruption parameters.

    ``attenuation`` is the range of the fractional intensity loss, so a draw
    ``a`` multiplies intensity by ``1 - a``. ``max_range`` of ``inf`` disables
    truncation.
    """

    preset: str = "clean"
    scatter_rate: float = 0.0
    scatter_range: tuple[float, float] = (0.5, 15.0)
    scatter_scale: float = 4.0
    scatter_reflectance: tuple[float, float] = (0.0, 0.1)
    attenuation: tuple[float, float] = (0.0, 0.0)
    max_range: float = math.inf
    dropout_prob: float = 0.0
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)
    seed: int = 0

    def __post_init__(self):
        if self.scatter_rate < 0:
            raise ValueError("scatter_rate must be >= 0")
        if not 0 <= self.dropout_prob <= 1:
            raise ValueError("dropout_prob must lie in [0, 1]")
        lo, hi = self.attenuation
        if not 0 <= lo <= hi <= 1:
            raise ValueError("attenuation range must satisfy 0 <= lo <= hi <= 1")
        if self.scatter_range[0] <= 0 or self.scatter_range[1] < self.scatter_range[0]:
            raise ValueError("scatter_range must be positive and ordered")


_PRESETS = {
    # strong attenuation, short visibility, moderate backscatter
    "fog": dict(scatter_rate=400.0, scatter_scale=3.0, scatter_reflectance=(0.0, 0.15),
                attenuation=(0.4, 0.7), max_range=25.0, dropout_prob=0.1),
    # sparse isolated returns, mild attenuation
    "rain": dict(scatter_rate=150.0, scatter_scale=5.0, scatter_reflectance=(0.0, 0.1),
                 attenuation=(0.1, 0.3), max_range=45.0, dropout_prob=0.05),
    # dense, brighter clutter near the sensor
    "snow": dict(scatter_rate=1500.0, scatter_scale=4.0, scatter_reflectance=(0.1, 0.6),
                 attenuation=(0.2, 0.5), max_range=35.0, dropout_prob=0.1),
}


def preset(name: str, seed: int = 0) -> WeatherConfig:
    if name not in _PRESETS:
        raise ValueError(f"unknown weather preset {name!r}; expected one of {sorted(_PRESETS)}")
    return WeatherConfig(preset=name, seed=seed, **_PRESETS[name])


def _truncated_exponential(rng, n, lo, hi, scale):
    u = rng.random(n)
    return lo - scale * np.log1p(-u * (1.0 - math.exp(-(hi - lo) / scale)))


def corrupt(pc: PointCloud, w: WeatherConfig, rng: np.random.Generator | None = None) -> PointCloud:
    """Apply scatter injection, attenuation, range truncation and dropout in that order.

    Coordinates of surviving real points are never modified and their labels
    are kept. Injected points carry the ignore label.
    """
    rng = rng if rng is not None else np.random.default_rng(w.seed)
    condition = w.preset if w.preset != "clean" else pc.condition
    n_inj = int(rng.poisson(w.scatter_rate)) if w.scatter_rate > 0 else 0
    rng_dist = _truncated_exponential(rng, n_inj, *w.scatter_range, w.scatter_scale)
    theta = rng.uniform(-np.pi, np.pi, n_inj)
    elev = rng.uniform(-w.fov_down, w.fov_up, n_inj)
    inj_xyz = np.stack([np.cos(elev) * np.sin(theta), np.cos(elev) * np.cos(theta), np.sin(elev)], -1)
    inj_xyz = inj_xyz * rng_dist[:, None]
    inj_r = rng.uniform(*w.scatter_reflectance, n_inj)

    lo, hi = w.attenuation
    if hi > 0:
        factor = 1.0 - rng.uniform(lo, hi, len(pc))
        r_real = np.clip(pc.r.astype(np.float64) * factor, 0, 1)
    else:
        r_real = pc.r

    xyz = np.concatenate([pc.xyz, inj_xyz.astype(np.float32)])
    r = np.concatenate([r_real.astype(np.float32), inj_r.astype(np.float32)])
    labels = None
    if pc.labels is not None:
        labels = np.concatenate([pc.labels, np.full(n_inj, IGNORE_ID, dtype=np.int64)])

    keep = np.ones(len(xyz), dtype=bool)
    if math.isfinite(w.max_range):
        keep &= np.linalg.norm(xyz.astype(np.float64), axis=1) <= w.max_range
    if w.dropout_prob > 0:
        keep &= rng.random(len(xyz)) >= w.dropout_prob
    out = PointCloud(xyz[keep], r[keep], None if labels is None else labels[keep], condition)
    return out


def corrupt_preset(pc: PointCloud, name: str, seed: int) -> PointCloud:
    return corrupt(pc, replace(preset(name), seed=seed))
