"""Spherical range-view projection, label back-projection and input planes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

IGNORE_ID = 4
CONDITIONS = ("clean", "fog", "rain", "snow")


@dataclass(frozen=True)
class ProjectionConfig:
    width: int = 512
    height: int = 32
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)  # magnitude of the downward limit

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"projection size must be positive, got {self.height}x{self.width}")
        if self.fov_up + self.fov_down <= 0:
            raise ValueError("total vertical field of view must be positive")

    @property
    def fov_total(self) -> float:
        return abs(self.fov_up) + abs(self.fov_down)


@dataclass
class PointCloud:
    xyz: np.ndarray  # N x 3 float32, meters
    r: np.ndarray  # N float32 in [0, 1]
    labels: np.ndarray | None = None  # N int64 class ids
    condition: str = "clean"

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        self.r = np.asarray(self.r, dtype=np.float32).reshape(-1)
        if len(self.r) != len(self.xyz):
            raise ValueError(f"{len(self.xyz)} points but {len(self.r)} reflectances")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.xyz):
                raise ValueError(f"{len(self.xyz)} points but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if self.r.size and not (self.r.min() >= 0 and self.r.max() <= 1):
            raise ValueError("reflectance must lie in [0, 1]")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[keep]
        return PointCloud(self.xyz[keep], self.r[keep], labels, self.condition)


@dataclass
class ProjectionDiagnostics:
    zero_range: int = 0
    out_of_fov: int = 0

    @property
    def dropped(self) -> int:
        return self.zero_range + self.out_of_fov


@dataclass
class RangeImage:
    channels: np.ndarray  # 5 x H x W: x, y, z, depth, intensity
    valid: np.ndarray  # H x W bool
    winner: np.ndarray  # H x W int64, -1 where empty
    point_pixel: np.ndarray  # N x 2 int64 (u, v), -1 for dropped points
    diagnostics: ProjectionDiagnostics = field(default_factory=ProjectionDiagnostics)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def retained(self) -> np.ndarray:
        return self.point_pixel[:, 0] >= 0


def pixel_coords(xyz: np.ndarray, cfg: ProjectionConfig):
    """Float-64 (u, v) before flooring, plus depth and elevation per point."""
    p = xyz.astype(np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    d = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore", divide="ignore"):
        elev = np.arcsin(np.clip(z / d, -1.0, 1.0))
    u = 0.5 * (1.0 - np.arctan2(x, y) / np.pi) * cfg.width
    v = (1.0 - (elev + cfg.fov_down) / cfg.fov_total) * cfg.height
    return u, v, d, elev


def project(pc: PointCloud, cfg: ProjectionConfig) -> RangeImage:
    """Project ``pc`` onto an ``H x W`` range image with nearest-depth z-buffering.

    Equal-depth collisions go to the lower point index. Points with zero range
    or elevation outside ``[-fov_down, fov_up]`` are dropped and counted.
    """
    if len(pc) == 0:
        raise ValueError("cannot project an empty point cloud")
    h, w = cfg.height, cfg.width
    u, v, d, elev = pixel_coords(pc.xyz, cfg)
    zero = d == 0
    in_fov = ~zero & (elev >= -cfg.fov_down) & (elev <= cfg.fov_up)
    diag = ProjectionDiagnostics(int(zero.sum()), int((~zero & ~in_fov).sum()))

    ui = np.clip(np.floor(np.where(in_fov, u, 0.0)), 0, w - 1).astype(np.int64)
    vi = np.clip(np.floor(np.where(in_fov, v, 0.0)), 0, h - 1).astype(np.int64)
    point_pixel = np.full((len(pc), 2), -1, dtype=np.int64)
    point_pixel[in_fov, 0] = ui[in_fov]
    point_pixel[in_fov, 1] = vi[in_fov]

    idx = np.flatnonzero(in_fov)
    flat = vi[idx] * w + ui[idx]
    # primary key pixel, then depth, then point index
    order = np.lexsort((idx, d[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win_pix = flat_sorted[first]
    win_pt = idx[order][first]

    winner = np.full(h * w, -1, dtype=np.int64)
    winner[win_pix] = win_pt
    channels = np.zeros((5, h * w), dtype=np.float32)
    channels[0:3, win_pix] = pc.xyz[win_pt].T
    channels[3, win_pix] = d[win_pt]
    channels[4, win_pix] = pc.r[win_pt]
    return RangeImage(
        channels.reshape(5, h, w),
        (winner >= 0).reshape(h, w),
        winner.reshape(h, w),
        point_pixel,
        diag,
    )


def backproject_labels(img: RangeImage, pixel_labels: np.ndarray, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Per-point labels read through each point's pixel; dropped points get ``ignore_id``."""
    if pixel_labels.shape != img.shape:
        raise ValueError(f"pixel labels {pixel_labels.shape} do not match image {img.shape}")
    out = np.full(len(img.point_pixel), ignore_id, dtype=np.int64)
    keep = img.retained
    u, v = img.point_pixel[keep, 0], img.point_pixel[keep, 1]
    out[keep] = pixel_labels[v, u]
    return out


def pixel_labels(img: RangeImage, pc: PointCloud, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Winner-point label per pixel; empty pixels carry ``ignore_id``."""
    if pc.labels is None:
        raise ValueError("point cloud has no labels")
    out = np.full(img.shape, ignore_id, dtype=np.int64)
    out[img.valid] = pc.labels[img.winner[img.valid]]
    return out


@dataclass
class InputStats:
    """Frozen standardisation statistics for the five input planes."""

    mean: np.ndarray  # 5
    std: np.ndarray  # 5

    @classmethod
    def identity(cls) -> "InputStats":
        return cls(np.zeros(5), np.ones(5))

    @classmethod
    def from_images(cls, images: list[RangeImage]) -> "InputStats":
        vals = np.concatenate([im.channels[:, im.valid].astype(np.float64) for im in images], axis=1)
        if vals.shape[1] == 0:
            raise ValueError("no valid pixels to compute input statistics from")
        std = vals.std(axis=1)
        return cls(vals.mean(axis=1), np.where(std > 0, std, 1.0))

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "InputStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def make_input_planes(img: RangeImage, stats: InputStats | None = None):
    """Standardised ``(geo 4xHxW, ref 1xHxW, valid)``; empty pixels are zero."""
    stats = stats or InputStats.identity()
    planes = (img.channels.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    planes = np.where(img.valid[None], planes, 0.0).astype(np.float32)
    return planes[:4], planes[4:5], img.valid.copy()
