"""Scan files, dataset manifests and batching of projected scans."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .net import Batch
from .projection import (IGNORE_ID, InputStats, PointCloud, ProjectionConfig, make_input_planes,
                         pixel_labels, project)

MANIFEST = "manifest.json"


class DataError(ValueError):
    """Malformed or protocol-violating dataset."""


def write_kitti(pc: PointCloud, bin_path: Path, label_path: Path | None = None) -> None:
    """KITTI velodyne layout: float32 LE (x, y, z, r) quadruples; uint32 LE labels."""
    quad = np.concatenate([pc.xyz, pc.r[:, None]], axis=1).astype("<f4")
    Path(bin_path).write_bytes(quad.tobytes())
    if label_path is not None and pc.labels is not None:
        Path(label_path).write_bytes(pc.labels.astype("<u4").tobytes())


def read_kitti(bin_path: Path, label_path: Path | None = None, condition: str = "clean") -> PointCloud:
    raw = np.frombuffer(Path(bin_path).read_bytes(), dtype="<f4")
    if raw.size % 4:
        raise DataError(f"{bin_path}: size is not a multiple of 16 bytes")
    quad = raw.reshape(-1, 4)
    labels = None
    if label_path is not None and Path(label_path).exists():
        lab = np.frombuffer(Path(label_path).read_bytes(), dtype="<u4")
        if lab.size != len(quad):
            raise DataError(f"{label_path}: {lab.size} labels for {len(quad)} points")
        labels = (lab & 0xFFFF).astype(np.int64)
    return PointCloud(quad[:, :3], np.clip(quad[:, 3], 0, 1), labels, condition)


@dataclass
class ManifestEntry:
    name: str
    split: str  # train | eval
    condition: str
    seed: int
    points: int

    @property
    def bin(self) -> str:
        return f"{self.name}.bin"

    @property
    def label(self) -> str:
        return f"{self.name}.label"


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def save(self, root: Path) -> None:
        doc = {"meta": self.meta, "scenes": [e.__dict__ for e in self.entries]}
        (Path(root) / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root: Path) -> "Manifest":
        path = Path(root) / MANIFEST
        if not path.exists():
            raise DataError(f"no {MANIFEST} in {root}")
        try:
            doc = json.loads(path.read_text())
            return cls([ManifestEntry(**e) for e in doc["scenes"]], doc.get("meta", {}))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise DataError(f"malformed manifest {path}: {e}") from e

    def select(self, split: str | None = None, condition: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (condition is None or e.condition == condition)]


def load_entries(root: Path, entries: list[ManifestEntry]) -> list[PointCloud]:
    root = Path(root)
    return [read_kitti(root / e.bin, root / e.label, e.condition) for e in entries]


def augment_points(pc: PointCloud, rng: np.random.Generator, drop: float = 0.05,
                   scale: tuple[float, float] = (0.95, 1.05)) -> PointCloud:
    """Random z-rotation, x-flip, isotropic scaling and point dropping."""
    keep = rng.random(len(pc)) >= rng.uniform(0, drop)
    pc = pc.subset(keep) if keep.any() else pc
    a = rng.uniform(-math.pi, math.pi)
    c, s = math.cos(a), math.sin(a)
    xyz = pc.xyz.astype(np.float64) @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])
    if rng.random() < 0.5:
        xyz[:, 0] = -xyz[:, 0]
    xyz *= rng.uniform(*scale)
    return PointCloud(xyz, pc.r, pc.labels, pc.condition)


def to_batch(pcs: list[PointCloud], proj: ProjectionConfig, stats: InputStats, ids=()) -> tuple[Batch, list]:
    geo, ref, mask, labels, images = [], [], [], [], []
    for pc in pcs:
        img = project(pc, proj)
        g, r, m = make_input_planes(img, stats)
        geo.append(g)
        ref.append(r)
        mask.append(m)
        labels.append(pixel_labels(img, pc) if pc.labels is not None else np.full(img.shape, IGNORE_ID))
        images.append(img)
    batch = Batch(np.stack(geo), np.stack(ref), np.stack(mask), np.stack(labels), tuple(ids))
    return batch, images


class SceneSet:
    """Clean training scans, re-projected (and optionally augmented) every epoch."""

    def __init__(self, clouds: list[PointCloud], proj: ProjectionConfig, stats: InputStats | None = None,
                 seed: int = 0):
        if not clouds:
            raise DataError("empty scene set")
        self.clouds = clouds
        self.proj = proj
        self.seed = seed
        self.stats = stats or InputStats.from_images([project(pc, proj) for pc in clouds])
        self._cache = None

    def __len__(self) -> int:
        return len(self.clouds)

    def batches(self, epoch: int, batch_size: int, rng: np.random.Generator, augment: bool):
        order = rng.permutation(len(self.clouds))
        for start in range(0, len(order), batch_size):
            ids = order[start:start + batch_size]
            if augment:
                pcs = [augment_points(self.clouds[i], rng) for i in ids]
                yield to_batch(pcs, self.proj, self.stats, ids)[0]
            else:
                yield self._static(ids)

    def _static(self, ids):
        if self._cache is None:
            self._cache = to_batch(self.clouds, self.proj, self.stats, range(len(self.clouds)))[0]
        c = self._cache
        return Batch(c.geo[ids], c.ref[ids], c.mask[ids], c.labels[ids], tuple(int(i) for i in ids))
