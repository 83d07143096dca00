"""Panoramic depth-image encoding of lidar scans and two-frame input stacking.

A point ``(x, y, z)`` maps to azimuth ``theta = atan2(y, x)`` (wrapped into
``[0, 2*pi)``) and elevation ``phi = asin(z / d)``; the image column is
``floor(theta / dtheta)`` and the row is ``floor((phi - phi_min) / dphi)``.
Row 0 of :attr:`DepthImage.grid` is the lowest elevation bin.  Cell values are
inverse-normalized ranges, ``255 * (1 - min(d, d_max) / d_max)``, so nearer
points are brighter and empty cells stay 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, EmptyCloud

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ProjectionConfig:
    width: int = 1024
    height: int = 64
    phi_min: float = math.radians(-24.9)
    phi_max: float = math.radians(2.0)
    d_max: float = 80.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not self.phi_max > self.phi_min:
            raise ValueError("phi_max must exceed phi_min")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.width

    @property
    def dphi(self) -> float:
        return (self.phi_max - self.phi_min) / self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def tiny(cls) -> "ProjectionConfig":
        return cls(width=64, height=16)

    @classmethod
    def full(cls) -> "ProjectionConfig":
        return cls()


@dataclass(frozen=True)
class PointCloud:
    """Sensor-frame points in meters; intensity is carried but never encoded."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError("intensity length differs from point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class EncodingStats:
    n_points: int
    n_origin: int
    n_out_of_fov: int
    n_in_fov: int
    n_collisions: int

    @property
    def in_fov_fraction(self) -> float:
        return self.n_in_fov / self.n_points if self.n_points else 0.0

    def as_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "n_origin": self.n_origin,
            "n_out_of_fov": self.n_out_of_fov,
            "n_in_fov": self.n_in_fov,
            "n_collisions": self.n_collisions,
            "in_fov_fraction": self.in_fov_fraction,
        }


@dataclass(frozen=True, eq=False)
class DepthImage:
    grid: np.ndarray
    config: ProjectionConfig
    stats: EncodingStats | None = field(default=None, compare=False)

    def nonzero_fraction(self) -> float:
        return float(np.count_nonzero(self.grid)) / self.grid.size


@dataclass(frozen=True, eq=False)
class FramePairInput:
    """Network inputs for one frame pair, scaled to [0, 1].

    ``translation`` is ``(2, H, W)`` = [prev, curr]; ``orientation`` is
    ``(6, H, W)`` = [prev, prev, prev, curr, curr, curr].
    """

    translation: np.ndarray
    orientation: np.ndarray


def azimuth(x, y):
    """atan2(y, x) wrapped into [0, 2*pi)."""
    theta = np.arctan2(y, x)
    theta = np.where(theta < 0, theta + TWO_PI, theta)
    # -tiny + 2*pi rounds to exactly 2*pi
    return np.where(theta >= TWO_PI, 0.0, theta)


def _bins(x, y, z, cfg: ProjectionConfig):
    d = np.sqrt(x * x + y * y + z * z)
    theta = azimuth(x, y)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arcsin(np.clip(z / d, -1.0, 1.0))
    r = np.minimum(np.floor(theta / cfg.dtheta).astype(np.int64), cfg.width - 1)
    in_fov = (phi >= cfg.phi_min) & (phi < cfg.phi_max)
    c = np.floor((np.where(in_fov, phi, cfg.phi_min) - cfg.phi_min) / cfg.dphi).astype(np.int64)
    c = np.minimum(c, cfg.height - 1)
    return r, c, d, in_fov


def project_point(x: float, y: float, z: float, cfg: ProjectionConfig) -> tuple[int, int, float] | None:
    """Image position ``(r, c)`` and range of one point; ``None`` if out of FOV."""
    if x == 0 and y == 0 and z == 0:
        raise ValueError("the origin has no defined direction")
    r, c, d, ok = _bins(np.float64(x), np.float64(y), np.float64(z), cfg)
    if not ok:
        return None
    return int(r), int(c), float(d)


def normalize_depth(d, cfg: ProjectionConfig):
    d = np.asarray(d, dtype=np.float64)
    v = 255.0 * (1.0 - np.minimum(d, cfg.d_max) / cfg.d_max)
    return v if v.ndim else float(v)


def project_cloud(pc: PointCloud | np.ndarray, cfg: ProjectionConfig) -> DepthImage:
    """Encode a cloud; each cell keeps its nearest point (ties: lowest index)."""
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("cannot encode an empty point cloud")
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    origin = (x == 0) & (y == 0) & (z == 0)
    r, c, d, in_fov = _bins(x, y, z, cfg)
    keep = in_fov & ~origin
    idx = np.flatnonzero(keep)
    cell = c[idx] * cfg.width + r[idx]
    dk = d[idx]
    order = np.lexsort((idx, dk, cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    winners = order[first]

    grid = np.zeros(cfg.height * cfg.width, dtype=np.float64)
    grid[cell[winners]] = normalize_depth(dk[winners], cfg)
    stats = EncodingStats(
        n_points=len(pts),
        n_origin=int(origin.sum()),
        n_out_of_fov=int((~in_fov & ~origin).sum()),
        n_in_fov=len(idx),
        n_collisions=len(idx) - len(winners),
    )
    return DepthImage(grid.reshape(cfg.height, cfg.width), cfg, stats)


def stack_pair(prev: DepthImage, curr: DepthImage) -> FramePairInput:
    if prev.config != curr.config:
        raise ConfigMismatch(f"projection configs differ: {prev.config} vs {curr.config}")
    pair = np.stack([prev.grid, curr.grid]).astype(np.float32) / np.float32(255.0)
    return FramePairInput(translation=pair, orientation=replicate_channels(pair[None])[0])


def replicate_channels(pairs: np.ndarray) -> np.ndarray:
    """``(N, 2, H, W)`` -> ``(N, 6, H, W)``, each frame copied to three channels."""
    return np.repeat(pairs, 3, axis=1)


def write_pgm(path, image: DepthImage) -> None:
    """8-bit binary PGM, top row = highest elevation bin."""
    data = np.clip(np.rint(image.grid[::-1]), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by :func:`write_pgm` (rows top = highest elevation)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
