"""Synthetic lidar sequences with exactly known motion.

A sensor with a fixed beam pattern (one beam per elevation row, evenly
spaced azimuths) is driven along a trajectory built by chaining per-step
motions, and each beam is ray-cast against analytic primitives (ground plane,
yawed boxes, vertical cylinders).  Range noise perturbs hits along the ray;
poses and labels are never perturbed, so the labels are exact.

World frame is z-up; the sensor frame is x forward, y left, z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pose as pc
from .encoding import PointCloud, ProjectionConfig, project_cloud, stack_pair
from .errors import DegenerateScene
from .kitti import write_kitti_trajectory, write_velodyne_bin

_NO_HIT = np.inf


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float] = (0.0, 0.0, -1.73)
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - origin) @ n) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 0), t, _NO_HIT)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        return np.abs((pts - np.asarray(self.point)) @ n)

    def reach(self, origin: np.ndarray) -> float:
        return 0.0


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def _to_local(self, v: np.ndarray, is_point: bool) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        Rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        if is_point:
            v = v - np.asarray(self.center)
        return v @ Rt.T

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = self._to_local(origin[None], True)[0]
        d = self._to_local(dirs, False)
        half = np.asarray(self.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        # axis-parallel rays: slab is either everything or nothing
        par = d == 0
        inside = np.abs(o) <= half
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.inf, t2)
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit & (t > 0), t, _NO_HIT)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        p = np.abs(self._to_local(pts, True))
        half = np.asarray(self.size) / 2
        q = p - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def reach(self, origin: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(self.center)[:2] - origin[:2]) - np.linalg.norm(self.size[:2]) / 2)


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder with a top cap, spanning ``z0..z1``."""

    center: tuple[float, float]
    radius: float
    z0: float
    z1: float

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        ox, oy = origin[0] - self.center[0], origin[1] - self.center[1]
        dx, dy = dirs[:, 0], dirs[:, 1]
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            ta = (-b - sq) / (2 * a)
            tb = (-b + sq) / (2 * a)
        best = np.full(len(dirs), _NO_HIT)
        for t in (tb, ta):
            z = origin[2] + t * dirs[:, 2]
            ok = (disc >= 0) & (a > 1e-15) & (t > 0) & (z >= self.z0) & (z <= self.z1)
            best = np.where(ok & (t < best), t, best)
        for zc in (self.z0, self.z1):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zc - origin[2]) / dirs[:, 2]
                x = ox + t * dx
                y = oy + t * dy
            ok = (np.abs(dirs[:, 2]) > 1e-15) & (t > 0) & (x * x + y * y <= self.radius**2)
            best = np.where(ok & (t < best), t, best)
        return best

    def distance(self, pts: np.ndarray) -> np.ndarray:
        r = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        dr = r - self.radius
        dz = np.maximum(self.z0 - pts[:, 2], pts[:, 2] - self.z1)
        side = np.where(dz <= 0, np.abs(dr), np.hypot(np.maximum(dr, 0), dz))
        cap = np.where(r <= self.radius, np.minimum(np.abs(pts[:, 2] - self.z0), np.abs(pts[:, 2] - self.z1)), np.inf)
        return np.minimum(side, cap)

    def reach(self, origin: np.ndarray) -> float:
        return float(np.hypot(self.center[0] - origin[0], self.center[1] - origin[1]) - self.radius)


@dataclass(frozen=True)
class SceneSpec:
    """Primitives plus the sensor model.

    ``clutter_density`` (objects per 100 m^2) scatters random boxes and poles
    around the trajectory, keeping ``clearance`` meters free along the path.
    """

    primitives: tuple = ()
    sensor_height: float = 1.73
    clutter_density: float = 1.2
    clearance: float = 4.0
    range_noise: float = 0.02
    beams: int = 16
    azimuth_steps: int = 128
    projection: ProjectionConfig = field(default_factory=ProjectionConfig.tiny)
    seed: int = 0

    @property
    def points_per_frame(self) -> int:
        return self.beams * self.azimuth_steps


@dataclass(frozen=True)
class MotionSpec:
    """Per-step motion ``[p, q]`` generator.

    ``constant``: every step equals ``mean``.
    ``sinusoidal``: ``mean + amplitude * sin(2*pi*i/period)``.
    ``random_walk``: starts at ``mean``; each step adds N(0, sigma) and is
    clipped to ``mean +- bound``.
    """

    kind: str = "random_walk"
    mean: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    amplitude: tuple = (0.0,) * 6
    period: float = 40.0
    sigma: tuple = (0.15, 0.03, 0.0, 0.0, 0.0, 0.3)
    bound: tuple = (0.5, 0.15, 0.0, 0.0, 0.0, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoidal", "random_walk"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        worst = np.abs(np.asarray(self.mean[3:])) + np.abs(np.asarray(self.amplitude[3:] if self.kind == "sinusoidal" else self.bound[3:]))
        if self.kind == "constant":
            worst = np.abs(np.asarray(self.mean[3:]))
        if np.linalg.norm(worst) >= math.pi / 4:
            raise ValueError("per-step rotation must stay below pi/4")

    def steps(self, n: int) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        if self.kind == "constant":
            return np.tile(mean, (n, 1))
        if self.kind == "sinusoidal":
            i = np.arange(n)[:, None]
            return mean + np.asarray(self.amplitude) * np.sin(2 * np.pi * i / self.period)
        rng = np.random.default_rng([self.seed, 7])
        sigma, bound = np.asarray(self.sigma), np.asarray(self.bound)
        out = np.empty((n, 6))
        cur = mean.copy()
        for i in range(n):
            cur = np.clip(cur + sigma * rng.standard_normal(6), mean - bound, mean + bound)
            out[i] = cur
        return out


@dataclass
class SyntheticSequence:
    scans: list[PointCloud]
    clean_scans: list[PointCloud]
    poses: list[pc.Pose]
    steps: np.ndarray
    primitives: tuple

    @property
    def labels(self) -> np.ndarray:
        return self.steps


def beam_directions(scene: SceneSpec) -> np.ndarray:
    """Unit rays in the sensor frame, centered in the projection's bins."""
    cfg = scene.projection
    phi = cfg.phi_min + (np.arange(scene.beams) + 0.5) * (cfg.phi_max - cfg.phi_min) / scene.beams
    theta = (np.arange(scene.azimuth_steps) + 0.5) * 2 * np.pi / scene.azimuth_steps
    P, Th = np.meshgrid(phi, theta, indexing="ij")
    P, Th = P.ravel(), Th.ravel()
    return np.column_stack([np.cos(P) * np.cos(Th), np.cos(P) * np.sin(Th), np.sin(P)])


def scatter_clutter(scene: SceneSpec, path_xy: np.ndarray) -> tuple:
    rng = np.random.default_rng([scene.seed, 11])
    margin = scene.projection.d_max * 0.75
    lo = path_xy.min(axis=0) - margin
    hi = path_xy.max(axis=0) + margin
    area = float(np.prod(hi - lo))
    n = int(rng.poisson(scene.clutter_density * area / 100.0))
    centers = rng.uniform(lo, hi, size=(n, 2))
    # clearance against path points (chunked to bound memory)
    keep = np.ones(n, dtype=bool)
    for s in range(0, len(path_xy), 256):
        d = np.linalg.norm(centers[:, None, :] - path_xy[None, s : s + 256], axis=2)
        keep &= d.min(axis=1) > scene.clearance + 3.0
    ground = -scene.sensor_height
    prims = []
    for (x, y), is_box in zip(centers[keep], rng.random(n)[keep] < 0.7):
        if is_box:
            sx, sy = rng.uniform(1.0, 6.0, 2)
            sz = rng.uniform(1.0, 5.0)
            prims.append(Box((x, y, ground + sz / 2), (sx, sy, sz), float(rng.uniform(0, np.pi))))
        else:
            prims.append(Cylinder((x, y), float(rng.uniform(0.15, 0.6)), ground, ground + float(rng.uniform(3.0, 8.0))))
    return tuple(prims)


def cast_rays(prims: Sequence, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    """Nearest hit distance per ray (``inf`` for misses beyond ``max_range``)."""
    best = np.full(len(dirs), _NO_HIT)
    for p in prims:
        if p.reach(origin) > max_range:
            continue
        best = np.minimum(best, p.intersect(origin, dirs))
    return np.where(best <= max_range, best, _NO_HIT)


def generate_sequence(scene: SceneSpec, motion: MotionSpec, n_frames: int) -> SyntheticSequence:
    if n_frames < 2:
        raise ValueError("need at least two frames")
    steps = motion.steps(n_frames - 1)
    poses = pc.integrate_trajectory(pc.Pose.identity(), steps)
    path_xy = np.array([p.translation[:2] for p in poses])
    prims = (Plane((0.0, 0.0, -scene.sensor_height)),) + tuple(scene.primitives)
    if scene.clutter_density > 0:
        prims += scatter_clutter(scene, path_xy)
    dirs_s = beam_directions(scene)
    d_max = scene.projection.d_max
    scans, clean = [], []
    for i, T in enumerate(poses):
        t = cast_rays(prims, T.translation, dirs_s @ T.rotation.T, d_max)
        hit = np.isfinite(t)
        if not hit.any():
            raise DegenerateScene(f"frame {i}: no beam hits a surface within {d_max} m")
        pts = dirs_s[hit] * t[hit, None]
        rng = np.random.default_rng([scene.seed, 3, i])
        noisy = np.clip(t[hit] + scene.range_noise * rng.standard_normal(hit.sum()), 1e-3, None)
        clean.append(PointCloud(pts, np.ones(len(pts))))
        scans.append(PointCloud(dirs_s[hit] * noisy[:, None], np.ones(len(pts))))
    return SyntheticSequence(scans, clean, poses, steps, prims)


def write_kitti_layout(root, seq_id: str, seq: SyntheticSequence) -> Path:
    """Write scans and poses in the KITTI odometry directory layout."""
    root = Path(root)
    vdir = root / "sequences" / seq_id / "velodyne"
    vdir.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(seq.scans):
        write_velodyne_bin(vdir / f"{i:06d}.bin", cloud)
    (root / "poses").mkdir(parents=True, exist_ok=True)
    write_kitti_trajectory(root / "poses" / f"{seq_id}.txt", seq.poses)
    return root


def encode_pairs(seq: SyntheticSequence, cfg: ProjectionConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(N, 2, H, W)`` float32 network inputs and ``(N, 6)`` labels."""
    imgs = [project_cloud(c, cfg) for c in seq.scans]
    x = np.stack([stack_pair(a, b).translation for a, b in zip(imgs[:-1], imgs[1:])])
    return x, seq.steps.copy()


def tiny_scene(seed: int = 0) -> SceneSpec:
    return SceneSpec(seed=seed)


def tiny_motion(seed: int = 0) -> MotionSpec:
    return MotionSpec(seed=seed)
