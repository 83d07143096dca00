"""KITTI odometry ingestion: Velodyne scans, pose files, training pairs.

On-disk layout (both path templates are configurable)::

    <root>/sequences/<id>/velodyne/<frame:06d>.bin   little-endian f32 x,y,z,intensity
    <root>/sequences/<id>/calib.txt                  optional, "Tr:" line = velo -> cam
    <root>/poses/<id>.txt                            12 reals per line, row-major [R|t]
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import pose as pc
from .encoding import DepthImage, FramePairInput, PointCloud, ProjectionConfig, project_cloud, stack_pair
from .errors import EmptyScanWarning, IoFailure, LengthMismatch, MalformedLine, NonFiniteValueWarning, TruncatedFile

log = logging.getLogger(__name__)

TRAIN_SEQUENCES = ("00", "01", "02", "03", "05", "06", "07", "08", "09")
TEST_SEQUENCES = ("04", "10")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...] = TRAIN_SEQUENCES
    test: tuple[str, ...] = TEST_SEQUENCES

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test splits share sequences {sorted(overlap)}")


@dataclass(frozen=True)
class ScanRecord:
    sequence: str
    frame: int
    cloud: PointCloud


@dataclass(frozen=True, eq=False)
class SamplePair:
    input: FramePairInput
    label: np.ndarray


@dataclass(frozen=True)
class DatasetLayout:
    root: Path
    scan_template: str = "sequences/{seq}/velodyne/{frame:06d}.bin"
    pose_template: str = "poses/{seq}.txt"
    calib_template: str = "sequences/{seq}/calib.txt"

    def scan_path(self, seq: str, frame: int) -> Path:
        return Path(self.root) / self.scan_template.format(seq=seq, frame=frame)

    def scan_dir(self, seq: str) -> Path:
        return self.scan_path(seq, 0).parent

    def pose_path(self, seq: str) -> Path:
        return Path(self.root) / self.pose_template.format(seq=seq)

    def calib_path(self, seq: str) -> Path:
        return Path(self.root) / self.calib_template.format(seq=seq)

    def scan_paths(self, seq: str) -> list[Path]:
        d = self.scan_dir(seq)
        if not d.is_dir():
            raise IoFailure(f"scan directory not found: {d}")
        return sorted(d.glob("*.bin"))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e.strerror}") from e


def read_velodyne_bin(path) -> PointCloud:
    raw = _read_bytes(path)
    if len(raw) % 16:
        raise TruncatedFile(f"{path}: size {len(raw)} bytes is not a multiple of 16")
    if not raw:
        warnings.warn(f"{path}: empty scan", EmptyScanWarning, stacklevel=2)
        return PointCloud(np.zeros((0, 3)), np.zeros(0))
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    finite = np.all(np.isfinite(data), axis=1)
    n_bad = int((~finite).sum())
    if n_bad:
        warnings.warn(f"{path}: dropped {n_bad} non-finite points", NonFiniteValueWarning, stacklevel=2)
        data = data[finite]
    return PointCloud(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64))


def write_velodyne_bin(path, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    data = np.column_stack([cloud.points, inten]).astype("<f4")
    Path(path).write_bytes(data.tobytes())


def _parse_pose_line(path, lineno: int, line: str) -> pc.Pose:
    fields = line.split()
    if len(fields) != 12:
        raise MalformedLine(path, lineno, f"expected 12 numbers, found {len(fields)}")
    try:
        vals = np.array([float(v) for v in fields])
    except ValueError as e:
        raise MalformedLine(path, lineno, str(e)) from None
    if not np.all(np.isfinite(vals)):
        raise MalformedLine(path, lineno, "non-finite value")
    M = vals.reshape(3, 4)
    R = M[:, :3]
    # ASCII-rounded rotations drift slightly from orthonormality; larger
    # deviations mean the block is not a rotation at all
    err = pc.orthonormality_error(R)
    if err > 1e-3:
        raise MalformedLine(path, lineno, f"rotation block is not orthonormal (max |R^T R - I| = {err:.3g})")
    if err > 1e-6:
        R = pc.gram_schmidt(R)
    try:
        return pc.Pose(R, M[:, 3])
    except ValueError as e:
        raise MalformedLine(path, lineno, str(e)) from None


def read_kitti_poses(path) -> list[pc.Pose]:
    text = _read_bytes(path).decode("ascii", errors="replace")
    poses = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        poses.append(_parse_pose_line(path, lineno, line))
    return poses


def format_pose_line(p: pc.Pose) -> str:
    M = p.matrix()[:3]
    return " ".join(repr(float(v)) for v in M.reshape(-1))


def write_kitti_trajectory(path, traj: Sequence[pc.Pose]) -> None:
    """One row-major 3x4 line per pose, shortest repr that round-trips exactly."""
    try:
        with open(path, "w", newline="\n") as f:
            for p in traj:
                f.write(format_pose_line(p) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e.strerror}") from e


def read_calibration(path) -> pc.Pose | None:
    """Velodyne-to-camera extrinsic from a KITTI ``calib.txt`` (``Tr:`` line)."""
    path = Path(path)
    if not path.exists():
        return None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("Tr:"):
            return _parse_pose_line(path, lineno, line[3:])
    return None


def label_for(a: pc.Pose, b: pc.Pose, extrinsic: pc.Pose | None = None, conv=pc.DEFAULT_CONVENTION) -> np.ndarray:
    """Relative-motion label from frame a to frame b.

    With an extrinsic ``Tr`` (velo -> cam) the camera-frame motion is mapped
    into the sensor frame, ``Tr^-1 @ rel @ Tr``.
    """
    rel = pc.relative_pose(a, b)
    if extrinsic is not None:
        rel = pc.compose(pc.invert(extrinsic), pc.compose(rel, extrinsic))
    return pc.pose_to_vec6(rel, conv)


def build_pairs(
    seq: Sequence[ScanRecord],
    poses: Sequence[pc.Pose],
    cfg: ProjectionConfig,
    extrinsic: pc.Pose | None = None,
    conv=pc.DEFAULT_CONVENTION,
) -> list[SamplePair]:
    if len(seq) != len(poses):
        raise LengthMismatch(f"{len(seq)} scans but {len(poses)} poses")
    if len(seq) < 2:
        raise LengthMismatch("need at least two frames to form a pair")
    images = [project_cloud(s.cloud, cfg) for s in seq]
    return [
        SamplePair(stack_pair(images[i], images[i + 1]), label_for(poses[i], poses[i + 1], extrinsic, conv))
        for i in range(len(seq) - 1)
    ]


class SequenceReader:
    """Lazy per-frame access to one KITTI sequence."""

    def __init__(self, layout: DatasetLayout, seq: str, extrinsic: pc.Pose | None = None, use_calib: bool = True):
        self.layout = layout
        self.seq = seq
        self.scan_paths = layout.scan_paths(seq)
        pose_path = layout.pose_path(seq)
        self.poses = read_kitti_poses(pose_path) if pose_path.exists() else None
        if self.poses is not None and len(self.poses) != len(self.scan_paths):
            raise LengthMismatch(
                f"sequence {seq}: {len(self.scan_paths)} scans but {len(self.poses)} poses in {pose_path}"
            )
        if extrinsic is None and use_calib:
            extrinsic = read_calibration(layout.calib_path(seq))
        self.extrinsic = extrinsic

    def __len__(self) -> int:
        return len(self.scan_paths)

    def scan(self, frame: int) -> ScanRecord:
        return ScanRecord(self.seq, frame, read_velodyne_bin(self.scan_paths[frame]))

    def encode(self, frame: int, cfg: ProjectionConfig) -> DepthImage:
        return project_cloud(self.scan(frame).cloud, cfg)


def iter_encoded(reader: SequenceReader, cfg: ProjectionConfig, prefetch: int = 4) -> Iterator[DepthImage]:
    """Encoded frames in order; up to ``prefetch`` frames are read ahead."""
    n = len(reader)
    if prefetch <= 1:
        for i in range(n):
            yield reader.encode(i, cfg)
        return
    with ThreadPoolExecutor(max_workers=prefetch) as pool:
        pending = {}
        for i in range(min(prefetch, n)):
            pending[i] = pool.submit(reader.encode, i, cfg)
        for i in range(n):
            img = pending.pop(i).result()
            nxt = i + prefetch
            if nxt < n:
                pending[nxt] = pool.submit(reader.encode, nxt, cfg)
            yield img


def iter_sequence_pairs(
    reader: SequenceReader, cfg: ProjectionConfig, prefetch: int = 4, conv=pc.DEFAULT_CONVENTION
) -> Iterator[SamplePair]:
    if reader.poses is None:
        raise IoFailure(f"no pose file for sequence {reader.seq}: {reader.layout.pose_path(reader.seq)}")
    if len(reader) < 2:
        raise LengthMismatch(f"sequence {reader.seq} has fewer than two frames")
    prev = None
    for i, img in enumerate(iter_encoded(reader, cfg, prefetch)):
        if prev is not None:
            label = label_for(reader.poses[i - 1], reader.poses[i], reader.extrinsic, conv)
            yield SamplePair(stack_pair(prev, img), label)
        prev = img


def load_pair_arrays(
    root, sequences: Sequence[str], cfg: ProjectionConfig, prefetch: int = 4, use_calib: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Encode whole sequences into ``(N, 2, H, W)`` float32 inputs and ``(N, 6)`` labels."""
    layout = DatasetLayout(Path(root))
    xs, ys = [], []
    for seq in sequences:
        reader = SequenceReader(layout, seq, use_calib=use_calib)
        for pair in iter_sequence_pairs(reader, cfg, prefetch):
            xs.append(pair.input.translation)
            ys.append(pair.label)
        log.info("sequence %s: %d pairs", seq, len(reader) - 1)
    if not xs:
        return np.zeros((0, 2, *cfg.shape), np.float32), np.zeros((0, 6))
    return np.stack(xs), np.stack(ys)


def default_prefetch() -> int:
    return max(1, min(8, os.cpu_count() or 1))
