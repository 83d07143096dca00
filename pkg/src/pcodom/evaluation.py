"""Odometry metrics and report/plot export.

* :func:`rmse_relative` scores per-pair relative poses: ``t_rel`` is the
  RMSE of the translation error vectors, ``r_rel`` the RMSE of the Euler
  error vectors (component differences wrapped into (-pi, pi], radians).
* :func:`kitti_drift` follows the KITTI odometry devkit: for every start
  frame and segment length 100..800 m (measured along the ground-truth path)
  it compares the relative motion over the segment and normalizes the
  translation and rotation errors by the segment length.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import pose as pc
from .errors import EmptyInput, IoFailure, LengthMismatch

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)

# Published figures on KITTI, kept only to exercise report formatting.
REFERENCE_RMSE = {
    ("dual-subnet", "04"): (0.0263, 0.0305),
    ("dual-subnet", "10"): (0.0247, 0.0659),
    ("two-stream", "04"): (0.0554, 0.0830),
    ("two-stream", "10"): (0.0870, 0.1592),
}
REFERENCE_DRIFT = {
    ("loam", "04"): (2.3245, 0.0108),
    ("dual-subnet", "04"): (3.1012, 0.0177),
}


@dataclass(frozen=True)
class RmseReport:
    t_rel: float
    r_rel: float
    pairs: int


@dataclass(frozen=True)
class DriftReport:
    translation_pct: float
    rotation_deg_per_m: float
    segments: int
    lengths_used: tuple[float, ...]
    per_length: dict = field(default_factory=dict)
    too_short: bool = False


def rmse_relative(preds, truths) -> RmseReport:
    P = np.asarray(preds, dtype=float).reshape(-1, 6)
    G = np.asarray(truths, dtype=float).reshape(-1, 6)
    if len(P) != len(G):
        raise LengthMismatch(f"{len(P)} predictions but {len(G)} ground-truth poses")
    if len(P) == 0:
        raise EmptyInput("no pose pairs to score")
    dt = P[:, :3] - G[:, :3]
    dq = pc.wrap_angle(P[:, 3:] - G[:, 3:])
    t = math.sqrt(float(np.mean(np.sum(dt * dt, axis=1))))
    r = math.sqrt(float(np.mean(np.sum(dq * dq, axis=1))))
    return RmseReport(t, r, len(P))


def path_distances(traj: Sequence[pc.Pose]) -> np.ndarray:
    t = np.array([p.translation for p in traj])
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_drift(
    pred_traj: Sequence[pc.Pose],
    gt_traj: Sequence[pc.Pose],
    lengths: Sequence[float] = SEGMENT_LENGTHS,
    step: int = 1,
) -> DriftReport:
    """Average segment drift; ``step`` is the stride between start frames."""
    if len(pred_traj) != len(gt_traj):
        raise LengthMismatch(f"{len(pred_traj)} predicted poses but {len(gt_traj)} ground-truth poses")
    if len(gt_traj) < 2:
        raise EmptyInput("trajectories need at least two poses")
    dist = path_distances(gt_traj)
    Rg = np.array([p.rotation for p in gt_traj])
    tg = np.array([p.translation for p in gt_traj])
    Rp = np.array([p.rotation for p in pred_traj])
    tp = np.array([p.translation for p in pred_traj])
    t_errs, r_errs = [], []
    per_length = {}
    for length in lengths:
        first = np.arange(0, len(gt_traj), step)
        # first frame whose path distance exceeds the segment end
        last = np.searchsorted(dist, dist[first] + length, side="right")
        ok = last < len(gt_traj)
        if not ok.any():
            continue
        f, l = first[ok], last[ok]
        Rf_g, Rf_p = Rg[f].transpose(0, 2, 1), Rp[f].transpose(0, 2, 1)
        dR_g = Rf_g @ Rg[l]
        dR_p = Rf_p @ Rp[l]
        dt_g = np.einsum("nij,nj->ni", Rf_g, tg[l] - tg[f])
        dt_p = np.einsum("nij,nj->ni", Rf_p, tp[l] - tp[f])
        # error = inverse(predicted delta) @ ground-truth delta
        dR_pT = dR_p.transpose(0, 2, 1)
        eR = dR_pT @ dR_g
        et = np.einsum("nij,nj->ni", dR_pT, dt_g - dt_p)
        lt = np.linalg.norm(et, axis=1) / length
        lr = np.array([pc.rotation_angle(R) for R in eR]) / length
        per_length[float(length)] = (100.0 * float(lt.mean()), math.degrees(float(lr.mean())), len(lt))
        t_errs.append(lt)
        r_errs.append(lr)
    if not t_errs:
        return DriftReport(0.0, 0.0, 0, (), {}, too_short=True)
    t_all, r_all = np.concatenate(t_errs), np.concatenate(r_errs)
    return DriftReport(
        translation_pct=100.0 * float(t_all.mean()),
        rotation_deg_per_m=math.degrees(float(r_all.mean())),
        segments=len(t_all),
        lengths_used=tuple(sorted(per_length)),
        per_length=per_length,
    )


def format_report(name: str, rmse: RmseReport | None, drift: DriftReport | None) -> str:
    """Fixed-width table for standard output."""
    lines = [f"{'run':<16} {'pairs':>6} {'t_rel[m]':>10} {'r_rel[rad]':>11} {'t_drift[%]':>11} {'r_drift[deg/m]':>15}"]
    pairs = f"{rmse.pairs:>6d}" if rmse else f"{'-':>6}"
    t = f"{rmse.t_rel:>10.4f}" if rmse else f"{'-':>10}"
    r = f"{rmse.r_rel:>11.4f}" if rmse else f"{'-':>11}"
    if drift is None or drift.too_short:
        td, rd = f"{'n/a':>11}", f"{'n/a':>15}"
    else:
        td, rd = f"{drift.translation_pct:>11.4f}", f"{drift.rotation_deg_per_m:>15.4f}"
    lines.append(f"{name:<16} {pairs} {t} {r} {td} {rd}")
    return "\n".join(lines) + "\n"


def report_csv(name: str, rmse: RmseReport | None, drift: DriftReport | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "pairs", "t_rel_m", "r_rel_rad", "t_drift_pct", "r_drift_deg_per_m", "drift_segments"])
    has_drift = drift is not None and not drift.too_short
    w.writerow(
        [
            name,
            rmse.pairs if rmse else "",
            f"{rmse.t_rel:.6f}" if rmse else "",
            f"{rmse.r_rel:.6f}" if rmse else "",
            f"{drift.translation_pct:.6f}" if has_drift else "",
            f"{drift.rotation_deg_per_m:.6f}" if has_drift else "",
            drift.segments if drift is not None else 0,
        ]
    )
    return buf.getvalue()


def export_trajectory_csv(path, traj: Sequence[pc.Pose]) -> None:
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["frame", "x", "y", "z"])
            for i, p in enumerate(traj):
                w.writerow([i, *(repr(float(v)) for v in p.translation)])
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e.strerror}") from e


def read_trajectory_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)


def _polyline(xy: np.ndarray) -> str:
    return " ".join(f"{x:.4f},{y:.4f}" for x, y in xy)


def trajectory_svg(pred: Sequence[pc.Pose], gt: Sequence[pc.Pose] | None = None, size: int = 480) -> str:
    """Top-down x-z view; ground truth in black, prediction in red."""
    tracks = {"prediction": np.array([p.translation for p in pred]).reshape(-1, 3)}
    if gt is not None:
        tracks["ground truth"] = np.array([p.translation for p in gt]).reshape(-1, 3)
    allxz = np.concatenate([t[:, [0, 2]] for t in tracks.values()])
    lo, hi = allxz.min(axis=0), allxz.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    margin = 0.05 * span + 1.0
    x0, z0 = lo[0] - margin, lo[1] - margin
    extent = span + 2 * margin
    scale = size / extent
    styles = {"ground truth": "#000000", "prediction": "#d62728"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}" '
        f'viewBox="0 0 {size} {size + 40}">',
        f'<rect width="{size}" height="{size + 40}" fill="white"/>',
    ]
    for name in ("ground truth", "prediction"):
        if name not in tracks:
            continue
        xz = tracks[name][:, [0, 2]]
        # svg y grows downward; forward (+z) points up
        pix = np.column_stack([(xz[:, 0] - x0) * scale, size - (xz[:, 1] - z0) * scale])
        parts.append(
            f'<polyline class="{name.replace(" ", "-")}" fill="none" stroke="{styles[name]}" '
            f'stroke-width="1.5" points="{_polyline(pix)}"/>'
        )
    for i, name in enumerate(n for n in ("ground truth", "prediction") if n in tracks):
        y = size + 15 + 18 * i
        parts.append(f'<line x1="10" y1="{y}" x2="40" y2="{y}" stroke="{styles[name]}" stroke-width="2"/>')
        parts.append(f'<text x="48" y="{y + 4}" font-size="12" font-family="sans-serif">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_trajectory_svg(path, pred: Sequence[pc.Pose], gt: Sequence[pc.Pose] | None = None) -> None:
    try:
        with open(path, "w") as f:
            f.write(trajectory_svg(pred, gt))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e.strerror}") from e
