"""Command-line entry point: ``pcodom <command> [flags]``.

Commands: ``encode``, ``prep``, ``synth``, ``train``, ``infer``, ``eval``.

Exit codes: 0 ok, 1 other failure, 2 I/O failure, 3 malformed data,
4 numeric failure, 5 incompatible config or checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import pose as pc
from .encoding import ProjectionConfig, project_cloud, stack_pair, write_pgm
from .errors import ConfigMismatch, EmptyScanWarning, IoFailure, PcoError
from .evaluation import export_trajectory_csv, export_trajectory_svg, format_report, kitti_drift, report_csv, rmse_relative
from .kitti import DatasetLayout, SequenceReader, iter_encoded, load_pair_arrays, read_kitti_poses, read_velodyne_bin, write_kitti_trajectory
from .network.checkpoint import load_checkpoint
from .network.model import PoseModel, profile
from .synthetic import MotionSpec, SceneSpec, generate_sequence, write_kitti_layout
from .trainer import PairDataset, TrainConfig, preset, train

log = logging.getLogger("pcodom")

EXIT_OK = 0


def projection_for(name: str) -> ProjectionConfig:
    return ProjectionConfig.full() if name == "full" else ProjectionConfig.tiny()


def _header(args, **resolved) -> None:
    """Reproducibility header: every flag plus the resolved configuration."""
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("pcodom %s %s", __version__, args.command)
    log.info("flags %s", json.dumps(flags, sort_keys=True, default=str))
    log.info("euler_convention %s", pc.DEFAULT_CONVENTION.tag)
    for k, v in resolved.items():
        log.info("%s %s", k, v if isinstance(v, str) else json.dumps(v, sort_keys=True, default=str))


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {path}: {e.strerror}") from e
    return path


def cmd_encode(args) -> int:
    cfg = projection_for(args.profile)
    _header(args, projection=asdict(cfg))
    src = Path(args.input)
    if not src.is_dir():
        raise IoFailure(f"input directory not found: {src}")
    out = _mkdir(Path(args.out))
    scans = sorted(src.glob("*.bin"))
    if not scans:
        warnings.warn(f"no .bin scans in {src}", EmptyScanWarning, stacklevel=1)
        log.warning("no .bin scans in %s; nothing written", src)
    lines = []
    for path in scans:
        img = project_cloud(read_velodyne_bin(path), cfg)
        write_pgm(out / f"{path.stem}.pgm", img)
        lines.append(json.dumps({"scan": path.name, **img.stats.as_dict()}, sort_keys=True))
    if scans:
        (out / "stats.jsonl").write_text("".join(line + "\n" for line in lines))
    log.info("encoded %d scans into %s", len(scans), out)
    return EXIT_OK


def cmd_prep(args) -> int:
    cfg = projection_for(args.profile)
    _header(args, projection=asdict(cfg))
    x, y = load_pair_arrays(args.root, args.sequences, cfg, use_calib=not args.no_calib)
    if len(y) == 0:
        raise IoFailure(f"no pairs found under {args.root} for sequences {args.sequences}")
    out = Path(args.out)
    _mkdir(out.parent)
    PairDataset(x, y).save(out)
    log.info("wrote %d pairs to %s", len(y), out)
    return EXIT_OK


def motion_from_args(args) -> MotionSpec:
    spec = MotionSpec(seed=args.seed)
    kw = {"kind": args.motion, "seed": args.seed}
    for name in ("mean", "sigma", "bound", "amplitude"):
        val = getattr(args, name)
        if val is not None:
            kw[name] = tuple(val)
    return MotionSpec(**{**asdict(spec), **kw})


def cmd_synth(args) -> int:
    scene = SceneSpec(seed=args.seed, range_noise=args.noise, projection=projection_for(args.profile))
    motion = motion_from_args(args)
    _header(args, scene={k: v for k, v in asdict(scene).items() if k != "primitives"}, motion=asdict(motion))
    seq = generate_sequence(scene, motion, args.frames)
    write_kitti_layout(Path(args.out), args.sequence, seq)
    log.info("wrote %d frames of sequence %s under %s", args.frames, args.sequence, args.out)
    return EXIT_OK


def _load_dataset(args, cfg: ProjectionConfig) -> PairDataset:
    if args.data is not None:
        data = PairDataset.load(args.data)
        if data.inputs.shape[2:] != cfg.shape:
            raise ConfigMismatch(f"{args.data}: images are {data.inputs.shape[2:]}, profile expects {cfg.shape}")
        return data
    x, y = load_pair_arrays(args.root, args.sequences, cfg, use_calib=not args.no_calib)
    if len(y) == 0:
        raise IoFailure(f"no pairs found under {args.root} for sequences {args.sequences}")
    return PairDataset(x, y)


def _train_config(args) -> TrainConfig:
    overrides = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr}
    base = preset(args.profile)
    if args.config is not None:
        return TrainConfig.from_file(args.config, base, **overrides)
    return TrainConfig.from_text("", base, **overrides)


def _model_config(args, cfg: TrainConfig | None = None):
    mc = profile(args.profile)
    return mc.with_variant(args.mode, branches=args.branches, dropout=None if cfg is None else cfg.dropout)


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    mc = _model_config(args, tcfg)
    _header(args, train_config=tcfg.to_text().strip().replace("\n", "; "), model_digest=mc.digest())
    data = _load_dataset(args, projection_for(args.profile))
    model = PoseModel(mc, seed=tcfg.seed)
    log.info("%s", model.summary())
    result = train(model, data, tcfg, out_dir=Path(args.out), resume=args.resume)
    means = result.epoch_means
    log.info("first epoch mean loss %.6f, last %.6f", means[0], means[-1])
    return EXIT_OK


def _write_relative_csv(path: Path, rel: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pair", "x", "y", "z", "rx", "ry", "rz"])
        for i, v in enumerate(rel):
            w.writerow([i, *(repr(float(a)) for a in v)])


def cmd_infer(args) -> int:
    expected = _model_config(args) if args.profile_given else None
    model, meta = load_checkpoint(args.checkpoint, expected=expected)
    _header(args, model_digest=model.config.digest(), checkpoint_epoch=meta.get("epoch"))
    cfg = projection_for(args.profile)
    if tuple(model.config.input_shape) != cfg.shape:
        raise ConfigMismatch(f"checkpoint expects {tuple(model.config.input_shape)} images, profile gives {cfg.shape}")
    reader = SequenceReader(DatasetLayout(Path(args.root)), args.sequence, use_calib=not args.no_calib)
    rel, chunk = [], []
    prev = None
    for img in iter_encoded(reader, cfg):
        if prev is not None:
            chunk.append(stack_pair(prev, img).translation)
            if len(chunk) == 64:
                rel.append(model.predict(np.stack(chunk)))
                chunk = []
        prev = img
    if chunk:
        rel.append(model.predict(np.stack(chunk)))
    rel = np.concatenate(rel) if rel else np.zeros((0, 6))
    # predictions live in the sensor frame; map back through the extrinsic
    steps = [pc.vec6_to_pose(v) for v in rel]
    if reader.extrinsic is not None:
        tr = reader.extrinsic
        steps = [tr @ s @ pc.invert(tr) for s in steps]
    start = reader.poses[0] if reader.poses else pc.Pose.identity()
    traj = pc.integrate_trajectory(start, steps)
    out = _mkdir(Path(args.out))
    _write_relative_csv(out / "relative.csv", rel)
    write_kitti_trajectory(out / f"{args.sequence}.txt", traj)
    log.info("predicted %d relative poses; trajectory in %s", len(rel), out / f"{args.sequence}.txt")
    return EXIT_OK


def cmd_eval(args) -> int:
    _header(args)
    pred = read_kitti_poses(args.pred)
    gt = read_kitti_poses(args.gt)
    rmse = rmse_relative(
        [pc.pose_to_vec6(r) for r in pc.relative_poses(pred)],
        [pc.pose_to_vec6(r) for r in pc.relative_poses(gt)],
    )
    drift = kitti_drift(pred, gt)
    sys.stdout.write(format_report(args.name, rmse, drift))
    if args.out is not None:
        out = _mkdir(Path(args.out))
        (out / "report.csv").write_text(report_csv(args.name, rmse, drift))
        export_trajectory_csv(out / "trajectory.csv", pred)
        export_trajectory_svg(out / "trajectory.svg", pred, gt)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcodom", description="Point-cloud odometry from panoramic depth images.")
    p.add_argument("--version", action="version", version=f"pcodom {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--profile", choices=("tiny", "full"), default=None, help="network/projection size (default tiny)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", type=Path, default=None, help="flat key = value training config")
        sp.add_argument("--out", type=Path, required=out_required)

    sp = sub.add_parser("encode", help="scans -> PGM depth images + stats.jsonl")
    common(sp)
    sp.add_argument("--input", type=Path, required=True, help="directory of .bin scans")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("prep", help="KITTI sequences -> encoded pair dataset (.npz)")
    common(sp)
    sp.add_argument("--root", type=Path, required=True)
    sp.add_argument("--sequences", nargs="+", required=True)
    sp.add_argument("--no-calib", action="store_true", help="ignore calib.txt (identity extrinsic)")
    sp.set_defaults(func=cmd_prep)

    sp = sub.add_parser("synth", help="write a synthetic sequence in KITTI layout")
    common(sp)
    sp.add_argument("--sequence", default="00")
    sp.add_argument("--frames", type=int, default=201)
    sp.add_argument("--noise", type=float, default=0.02, help="range noise sigma in meters")
    sp.add_argument("--motion", choices=("constant", "sinusoidal", "random_walk"), default="random_walk")
    for name in ("mean", "sigma", "bound", "amplitude"):
        sp.add_argument(f"--{name}", type=float, nargs=6, default=None, metavar="V")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model; writes checkpoints and loss.csv")
    common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="pair dataset from 'prep'")
    src.add_argument("--root", type=Path, help="KITTI-layout root")
    sp.add_argument("--sequences", nargs="+", default=["00"])
    sp.add_argument("--no-calib", action="store_true")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    _variant_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="predict relative poses and integrate a trajectory")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--root", type=Path, required=True)
    sp.add_argument("--sequence", required=True)
    sp.add_argument("--no-calib", action="store_true")
    _variant_flags(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score a predicted trajectory against ground truth")
    common(sp, out_required=False)
    sp.add_argument("--pred", type=Path, required=True, help="predicted KITTI pose file")
    sp.add_argument("--gt", type=Path, required=True, help="ground-truth KITTI pose file")
    sp.add_argument("--name", default="run")
    sp.set_defaults(func=cmd_eval)
    return p


def _variant_flags(sp) -> None:
    sp.add_argument("--mode", choices=("dual", "translation", "orientation"), default="dual",
                    help="both sub-networks (fused) or one sub-network alone")
    sp.add_argument("--branches", type=int, choices=(1, 2), default=None,
                    help="FC output branches per sub-network (1 = single 6-output head)")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.profile_given = args.profile is not None
    if args.profile is None:
        args.profile = "tiny"
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except PcoError as e:
        log.error("%s", e)
        return e.exit_code
    except FileNotFoundError as e:
        log.error("file not found: %s", e.filename)
        return IoFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
