"""Supervised training: Adam, step-halving learning rate, seeded shuffling.

Randomness is derived per epoch from ``(seed, epoch)``, so a run resumed from
an epoch checkpoint continues bit-for-bit like an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pose as pc
from .errors import ConfigError, EmptyInput, IoFailure, NonFiniteLoss, ShapeMismatch
from .evaluation import RmseReport, rmse_relative
from .network.checkpoint import load_checkpoint, save_checkpoint
from .network.model import PoseModel, total_loss

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "lr", "loss_total", "loss_trans_subnet", "loss_orient_subnet")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    lr_halving_epochs: int = 10
    k: float = 100.0
    seed: int = 0
    dropout: float = 0.5
    clip_norm: float | None = 10.0
    mirror: bool = False

    def __post_init__(self):
        for name in ("lr", "eps", "batch_size", "epochs", "lr_halving_epochs", "k"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive (or none)")

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None, **overrides) -> "TrainConfig":
        """Parse flat ``key = value`` lines (``#`` comments) on top of ``base``; overrides win."""
        types = {f.name: f.type for f in fields(cls)}
        values = {} if base is None else asdict(base)
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise ConfigError(f"config line {lineno}: unknown or malformed entry {raw.strip()!r}")
            values[key] = val
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(k, v) for k, v in values.items()})

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None, **overrides) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise IoFailure(f"cannot read config {path}: {e.strerror}") from e
        return cls.from_text(text, base, **overrides)

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in asdict(self).items())


# Per-profile defaults.  The tiny network sees a few hundred synthetic pairs,
# so it trains faster, without dropout, and with mirrored scans for variety.
TRAIN_PRESETS = {
    "tiny": {"lr": 1e-3, "dropout": 0.0, "mirror": True},
    "full": {},
}


def preset(name: str) -> TrainConfig:
    try:
        return TrainConfig(**TRAIN_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}") from None


def _coerce(key: str, val):
    if not isinstance(val, str):
        return val
    if key == "clip_norm" and val.lower() in ("none", "off", ""):
        return None
    if key == "mirror":
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad value for {key}: {val!r}")
    try:
        return int(val) if key in ("batch_size", "epochs", "lr_halving_epochs", "seed") else float(val)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_epochs)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: OptimizerState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeMismatch(f"shape mismatch: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, OptimizerState(new_m, new_v, t)


class Adam:
    """Adam over named :class:`Tensor` parameters; moments keyed by name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def moments(self, name: str, like: np.ndarray):
        return self.m.get(name, np.zeros_like(like)), self.v.get(name, np.zeros_like(like))

    def load_moments(self, moments: dict, step: int) -> None:
        self.m = {k: m.copy() for k, (m, _) in moments.items()}
        self.v = {k: v.copy() for k, (_, v) in moments.items()}
        self.step_count = int(step)

    def step(self, named_params, lr: float) -> None:
        names = [n for n, _ in named_params]
        tensors = [p for _, p in named_params]
        params = [p.data for p in tensors]
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in tensors]
        state = OptimizerState(
            [self.moments(n, p)[0] for n, p in zip(names, params)],
            [self.moments(n, p)[1] for n, p in zip(names, params)],
            self.step_count,
        )
        new_params, state = adam_step(params, grads, state, lr, self.beta1, self.beta2, self.eps)
        for t, p in zip(tensors, new_params):
            t.data = p
        self.m = dict(zip(names, state.m))
        self.v = dict(zip(names, state.v))
        self.step_count = state.step


MIRROR = np.diag([1.0, -1.0, 1.0])


def mirror_labels(labels: np.ndarray, conv=pc.DEFAULT_CONVENTION) -> np.ndarray:
    """Relative poses of the world reflected through the sensor's x-z plane.

    The reflection ``M = diag(1, -1, 1)`` maps a motion ``(R, t)`` to
    ``(M R M, M t)``, which is again a proper rigid motion.
    """
    out = np.empty_like(labels, dtype=np.float64)
    for i, v in enumerate(labels):
        p = pc.vec6_to_pose(v, conv)
        out[i] = pc.pose_to_vec6(pc.Pose(MIRROR @ p.rotation @ MIRROR, MIRROR @ p.translation), conv)
    return out


def mirror_augment(inputs: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
    """Reflect a random half of the pairs left-to-right, labels adjusted to match.

    Azimuth ``theta`` becomes ``-theta``, which sends column ``r`` to
    ``W - 1 - r``; the images stay exact up to points on a column boundary.
    """
    flip = rng.random(len(inputs)) < 0.5
    if not flip.any():
        return inputs, labels
    inputs, labels = inputs.copy(), np.array(labels, dtype=np.float64)
    inputs[flip] = inputs[flip][..., ::-1]
    labels[flip] = mirror_labels(labels[flip])
    return inputs, labels


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


@dataclass
class PairDataset:
    """``inputs``: ``(N, 2, H, W)`` float32 in [0, 1]; ``labels``: ``(N, 6)``."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 6)
        if self.inputs.ndim != 4 or self.inputs.shape[1] != 2:
            raise ShapeMismatch(f"inputs must be (N, 2, H, W), got {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ShapeMismatch(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_pairs(cls, pairs) -> "PairDataset":
        pairs = list(pairs)
        if not pairs:
            raise EmptyInput("no sample pairs")
        return cls(np.stack([p.input.translation for p in pairs]), np.stack([p.label for p in pairs]))

    def subset(self, idx) -> "PairDataset":
        return PairDataset(self.inputs[idx], self.labels[idx])

    def save(self, path) -> None:
        np.savez(path, inputs=self.inputs, labels=self.labels)

    @classmethod
    def load(cls, path) -> "PairDataset":
        try:
            with np.load(path) as z:
                return cls(z["inputs"], z["labels"])
        except OSError as e:
            raise IoFailure(f"cannot read dataset {path}: {e}") from e


@dataclass
class TrainResult:
    model: PoseModel
    history: list[dict]
    epoch_means: list[float]


def _epoch_means(history: list[dict]) -> list[float]:
    sums: dict[int, list[float]] = {}
    for row in history:
        s = sums.setdefault(row["epoch"], [0.0, 0.0])
        s[0] += row["loss_total"] * row["batch"]
        s[1] += row["batch"]
    return [s[0] / s[1] for _, s in sorted(sums.items())]


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], row["step"], repr(row["lr"])] + [
                "" if row[k] is None else repr(row[k]) for k in HISTORY_FIELDS[3:]
            ])


def train(
    model: PoseModel,
    data: PairDataset,
    cfg: TrainConfig = TrainConfig(),
    out_dir=None,
    resume=None,
) -> TrainResult:
    """Train ``model`` in place.

    One optimizer step per batch (the last partial batch is kept), a
    checkpoint per epoch in ``out_dir`` plus the loss history CSV.  ``resume``
    names a checkpoint written by a previous call with the same config.
    """
    if len(data) == 0:
        raise EmptyInput("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    history: list[dict] = []
    start_epoch = 0
    if resume is not None:
        loaded, meta = load_checkpoint(resume, expected=model.config, optimizer=opt)
        for (_, dst), (_, src) in zip(model.named_parameters(), loaded.named_parameters()):
            dst.data = src.data
        history = list(meta.get("history", []))
        start_epoch = int(meta.get("epoch", -1)) + 1
        log.info("resuming from %s at epoch %d", resume, start_epoch)

    params = model.named_parameters()
    step = len(history)
    n = len(data)
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        aug_rng = np.random.default_rng([cfg.seed, epoch, 2])
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            if cfg.mirror:
                x, y = mirror_augment(x, y, aug_rng)
            model.zero_grad()
            output = model.forward(x, training=True, rng=drop_rng)
            loss, parts = total_loss(output, y, cfg.k)
            value = float(loss.data)
            if not math.isfinite(value):
                dump = None
                if out is not None:
                    dump = out / f"nonfinite_epoch{epoch:03d}_step{step:06d}.npz"
                    np.savez(dump, inputs=x, labels=y, indices=idx)
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, step {step}", dump)
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm([p for _, p in params], cfg.clip_norm)
            opt.step(params, lr)
            history.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "loss_total": value,
                    "loss_trans_subnet": parts.get("translation"),
                    "loss_orient_subnet": parts.get("orientation"),
                    "batch": len(idx),
                }
            )
            step += 1
        means = _epoch_means(history)
        log.info("epoch %d lr %.3g mean loss %.6f", epoch, lr, means[-1])
        if out is not None:
            meta = {"epoch": epoch, "train_config": asdict(cfg), "history": history}
            save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", model, meta, optimizer=opt)
            save_checkpoint(out / "last.ckpt", model, meta, optimizer=opt)
            write_history_csv(out / "loss.csv", history)
    return TrainResult(model, history, _epoch_means(history))


@dataclass
class EvalResult:
    predictions: np.ndarray
    report: RmseReport


def evaluate(model: PoseModel, data: PairDataset, batch_size: int = 64) -> EvalResult:
    """Fused predictions in eval mode and their relative-pose RMSE."""
    preds = model.predict(data.inputs, batch_size)
    return EvalResult(preds, rmse_relative(preds, data.labels))


def zero_baseline(data: PairDataset) -> RmseReport:
    """Scores of a model that always predicts no motion."""
    return rmse_relative(np.zeros_like(data.labels), data.labels)


def with_dropout(model_config, cfg: TrainConfig):
    return model_config.with_variant(model_config.mode, dropout=cfg.dropout)

