"""Dual sub-network pose regressor.

Two convolutional sub-networks read the same stacked frame pair.  The
translation net sees the 2-channel stack, the orientation net (a FlowNetS-like
contraction) sees the 6-channel replicated stack.  Each regresses the full
6-DOF relative pose; the fused prediction takes ``p`` from the translation
net and ``q`` from the orientation net.

Layer layout of one sub-network::

    conv (+ leaky ReLU 0.1) x len(convs)
    flatten
    trunk:   linear -> leaky ReLU -> dropout, per width in ``trunk``
    branch:  linear -> leaky ReLU, per width in ``branch_hidden``
             linear -> 3        (two branches: translation, orientation)
             linear -> 6        (single-branch ablation)

There are no pooling or batch-normalization layers, and configs that ask for
them are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from . import tensor as T
from .tensor import Tensor

FORBIDDEN_LAYERS = ("pool", "maxpool", "avgpool", "batchnorm", "batch_norm", "bn")
MODES = ("dual", "translation", "orientation")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None
    slope: float = 0.1

    def __post_init__(self):
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1 or self.padding < 0:
            raise ConfigError(f"invalid conv spec {self}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = T.conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = T.conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"{self} maps {h}x{w} to {ho}x{wo}")
        return ho, wo


def conv_stack(in_channels: int, layers) -> tuple[ConvSpec, ...]:
    """``layers`` is a list of ``(out_channels, kernel, stride)``."""
    specs, c = [], in_channels
    for out, k, s in layers:
        specs.append(ConvSpec(c, out, k, s))
        c = out
    return tuple(specs)


@dataclass(frozen=True)
class SubNetConfig:
    name: str
    convs: tuple[ConvSpec, ...]
    trunk: tuple[int, ...] = (512,)
    branch_hidden: tuple[int, ...] = (128,)
    branches: int = 2
    dropout: float = 0.5
    fc_slope: float = 0.1
    # extra factor on the output layers' initial weights
    head_init_gain: float = 1.0

    def __post_init__(self):
        if self.branches not in (1, 2):
            raise ConfigError("a sub-network has one (6-output) or two (3+3) heads")
        if not self.convs:
            raise ConfigError("a sub-network needs at least one convolution")
        for a, b in zip(self.convs[:-1], self.convs[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError(f"{self.name}: channel mismatch between {a} and {b}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if not self.head_init_gain >= 0:
            raise ConfigError("head_init_gain must be non-negative")

    @property
    def in_channels(self) -> int:
        return self.convs[0].in_channels

    def layer_kinds(self) -> list[str]:
        kinds = ["conv", "leaky_relu"] * len(self.convs) + ["flatten"]
        kinds += ["linear", "leaky_relu", "dropout"] * len(self.trunk)
        kinds += ["linear", "leaky_relu"] * (self.branches * len(self.branch_hidden))
        kinds += ["linear"] * self.branches
        return kinds

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubNetConfig":
        d = dict(d)
        for key in d:
            if any(f in key.lower() for f in FORBIDDEN_LAYERS):
                raise ConfigError(f"{d.get('name', 'sub-network')}: pooling/batch-norm layers are not allowed ({key})")
        convs = []
        for c in d.pop("convs"):
            c = dict(c)
            kind = str(c.pop("type", "conv")).lower()
            if kind != "conv":
                raise ConfigError(f"only convolutional layers may appear in the conv stack, got {kind!r}")
            convs.append(ConvSpec(**c))
        try:
            return cls(
                convs=tuple(convs),
                trunk=tuple(d.pop("trunk", (512,))),
                branch_hidden=tuple(d.pop("branch_hidden", (128,))),
                **d,
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None


def assert_no_pooling_or_batchnorm(cfg: SubNetConfig) -> None:
    bad = [k for k in cfg.layer_kinds() if k in FORBIDDEN_LAYERS]
    if bad:
        raise ConfigError(f"{cfg.name}: forbidden layers {bad}")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int]
    translation: SubNetConfig | None
    orientation: SubNetConfig | None
    mode: str = "dual"
    # subtracted from the [0, 1] inputs before the first convolution
    input_offset: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode in ("dual", "translation") and self.translation is None:
            raise ConfigError(f"mode {self.mode!r} needs a translation sub-network")
        if self.mode in ("dual", "orientation") and self.orientation is None:
            raise ConfigError(f"mode {self.mode!r} needs an orientation sub-network")
        for sub in self.subnets():
            assert_no_pooling_or_batchnorm(sub)

    def subnets(self) -> list[SubNetConfig]:
        return [s for s in (self.translation, self.orientation) if s is not None]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "mode": self.mode,
            "translation": None if self.translation is None else self.translation.to_dict(),
            "orientation": None if self.orientation is None else self.orientation.to_dict(),
            "input_offset": self.input_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_shape=tuple(d["input_shape"]),
            translation=None if d.get("translation") is None else SubNetConfig.from_dict(d["translation"]),
            orientation=None if d.get("orientation") is None else SubNetConfig.from_dict(d["orientation"]),
            mode=d.get("mode", "dual"),
            input_offset=float(d.get("input_offset", 0.0)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_variant(self, mode: str = "dual", branches: int | None = None, dropout: float | None = None):
        """Ablation variants: individual sub-network and/or single FC branch."""
        def adjust(s):
            if s is None:
                return None
            if branches is not None:
                s = replace(s, branches=branches)
            if dropout is not None:
                s = replace(s, dropout=dropout)
            return s

        t = adjust(self.translation) if mode in ("dual", "translation") else None
        o = adjust(self.orientation) if mode in ("dual", "orientation") else None
        return ModelConfig(self.input_shape, t, o, mode, self.input_offset)


def _flownet_layers(scale: int):
    return [
        (64 // scale, 7, 2),
        (128 // scale, 5, 2),
        (256 // scale, 5, 2),
        (256 // scale, 3, 1),
        (512 // scale, 3, 2),
        (512 // scale, 3, 1),
        (512 // scale, 3, 2),
        (512 // scale, 3, 1),
        (1024 // scale, 3, 2),
    ]


def full_profile() -> ModelConfig:
    return ModelConfig(
        input_shape=(64, 1024),
        translation=SubNetConfig(
            "translation", conv_stack(2, [(64, 3, 2), (128, 3, 2), (256, 3, 2), (512, 3, 2)]), (512,), (128,),
            head_init_gain=0.1,
        ),
        orientation=SubNetConfig("orientation", conv_stack(6, _flownet_layers(1)), (512,), (128,), head_init_gain=0.1),
        input_offset=0.5,
    )


def tiny_profile() -> ModelConfig:
    return ModelConfig(
        input_shape=(16, 64),
        translation=SubNetConfig(
            "translation", conv_stack(2, [(16, 3, 2), (16, 3, 2), (32, 3, 2), (64, 3, 2)]), (64,), (32,),
            head_init_gain=0.1,
        ),
        orientation=SubNetConfig("orientation", conv_stack(6, _flownet_layers(4)), (64,), (32,), head_init_gain=0.1),
        input_offset=0.5,
    )


PROFILES = {"tiny": tiny_profile, "full": full_profile}


def profile(name: str) -> ModelConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


class SubNet:
    def __init__(self, cfg: SubNetConfig, input_shape: tuple[int, int], rng: np.random.Generator, dtype=np.float32):
        assert_no_pooling_or_batchnorm(cfg)
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        h, w = input_shape
        for i, spec in enumerate(cfg.convs):
            h, w = spec.output_size(h, w)
            fan_in = spec.in_channels * spec.kernel**2
            self._add(f"conv{i}.weight", _kaiming(rng, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), fan_in, spec.slope), dtype)
            self._add(f"conv{i}.bias", np.zeros(spec.out_channels), dtype)
        self.feature_shape = (cfg.convs[-1].out_channels, h, w)
        width = int(np.prod(self.feature_shape))
        for i, n in enumerate(cfg.trunk):
            self._add(f"trunk{i}.weight", _kaiming(rng, (n, width), width, cfg.fc_slope), dtype)
            self._add(f"trunk{i}.bias", np.zeros(n), dtype)
            width = n
        heads = ("head",) if cfg.branches == 1 else ("trans", "orient")
        out = 6 if cfg.branches == 1 else 3
        for head in heads:
            bw = width
            for i, n in enumerate(cfg.branch_hidden):
                self._add(f"{head}.fc{i}.weight", _kaiming(rng, (n, bw), bw, cfg.fc_slope), dtype)
                self._add(f"{head}.fc{i}.bias", np.zeros(n), dtype)
                bw = n
            self._add(f"{head}.out.weight", cfg.head_init_gain * _kaiming(rng, (out, bw), bw, 1.0), dtype)
            self._add(f"{head}.out.bias", np.zeros(out), dtype)
        self.heads = heads

    def _add(self, name: str, value: np.ndarray, dtype) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=f"{self.cfg.name}.{name}")

    def _fc(self, x: Tensor, prefix: str) -> Tensor:
        x = T.linear(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])
        return T.leaky_relu(x, self.cfg.fc_slope)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``(N, C, H, W)`` -> ``(N, 6)`` full pose from both heads."""
        x = T.as_tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"{self.cfg.name}: expected (N, {self.cfg.in_channels}, H, W) input, got {x.data.shape}")
        for i, spec in enumerate(self.cfg.convs):
            x = T.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], spec.stride, spec.padding)
            x = T.leaky_relu(x, spec.slope)
        if x.data.shape[1:] != self.feature_shape:
            raise ShapeMismatch(f"{self.cfg.name}: feature map {x.data.shape[1:]} != expected {self.feature_shape}")
        x = T.flatten(x)
        for i in range(len(self.cfg.trunk)):
            # dropout on the shared trunk only
            x = T.dropout(self._fc(x, f"trunk{i}"), self.cfg.dropout, training, rng)
        outs = []
        for head in self.heads:
            h = x
            for i in range(len(self.cfg.branch_hidden)):
                h = self._fc(h, f"{head}.fc{i}")
            outs.append(T.linear(h, self.params[f"{head}.out.weight"], self.params[f"{head}.out.bias"]))
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)


def _kaiming(rng: np.random.Generator, shape, fan_in: int, slope: float) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


@dataclass
class ModelOutput:
    translation: Tensor | None
    orientation: Tensor | None

    def fused(self) -> np.ndarray:
        if self.translation is None:
            return self.orientation.data.copy()
        if self.orientation is None:
            return self.translation.data.copy()
        return np.concatenate([self.translation.data[:, :3], self.orientation.data[:, 3:]], axis=1)


class PoseModel:
    """Translation and orientation sub-networks plus the fusion rule."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.translation = SubNet(config.translation, config.input_shape, rng, dtype) if config.translation else None
        self.orientation = SubNet(config.orientation, config.input_shape, rng, dtype) if config.orientation else None

    def subnets(self) -> dict[str, SubNet]:
        return {k: v for k, v in (("translation", self.translation), ("orientation", self.orientation)) if v}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{k}.{n}", p) for k, net in self.subnets().items() for n, p in net.params.items()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def forward(self, pairs, training: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        """``pairs`` is the ``(N, 2, H, W)`` stack scaled to [0, 1]."""
        pairs = np.asarray(pairs, dtype=self.dtype)
        if pairs.ndim == 3:
            pairs = pairs[None]
        if pairs.ndim != 4 or pairs.shape[1] != 2 or pairs.shape[2:] != tuple(self.config.input_shape):
            raise ShapeMismatch(f"expected (N, 2, {self.config.input_shape[0]}, {self.config.input_shape[1]}) pairs, got {pairs.shape}")
        if self.config.input_offset:
            pairs = pairs - self.dtype.type(self.config.input_offset)
        t = self.translation.forward(pairs, training, rng) if self.translation else None
        o = None
        if self.orientation:
            o = self.orientation.forward(np.repeat(pairs, 3, axis=1), training, rng)
        return ModelOutput(t, o)

    def predict(self, pairs, batch_size: int = 64) -> np.ndarray:
        """Fused ``(N, 6)`` predictions in eval mode (dropout off)."""
        pairs = np.asarray(pairs)
        if pairs.ndim == 3:
            pairs = pairs[None]
        out = [self.forward(pairs[i : i + batch_size]).fused() for i in range(0, len(pairs), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 6))

    def summary(self) -> str:
        lines = [f"mode={self.config.mode} input={self.config.input_shape} params={self.parameter_count():,}"]
        for name, net in self.subnets().items():
            n = sum(p.data.size for p in net.params.values())
            lines.append(f"  {name}: {len(net.cfg.convs)} convs -> {net.feature_shape}, trunk {net.cfg.trunk}, "
                         f"branches {net.cfg.branches}x{net.cfg.branch_hidden}, dropout {net.cfg.dropout}, {n:,} params")
        return "\n".join(lines)


def loss_6dof(pred, truth, k: float = 100.0) -> Tensor:
    """``mean((p - p_gt)^2) + k * mean((q - q_gt)^2)``, averaged over the batch."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64), requires_grad=True)
    return T.pose_mse(pred, truth, k)


def total_loss(output: ModelOutput, truth, k: float = 100.0) -> tuple[Tensor, dict[str, float]]:
    """Sum of the per-sub-network losses, each on the full 6-DOF label."""
    parts = {}
    total = None
    for name in ("translation", "orientation"):
        pred = getattr(output, name)
        if pred is None:
            continue
        loss = loss_6dof(pred, truth, k)
        parts[name] = float(loss.data)
        total = loss if total is None else T.add(total, loss)
    return total, parts
