"""Self-describing binary checkpoints.

Layout::

    b"PCOCKPT1"                      magic
    uint32 little-endian             header length in bytes
    header (UTF-8 JSON)              {"config_digest", "config", "dtype", "blobs": [{"name", "shape"}], "meta"}
    blob data                        each blob little-endian, in header order, no padding

Model parameters come first in declaration order; optimizer moments, when
saved, follow as ``adam.m/<param>`` and ``adam.v/<param>``.  The same
container without a ``config`` entry is the named-blob format accepted by
:func:`import_flownet_weights`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CompatibilityError, ConfigError, DigestMismatch, FormatError, IoFailure
from .model import ModelConfig, PoseModel

MAGIC = b"PCOCKPT1"
FLOWNET_CONV_NAMES = ("conv1", "conv2", "conv3", "conv3_1", "conv4", "conv4_1", "conv5", "conv5_1", "conv6")


def write_blobs(path, blobs: dict[str, np.ndarray], header: dict, dtype="<f4") -> None:
    dtype = np.dtype(dtype).newbyteorder("<")
    header = dict(header, dtype=dtype.str, blobs=[{"name": k, "shape": list(v.shape)} for k, v in blobs.items()])
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            for v in blobs.values():
                f.write(np.ascontiguousarray(v, dtype=dtype).tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e.strerror}") from e


def read_blobs(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e.strerror}") from e
    if raw[:8] != MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    dtype = np.dtype(header["dtype"])
    pos = 12 + n
    blobs = {}
    for b in header["blobs"]:
        count = int(np.prod(b["shape"], dtype=np.int64))
        end = pos + count * dtype.itemsize
        if end > len(raw):
            raise FormatError(f"{path}: truncated at blob {b['name']}")
        blobs[b["name"]] = np.frombuffer(raw[pos:end], dtype=dtype).reshape(b["shape"]).astype(dtype.newbyteorder("="))
        pos = end
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, blobs


def save_checkpoint(path, model: PoseModel, meta: dict | None = None, optimizer=None) -> None:
    blobs = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        for name, p in model.named_parameters():
            m, v = optimizer.moments(name, p.data)
            blobs[f"adam.m/{name}"] = m
            blobs[f"adam.v/{name}"] = v
        meta = dict(meta or {}, adam_step=optimizer.step_count)
    header = {"config_digest": model.config.digest(), "config": model.config.to_dict(), "meta": meta or {}}
    write_blobs(path, blobs, header, dtype=model.dtype)


def load_checkpoint(path, expected: ModelConfig | None = None, optimizer=None) -> tuple[PoseModel, dict]:
    """Rebuild the model stored in ``path``.

    Raises :class:`DigestMismatch` if ``expected`` is given and its digest
    differs from the stored one.  Optimizer moments are restored into
    ``optimizer`` when both are present.
    """
    header, blobs = read_blobs(path)
    if "config" not in header:
        raise FormatError(f"{path}: named-blob file without a model config")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (ConfigError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad model config ({e})") from None
    if config.digest() != header["config_digest"]:
        raise DigestMismatch(f"{path}: stored config does not match its digest")
    if expected is not None and expected.digest() != header["config_digest"]:
        raise DigestMismatch(
            f"{path}: checkpoint config digest {header['config_digest'][:12]} != expected {expected.digest()[:12]}"
        )
    model = PoseModel(config, seed=0, dtype=np.dtype(header["dtype"]).newbyteorder("="))
    for name, p in model.named_parameters():
        if name not in blobs or blobs[name].shape != p.data.shape:
            raise CompatibilityError(f"{path}: parameter {name} missing or mis-shaped")
        p.data = blobs[name].copy()
    meta = header.get("meta", {})
    if optimizer is not None and "adam_step" in meta:
        optimizer.load_moments(
            {n: (blobs[f"adam.m/{n}"], blobs[f"adam.v/{n}"]) for n, _ in model.named_parameters()},
            meta["adam_step"],
        )
    return model, meta


def import_flownet_weights(model: PoseModel, path, enabled: bool = False) -> list[str]:
    """Copy pretrained FlowNetS conv weights into the orientation sub-network.

    The file is a named-blob container with ``<layer>.weight`` /
    ``<layer>.bias`` entries for the layers in ``FLOWNET_CONV_NAMES``.  Off by
    default; returns the names that were imported.
    """
    if not enabled:
        return []
    if model.orientation is None:
        raise ConfigError("model has no orientation sub-network")
    _, blobs = read_blobs(path)
    imported = []
    for i, src in enumerate(FLOWNET_CONV_NAMES[: len(model.orientation.cfg.convs)]):
        for part in ("weight", "bias"):
            key = f"{src}.{part}"
            if key not in blobs:
                continue
            p = model.orientation.params[f"conv{i}.{part}"]
            if blobs[key].shape != p.data.shape:
                raise CompatibilityError(f"{key}: shape {blobs[key].shape} != {p.data.shape}")
            p.data = blobs[key].astype(model.dtype)
            imported.append(key)
    return imported
