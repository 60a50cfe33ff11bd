"""FLDN checkpoint files.

Layout (little-endian)::

    b"FLDN"  u32 version
    u32 n    n bytes of UTF-8 JSON: {"network": {...}, "meta": {...}}
    tensor section: parameters
    u8 has_optimizer  [u64 optimizer step, tensor section of moments]
    u8 has_ema        [u64 EMA update count, tensor section of shadow weights]
    u64 training step

A tensor section is ``u32 count`` followed by entries of ``u16 name length,
name, u32 ndim, u32 dims[ndim], f32 data``.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .network import NetworkConfig, init_params

MAGIC = b"FLDN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    """Parameter registry differs; ``diff`` lists (name, expected, found) triples."""

    def __init__(self, diff: list):
        self.diff = diff
        lines = [f"  {name}: expected {exp}, found {got}" for name, exp, got in diff]
        super().__init__("checkpoint does not match the network config:\n" + "\n".join(lines))


@dataclass
class Checkpoint:
    network: NetworkConfig
    params: "OrderedDict[str, np.ndarray]"
    optimizer: Optional["OrderedDict[str, np.ndarray]"] = None
    optimizer_step: int = 0
    ema: Optional["OrderedDict[str, np.ndarray]"] = None
    ema_updates: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)


def _write_tensors(f, tensors) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint is truncated")
    return b


def _read_tensors(f) -> "OrderedDict[str, np.ndarray]":
    (count,) = struct.unpack("<I", _read(f, 4))
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read(f, 2))
        name = _read(f, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read(f, 4))
        shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read(f, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps({"network": ckpt.network.to_dict(), "meta": ckpt.meta}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_tensors(buf, ckpt.params)
    for section, count in ((ckpt.optimizer, ckpt.optimizer_step), (ckpt.ema, ckpt.ema_updates)):
        buf.write(struct.pack("<B", section is not None))
        if section is not None:
            buf.write(struct.pack("<Q", count))
            _write_tensors(buf, section)
    buf.write(struct.pack("<Q", ckpt.step))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expected: NetworkConfig | None = None) -> Checkpoint:
    """Read a checkpoint and check its tensors against the network's registry.

    The registry is the one implied by the stored config, or by ``expected``
    when given; any missing, extra or reshaped tensor raises CheckpointMismatch.
    """
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not an FLDN checkpoint")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read(f, 4))
        header = json.loads(_read(f, n))
        network = NetworkConfig.from_dict(header["network"])
        params = _read_tensors(f)
        sections = []
        for _ in range(2):
            (flag,) = struct.unpack("<B", _read(f, 1))
            if flag:
                (count,) = struct.unpack("<Q", _read(f, 8))
                sections.append((_read_tensors(f), count))
            else:
                sections.append((None, 0))
        (step,) = struct.unpack("<Q", _read(f, 8))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    check_registry(params, expected or network)
    if sections[1][0] is not None:
        check_registry(sections[1][0], expected or network)
    return Checkpoint(network, params, sections[0][0], sections[0][1], sections[1][0],
                      sections[1][1], step, header.get("meta", {}))


def registry_diff(tensors: dict, cfg: NetworkConfig) -> list:
    want = OrderedDict((k, v.shape) for k, v in init_params(cfg, 0).items())
    diff = []
    for name, shape in want.items():
        if name not in tensors:
            diff.append((name, shape, "missing"))
        elif tuple(tensors[name].shape) != tuple(shape):
            diff.append((name, shape, tuple(tensors[name].shape)))
    for name in tensors:
        if name not in want:
            diff.append((name, "absent", tuple(tensors[name].shape)))
    return diff


def check_registry(tensors: dict, cfg: NetworkConfig) -> None:
    diff = registry_diff(tensors, cfg)
    if diff:
        raise CheckpointMismatch(diff)


def from_trainer(trainer, meta: dict | None = None) -> Checkpoint:
    """Snapshot a Trainer's weights, Adan moments and EMA shadow."""
    return Checkpoint(
        network=trainer.model.cfg,
        params=OrderedDict((k, v.data.copy()) for k, v in trainer.model.params.items()),
        optimizer=OrderedDict((k, v.copy()) for k, v in trainer.opt.state_arrays().items()),
        optimizer_step=trainer.opt.step_count,
        ema=OrderedDict((k, v.data.copy()) for k, v in trainer.ema.shadow.items()),
        ema_updates=trainer.ema.updates,
        step=trainer.step,
        meta=dict(meta or {}),
    )


def build_model(ckpt: Checkpoint, use_ema: bool = False):
    """VelocityNet carrying the checkpoint's raw or EMA weights."""
    from .autodiff import ParameterStore
    from .network import VelocityNet

    source = ckpt.params
    if use_ema:
        if ckpt.ema is None:
            raise CheckpointError("checkpoint has no EMA shadow weights")
        source = ckpt.ema
    params = ParameterStore()
    for name, arr in source.items():
        params[name] = arr.copy()
    return VelocityNet(ckpt.network, params)
