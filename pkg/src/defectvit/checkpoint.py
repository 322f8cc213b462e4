"""Self-describing binary checkpoint.

Layout (all integers little-endian u32)::

    b"MDETCKPT" | version | json_len | json metadata (utf-8)
    | tensor_count | per tensor: name_len, name, ndim, dims..., f32 payload

The metadata carries the run config, scaler, anchor-grid parameters, epoch,
metric history and optimizer step, so prediction needs nothing else.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import MinMaxScaler
from .optim import OptState
from .tensor import Tensor

MAGIC = b"MDETCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    config: dict
    scaler: MinMaxScaler
    grid: dict
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: OptState | None = None
    extra: dict = field(default_factory=dict)


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _pack_array(name: str, a: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(a, dtype="<f4")
    head = _u32(len(raw)) + raw + _u32(a.ndim) + b"".join(_u32(d) for d in a.shape)
    return head + a.tobytes()


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"w:{k}", v) for k, v in ckpt.weights.items()]
    meta = {
        "config": ckpt.config,
        "scaler": ckpt.scaler.to_dict(),
        "grid": ckpt.grid,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "extra": ckpt.extra,
        "optimizer_step": None,
    }
    if ckpt.optimizer is not None:
        meta["optimizer_step"] = ckpt.optimizer.step
        arrays += [(f"m:{k}", v) for k, v in ckpt.optimizer.m.items()]
        arrays += [(f"v:{k}", v) for k, v in ckpt.optimizer.v.items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + _u32(VERSION) + _u32(len(blob)) + blob + _u32(len(arrays)))
        for name, a in arrays:
            fh.write(_pack_array(name, a))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    r = _Reader(buf, path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    groups: dict[str, dict[str, np.ndarray]] = {"w": {}, "m": {}, "v": {}}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition(":")
        if kind not in groups:
            raise CheckpointError(f"{path}: unknown payload {name!r}")
        groups[kind][key] = a
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    opt = None
    if meta["optimizer_step"] is not None:
        opt = OptState(meta["optimizer_step"], groups["m"], groups["v"])
    return Checkpoint(weights=groups["w"], config=meta["config"], scaler=MinMaxScaler.from_dict(meta["scaler"]),
                      grid=meta["grid"], epoch=meta["epoch"], history=meta["history"], optimizer=opt,
                      extra=meta.get("extra", {}))


def weights_to_tensors(weights: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in weights.items()}
