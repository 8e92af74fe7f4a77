"""Named parameter stores, seeded initialization, AdamW and TXNN checkpoints."""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

TXNN_MAGIC = b"TXNN"
TXNN_VERSION = 1


class CheckpointError(ValueError):
    pass


class ModelParams:
    """Ordered map of trainable tensors plus AdamW moment state.

    Initialization draws from a single PCG64 stream in creation order, so the
    same seed and the same sequence of ``add_*`` calls give identical weights.
    """

    def __init__(self, init_seed: int = 0):
        self.init_seed = int(init_seed)
        self.tensors: dict[str, Tensor] = {}
        self.meta: dict[str, float] = {}
        self._rng = np.random.Generator(np.random.PCG64(self.init_seed))
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t

    def add_weight(self, name: str, shape, fan_in: int | None = None, scale: float = 1.0) -> Tensor:
        """Truncated normal (cut at 2 std) with std = scale / sqrt(fan_in)."""
        shape = tuple(int(s) for s in shape)
        fan_in = shape[0] if fan_in is None else fan_in
        std = scale / np.sqrt(fan_in)
        n = int(np.prod(shape))
        draws = self._rng.standard_normal(n)
        bad = np.abs(draws) > 2.0
        while bad.any():
            draws[bad] = self._rng.standard_normal(int(bad.sum()))
            bad = np.abs(draws) > 2.0
        return self._register(name, (draws * std).reshape(shape))

    def add_const(self, name: str, shape, value: float = 0.0) -> Tensor:
        return self._register(name, np.full(tuple(shape), float(value)))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = np.zeros_like(t.data)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for t in self.tensors.values():
            n = t.data.size
            t.data = flat[i : i + n].reshape(t.shape).copy()
            i += n

    def grad_flat(self) -> np.ndarray:
        return np.concatenate(
            [(t.grad if t.grad is not None else np.zeros_like(t.data)).ravel() for t in self.tensors.values()]
        )

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        records = [(f"meta/{k}", np.array([v], dtype=np.float64)) for k, v in sorted(self.meta.items())]
        records += [(name, t.data) for name, t in self.tensors.items()]
        write_txnn(path, records)

    @classmethod
    def load(cls, path) -> "ModelParams":
        p = cls()
        for name, arr in read_txnn(path):
            if name.startswith("meta/"):
                p.meta[name[5:]] = float(arr.reshape(-1)[0])
            else:
                p._register(name, arr)
        return p

    def load_into(self, path) -> None:
        """Copy weights from a checkpoint into an already-built parameter set."""
        other = ModelParams.load(path)
        if set(other.tensors) != set(self.tensors):
            missing = sorted(set(self.tensors) ^ set(other.tensors))
            raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:3]}")
        for name, t in self.tensors.items():
            src = other.tensors[name].data
            if src.shape != t.shape:
                raise CheckpointError(f"parameter {name}: checkpoint shape {src.shape} != model shape {t.shape}")
            t.data = src.copy()
        self.meta = dict(other.meta)


def write_txnn(path, records) -> None:
    out = bytearray(TXNN_MAGIC)
    out += struct.pack("<II", TXNN_VERSION, len(records))
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_txnn(path):
    buf = Path(path).read_bytes()
    if buf[:4] != TXNN_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a TXNN checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != TXNN_VERSION:
        raise CheckpointError(f"{path}: unsupported TXNN version {version}")
    off = 12
    out = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            out.append((name, arr))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated TXNN checkpoint") from exc
    return out


LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(base: float, step: int, total: int, schedule: str = "constant") -> float:
    """Learning rate for 0-based ``step`` of ``total``; cosine decays to zero at the end."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))
    raise ValueError(f"unknown lr schedule {schedule!r}; expected one of {LR_SCHEDULES}")


def adamw_step(
    params: ModelParams,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """Decoupled weight decay, bias-corrected moments; moment state lives on ``params``."""
    b1, b2 = betas
    params.step += 1
    c1 = 1.0 - b1**params.step
    c2 = 1.0 - b2**params.step
    for name, t in params.tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = params.m.get(name)
        if m is None:
            m = params.m[name] = np.zeros_like(t.data)
            params.v[name] = np.zeros_like(t.data)
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w = t.data * (1.0 - lr * weight_decay) if weight_decay else t.data
        t.data = w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
