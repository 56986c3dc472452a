"""Parameter registry, Adam, and the EDGW checkpoint format."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import CheckpointMismatch, IoFailure, NoGradients
from .tensor import Tensor

CHECKPOINT_MAGIC = b"EDGW"


class ParamSet:
    """Named trainable tensors plus named non-trainable buffers
    (batchnorm running statistics) and per-parameter Adam state."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, data) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(data)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        """Number of trainable scalars."""
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by buffers, in registration order."""
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        out.update(self.buffers)
        return out

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.state().items())

    def restore(self, state) -> None:
        expected = self.state()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointMismatch(
                f"parameter names differ from the constructed model (missing {missing[:3]}, "
                f"unexpected {extra[:3]})")
        for name, value in state.items():
            target = expected[name]
            if tuple(np.shape(value)) != target.shape:
                raise CheckpointMismatch(
                    f"{name}: checkpoint shape {np.shape(value)} != model shape {target.shape}")
            if name in self.params:
                self.params[name].data = np.asarray(value, dtype=target.dtype).copy()
            else:
                self.buffers[name][...] = value


def adam_step(params: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamSet:
    """One bias-corrected Adam update of every parameter, in place."""
    if all(p.grad is None for p in params):
        raise NoGradients("adam_step called before any backward pass")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = params.adam_m.get(name)
        if m is None:
            m = params.adam_m[name] = np.zeros_like(p.data)
            params.adam_v[name] = np.zeros_like(p.data)
        v = params.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params


# --------------------------------------------------------------- checkpoint

def save_checkpoint(params: ParamSet, path) -> Path:
    """Write every parameter and buffer as float32, little-endian."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params.state()))]
    for name, value in params.state().items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: not an EDGW checkpoint")
    pos = 4
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointMismatch(f"{path}: trailing bytes after last entry")
    return out


def load_checkpoint(params: ParamSet, path) -> ParamSet:
    params.restore(read_checkpoint(path))
    return params
