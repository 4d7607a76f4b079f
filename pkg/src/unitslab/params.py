"""Named parameter collections, SGD-with-momentum, and checkpoint files.

Checkpoint layout (all integers little-endian):

    magic "UNTS" | u32 version=1 | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims
               | row-major f64 values
    trailing section: u32 momentum-buffer count | buffers (same entry
    encoding) | u64 step count

A save/load round trip is bitwise exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor

MAGIC = b"UNTS"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file; the message carries the failing byte offset."""


@dataclass(frozen=True)
class ParamSet:
    """Ordered name -> Tensor map forming one detector branch.

    Value-immutable: optimizer steps return a new ParamSet. Momentum buffers
    are carried alongside so a checkpoint resumes the optimizer exactly.
    """

    entries: dict[str, Tensor]
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        buffers = dict(self.momentum_buffers)
        for name, t in self.entries.items():
            if name not in buffers:
                buffers[name] = np.zeros(t.shape)
            elif buffers[name].shape != t.shape:
                raise ShapeError(
                    f"momentum buffer for {name!r} has shape {buffers[name].shape}, "
                    f"parameter has {t.shape}"
                )
        object.__setattr__(self, "momentum_buffers", buffers)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        entries = {
            name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()
        }
        return cls(entries=entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def num_values(self) -> int:
        return sum(t.size for t in self.entries.values())


def sgd_step(
    params: ParamSet,
    grads: dict[str, Tensor],
    lr: float,
    momentum: float = 0.0,
) -> ParamSet:
    """One SGD-with-momentum update: v <- momentum*v + g; p <- p - lr*v.

    Parameters without a gradient entry are left untouched (frozen branch).
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if lr < 0.0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    unknown = set(grads) - set(params.entries)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    new_entries: dict[str, Tensor] = {}
    new_buffers: dict[str, np.ndarray] = {}
    for name, t in params.entries.items():
        g = grads.get(name)
        if g is None:
            new_entries[name] = t
            new_buffers[name] = params.momentum_buffers[name]
            continue
        if g.shape != t.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter has {t.shape}"
            )
        v = momentum * params.momentum_buffers[name] + g.data
        p = t.data - lr * v
        new_entries[name] = Tensor(p, requires_grad=True, name=name)
        new_buffers[name] = v
    return ParamSet(
        entries=new_entries,
        momentum_buffers=new_buffers,
        step_count=params.step_count + 1,
    )


# ---------------------------------------------------------------------------
# serialization


def _encode_entry(name: str, values: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", values.ndim)]
    parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
    parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return b"".join(parts)


def params_to_bytes(params: ParamSet) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params.entries))]
    for name, t in params.entries.items():
        parts.append(_encode_entry(name, t.data))
    parts.append(struct.pack("<I", len(params.momentum_buffers)))
    for name in params.entries:  # buffer order mirrors entry order
        parts.append(_encode_entry(name, params.momentum_buffers[name]))
    parts.append(struct.pack("<Q", params.step_count))
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at byte {self.offset}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def u(self, fmt: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def _decode_entry(r: _Reader) -> tuple[str, np.ndarray]:
    name_len = r.u("<H")
    name = r.take(name_len).decode("utf-8")
    rank = r.u("<B")
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    values = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims)
    return name, values.astype(np.float64)


def params_from_bytes(blob: bytes) -> ParamSet:
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = r.u("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte 4")
    entry_count = r.u("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(entry_count):
        name, values = _decode_entry(r)
        if name in arrays:
            raise CheckpointError(f"duplicate parameter {name!r} at byte {r.offset}")
        arrays[name] = values
    buffer_count = r.u("<I")
    buffers: dict[str, np.ndarray] = {}
    for _ in range(buffer_count):
        name, values = _decode_entry(r)
        if name not in arrays:
            raise CheckpointError(
                f"momentum buffer for unknown parameter {name!r} at byte {r.offset}"
            )
        buffers[name] = values
    step_count = r.u("<Q")
    if r.offset != len(blob):
        raise CheckpointError(f"{len(blob) - r.offset} trailing bytes at byte {r.offset}")
    entries = {
        name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()
    }
    return ParamSet(entries=entries, momentum_buffers=buffers, step_count=step_count)


def checkpoint_save(params: ParamSet, path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def checkpoint_load(path: str | Path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())
