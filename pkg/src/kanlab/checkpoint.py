"""Binary checkpoint format.

Layout (all integers u64 little-endian)::

    b"KANCKPT1"
    spec_len, spec_text (UTF-8 canonical ModelSpec text)
    tensor_count
    repeated: name_len, name (UTF-8), rank, dims[rank], values (f32 LE, row-major)

Parameters come first, then buffers, in registry order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .models import Model, ModelSpec, SpecError

MAGIC = b"KANCKPT1"
_U64 = struct.Struct("<Q")
_MAX_RANK = 8


class CheckpointFormatError(ValueError):
    """Malformed checkpoint; ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(model: Model) -> bytes:
    parts = [MAGIC]
    spec = model.spec.to_text().encode("utf-8")
    parts += [_U64.pack(len(spec)), spec]
    arrays = model.state_arrays()
    parts.append(_U64.pack(len(arrays)))
    for name, arr in arrays:
        nb = name.encode("utf-8")
        parts += [_U64.pack(len(nb)), nb, _U64.pack(arr.ndim)]
        parts += [_U64.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> int:
    """Write ``model`` to ``path`` atomically; returns the file size in bytes."""
    blob = encode(model)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return len(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode(buf: bytes) -> Model:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    spec_at = r.pos
    spec_bytes = r.take(r.u64("spec length"), "spec text")
    try:
        spec = ModelSpec.from_text(spec_bytes.decode("utf-8"))
    except (UnicodeDecodeError, SpecError, ValueError) as exc:
        raise CheckpointFormatError(f"invalid model spec: {exc}", spec_at) from exc
    model = Model(spec, seed=0)
    expected = dict(model.state_arrays())
    count_at = r.pos
    count = r.u64("tensor count")
    if count != len(expected):
        raise CheckpointFormatError(
            f"tensor count {count} disagrees with spec ({len(expected)} expected)", count_at)
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        rec_at = r.pos
        try:
            name = r.take(r.u64("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("tensor name is not UTF-8", rec_at) from exc
        if name not in expected or name in loaded:
            raise CheckpointFormatError(f"unexpected tensor {name!r}", rec_at)
        rank = r.u64(f"rank of {name}")
        if rank > _MAX_RANK:
            raise CheckpointFormatError(f"rank {rank} of {name} is implausible", r.pos - 8)
        dims_at = r.pos
        dims = tuple(r.u64(f"dims of {name}") for _ in range(rank))
        if dims != expected[name].shape:
            raise CheckpointFormatError(
                f"{name}: shape {dims} disagrees with spec shape {expected[name].shape}", dims_at)
        n = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * n, f"values of {name}")
        loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    model.load_arrays(loaded)
    model.eval()
    return model


def load_checkpoint(path) -> Model:
    """Rebuild a model from ``path``; raises CheckpointFormatError on any malformation."""
    with open(path, "rb") as fh:
        return decode(fh.read())
