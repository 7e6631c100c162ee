"""Binary checkpoints for weight stores.

Layout, all little-endian:

    magic   4 bytes  b"CNCT"
    version u32      format version (currently 1)
    count   u32      number of tensors
    then per tensor, in graph topological order:
        name_len u16, name bytes (utf-8, "node/param")
        dtype    u8  (0 = float32, 1 = float64)
        rank     u8
        dims     rank * u32
        data     raw C-order values

Round-tripping a store through save/load is bitwise exact. The training
step counter rides along as a reserved rank-0 float64 tensor named
"__step__" and is exempt from architecture compatibility checks.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointCompatError, CheckpointFormatError
from .graph import parameter_names

MAGIC = b"CNCT"
VERSION = 1
STEP_NAME = "__step__"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Named tensors plus the training step they were captured at."""

    tensors: dict
    step: int = 0
    version: int = VERSION
    order: list = field(default_factory=list)

    def ordered_names(self):
        return self.order if self.order else sorted(self.tensors)


def checkpoint_from_weights(graph, weights, step=0):
    """Flatten a weight store into checkpoint tensors, topologically ordered."""
    tensors = {}
    order = []
    for node, param in parameter_names(graph):
        key = f"{node}/{param}"
        tensors[key] = weights[node][param]
        order.append(key)
    return Checkpoint(tensors=tensors, step=int(step), order=order)


def weights_from_checkpoint(graph, ckpt):
    """Rebuild a weight store, validating against the architecture.

    Raises CheckpointCompatError when the checkpoint lacks tensors the
    graph needs or carries tensors the graph has no slot for.
    """
    expected = {f"{node}/{param}": (node, param)
                for node, param in parameter_names(graph)}
    have = {k for k in ckpt.tensors if k != STEP_NAME}
    missing = sorted(set(expected) - have)
    if missing:
        raise CheckpointCompatError(
            f"checkpoint is missing tensors required by the architecture: "
            f"{', '.join(missing[:5])}" + (" ..." if len(missing) > 5 else ""))
    extra = sorted(have - set(expected))
    if extra:
        raise CheckpointCompatError(
            f"checkpoint holds tensors the architecture has no slot for: "
            f"{', '.join(extra[:5])}" + (" ..." if len(extra) > 5 else ""))
    weights = {}
    for key, (node, param) in expected.items():
        weights.setdefault(node, {})[param] = ckpt.tensors[key]
    return weights


def save_checkpoint(path, ckpt):
    """Write a Checkpoint to disk in the binary format above."""
    names = list(ckpt.ordered_names())
    if STEP_NAME not in ckpt.tensors:
        names.append(STEP_NAME)
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(names))]
    for name in names:
        if name == STEP_NAME and STEP_NAME not in ckpt.tensors:
            arr = np.float64(ckpt.step)[()]
            arr = np.asarray(arr)
        else:
            arr = np.asarray(ckpt.tensors[name])
        dt = np.dtype(arr.dtype)
        if dt not in _DTYPE_CODES:
            raise CheckpointFormatError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}; "
                f"checkpoints hold float32 or float64 only")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(
            "<f4" if _DTYPE_CODES[dt] == 0 else "<f8", copy=False).tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"checkpoint is truncated: expected {n} more bytes for {what} "
                f"at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint file; truncated or malformed input raises
    CheckpointFormatError and leaves no partial state behind."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(
            f"{path} is not a checkpoint (bad magic bytes)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}, expected {VERSION}")
    tensors = {}
    order = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(
                f"tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}") if rank else ()
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        raw = r.take(nbytes, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
        order.append(name)
    if r.pos != len(data):
        raise CheckpointFormatError(
            f"{len(data) - r.pos} trailing bytes after the last tensor")
    step = 0
    if STEP_NAME in tensors:
        step = int(tensors.pop(STEP_NAME)[()])
        order.remove(STEP_NAME)
    return Checkpoint(tensors=tensors, step=step, version=version, order=order)


def save_weights(path, graph, weights, step=0):
    """Convenience: flatten and write in one call."""
    return save_checkpoint(path, checkpoint_from_weights(graph, weights, step))


def load_weights(path, graph):
    """Convenience: read and validate in one call. Returns (weights, step)."""
    ckpt = load_checkpoint(path)
    return weights_from_checkpoint(graph, ckpt), ckpt.step
