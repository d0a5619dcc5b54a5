"""Dense tensors and the tape that records reverse-mode gradients.

Values are numpy arrays in row-major layout: float32/float64 for anything
differentiable, uint8 for label maps. Ops append one node per produced
tensor to the active :class:`Tape`, so the node list is topologically
ordered by construction and :func:`backward` is a single reverse sweep that
accumulates gradients into ``tape.grads`` keyed by tensor uid.
"""

from __future__ import annotations

import itertools
import struct
from typing import BinaryIO, Callable

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "record",
    "backward",
    "save_d2t",
    "load_d2t",
    "write_d2t",
    "read_d2t",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_SUPPORTED_DTYPES = _FLOAT_DTYPES + (np.dtype(np.uint8),)

_uid_counter = itertools.count(1)


class ShapeError(ValueError):
    """An operation received tensors of incompatible shape or axis."""


class Tensor:
    """Immutable-by-convention dense array of f32, f64 or u8.

    ``data`` is the backing numpy array; only u8 tensors may not require
    gradients. Every tensor carries a process-unique ``uid`` used as the
    gradient key on tapes.
    """

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise TypeError(
                f"unsupported dtype {arr.dtype}; tensors are f32, f64 or u8"
            )
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        if requires_grad and arr.dtype not in _FLOAT_DTYPES:
            raise TypeError("only float tensors can require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, uid={self.uid})"

    # Arithmetic operators are attached by d2mlp.ops at import time.


class _Node:
    """One executed op: output uid, input uids and the backward rule.

    ``backward`` maps the output gradient (ndarray) to a tuple of input
    gradients aligned with ``inputs`` (None for non-differentiable inputs).
    Saved forward values live in the closure.
    """

    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name: str, out: int, inputs: tuple, backward: Callable):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPE_STACK: list = []


class Tape:
    """Ordered record of ops executed while the tape is active.

    Single-writer: one tape belongs to one thread for one forward/backward
    pass. ``grads`` maps tensor uid to its accumulated gradient after
    :func:`backward` ran.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def grad(self, t: Tensor):
        """Gradient recorded for ``t``, or None if it was not reached."""
        return self.grads.get(t.uid)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(name: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op result; append a tape node when gradients are wanted."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.nodes.append(
            _Node(name, out.uid, tuple(t.uid for t in inputs), backward)
        )
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss; fills and returns ``tape.grads``."""
    if loss.data.shape != ():
        raise ShapeError(f"loss must be a scalar tensor, got shape {loss.shape}")
    tape.grads = {loss.uid: np.ones((), dtype=loss.data.dtype)}
    grads = tape.grads
    for node in reversed(tape.nodes):
        g_out = grads.get(node.out)
        if g_out is None:
            continue
        for uid, g_in in zip(node.inputs, node.backward(g_out)):
            if g_in is None:
                continue
            acc = grads.get(uid)
            grads[uid] = g_in if acc is None else acc + g_in
    return grads


# ---------------------------------------------------------------------------
# .d2t tensor file format
#
# magic "D2T\0", u8 dtype code (0=f32, 1=f64, 2=u8), u8 rank, rank x u32
# little-endian extents, then the raw little-endian payload. Round-trips are
# bit-exact.
# ---------------------------------------------------------------------------

_D2T_MAGIC = b"D2T\0"
_DTYPE_TO_CODE = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def write_d2t(stream: BinaryIO, t: Tensor) -> None:
    code = _DTYPE_TO_CODE[t.data.dtype]
    stream.write(_D2T_MAGIC)
    stream.write(struct.pack("<BB", code, t.data.ndim))
    for extent in t.data.shape:
        stream.write(struct.pack("<I", extent))
    stream.write(np.ascontiguousarray(t.data).astype(_CODE_TO_DTYPE[code], copy=False).tobytes())


def read_d2t(stream: BinaryIO) -> Tensor:
    magic = stream.read(4)
    if magic != _D2T_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_D2T_MAGIC!r}")
    code, rank = struct.unpack("<BB", stream.read(2))
    if code not in _CODE_TO_DTYPE:
        raise ValueError(f"unknown dtype code {code}")
    shape = tuple(struct.unpack("<I", stream.read(4))[0] for _ in range(rank))
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_d2t(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_d2t(fh, t)


def load_d2t(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_d2t(fh)
