"""Tensor primitives, seeded randomness and the PLT raw tensor format.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order.  4-D
activations use the channels-last layout ``(N, H, W, C)``.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

PLT_MAGIC = b"PLT0\x00\x00\x00\x00"
DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class TensorFormatError(ValueError):
    """A PLT stream is malformed or uses an unsupported dtype tag."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


class Rng:
    """Explicit random stream backed by numpy's counter-based Philox generator.

    Philox output depends only on the key and counter, so a seed fixes the
    stream on every platform.  Child streams are derived by name through
    ``SeedSequence`` so one integer seed pins a whole experiment.
    """

    def __init__(self, seed: int | Sequence[int] = 0):
        if isinstance(seed, (int, np.integer)):
            entropy: int | list[int] = int(seed) & 0xFFFFFFFFFFFFFFFF
        else:
            entropy = [int(s) & 0xFFFFFFFFFFFFFFFF for s in seed]
        self.seed = entropy
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "Rng":
        tag = zlib.crc32(name.encode("utf-8"))
        base = self.seed if isinstance(self.seed, list) else [self.seed]
        return Rng([*base, tag])

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None, lo: float = 0.0, hi: float = 1.0):
        return self._gen.uniform(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())


def rand_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    if not lo < hi:
        raise ValueError(f"rand_uniform needs lo < hi, got [{lo}, {hi})")
    return rng.generator.uniform(lo, hi, size=tuple(shape)).astype(dtype)


def rand_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    if std < 0:
        raise ValueError(f"rand_normal needs std >= 0, got {std}")
    z = rng.generator.standard_normal(size=tuple(shape))
    return (mean + std * z).astype(dtype)


def truncated_normal(rng: Rng, shape, std: float, dtype=DEFAULT_DTYPE) -> Tensor:
    """Zero-mean normal draws, redrawing anything beyond two standard deviations."""
    shape = tuple(shape)
    z = rng.generator.standard_normal(size=shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.generator.standard_normal(size=int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (std * z).astype(dtype)


def flat_index(coords: Sequence[int], shape: Sequence[int]) -> int:
    idx = 0
    for c, n in zip(coords, shape, strict=True):
        if not 0 <= c < n:
            raise IndexError(f"coordinate {c} out of range for extent {n}")
        idx = idx * n + c
    return idx


def unflat_index(idx: int, shape: Sequence[int]) -> tuple[int, ...]:
    size = int(np.prod(shape, dtype=np.int64))
    if not 0 <= idx < size:
        raise IndexError(f"flat index {idx} out of range for size {size}")
    out = []
    for n in reversed(shape):
        out.append(idx % n)
        idx //= n
    return tuple(reversed(out))


def pad2d(x: Tensor, pad_top: int, pad_bottom: int, pad_left: int, pad_right: int) -> Tensor:
    """Zero-pad the spatial axes of an NHWC tensor."""
    if x.ndim != 4:
        raise ValueError(f"pad2d expects a 4-D NHWC tensor, got shape {x.shape}")
    if min(pad_top, pad_bottom, pad_left, pad_right) < 0:
        raise ValueError("pad counts must be non-negative")
    n, h, w, c = x.shape
    out = np.zeros((n, h + pad_top + pad_bottom, w + pad_left + pad_right, c), dtype=x.dtype)
    out[:, pad_top:pad_top + h, pad_left:pad_left + w, :] = x
    return out


def crop2d(x: Tensor, pad_top: int, pad_bottom: int, pad_left: int, pad_right: int) -> Tensor:
    """Inverse of :func:`pad2d`; also the backward pass of padding."""
    if x.ndim != 4:
        raise ValueError(f"crop2d expects a 4-D NHWC tensor, got shape {x.shape}")
    h, w = x.shape[1], x.shape[2]
    return x[:, pad_top:h - pad_bottom, pad_left:w - pad_right, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def reduce_mean(x: Tensor, axes: Iterable[int]) -> Tensor:
    axes = [int(a) for a in axes]
    norm = []
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for rank {x.ndim}")
        norm.append(a % x.ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes in {axes}")
    return x.mean(axis=tuple(norm))


# -- PLT raw tensor files ---------------------------------------------------

def write_tensor(x: Tensor, dest: Union[str, Path, BinaryIO]) -> None:
    """Write ``x`` as PLT: magic, u32 rank, u32 extents, u8 dtype tag, raw LE data."""
    x = np.asarray(x)
    try:
        tag = DTYPE_TAGS[x.dtype]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {x.dtype}") from None
    header = PLT_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    header += struct.pack("<B", tag)
    payload = np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes()
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(header + payload)
    else:
        dest.write(header + payload)


def read_tensor(src: Union[str, Path, BinaryIO, bytes]) -> Tensor:
    if isinstance(src, (str, Path)):
        buf = Path(src).read_bytes()
    elif isinstance(src, bytes):
        buf = src
    else:
        buf = src.read()
    stream = io.BytesIO(buf)
    if stream.read(8) != PLT_MAGIC:
        raise TensorFormatError("bad PLT magic")
    try:
        (rank,) = struct.unpack("<I", stream.read(4))
        shape = struct.unpack(f"<{rank}I", stream.read(4 * rank))
        (tag,) = struct.unpack("<B", stream.read(1))
    except struct.error as exc:
        raise TensorFormatError(f"truncated PLT header: {exc}") from None
    if tag not in TAG_DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    if any(n < 1 for n in shape):
        raise TensorFormatError(f"non-positive extent in {shape}")
    dtype = TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    data = stream.read()
    if len(data) != count * dtype.itemsize:
        raise TensorFormatError(f"expected {count * dtype.itemsize} data bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
