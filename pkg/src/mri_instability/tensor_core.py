"""2-D tensor primitives: unitary radix-2 FFT, norms, seeded sampling, TNSR files.

Tensors are plain ``numpy`` arrays (``float64`` for real images, ``complex128``
for k-space).  The FFT routines transform the last two axes, so any leading
axes act as a batch.
"""
from __future__ import annotations

import functools
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    SizingError,
    TensorFormatError,
    TruncatedPayloadError,
    VersionMismatchError,
)

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
DTYPE_REAL64 = 1
DTYPE_COMPLEX128 = 2
_HEADER = struct.Struct("<4sIBBQQ")

RNG_ALGORITHM = "PCG64"


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_dims(shape) -> None:
    if len(shape) < 2:
        raise SizingError(f"expected at least 2 dimensions, got shape {shape}")
    rows, cols = shape[-2:]
    if not (_is_pow2(rows) and _is_pow2(cols)):
        raise SizingError(f"FFT dims must be powers of two, got {rows}x{cols}")


@functools.lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@functools.lru_cache(maxsize=None)
def _twiddles(m: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    w = np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)
    w.setflags(write=False)
    return w


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized iterative decimation-in-time radix-2 DFT over the last axis."""
    n = a.shape[-1]
    lead = a.shape[:-1]
    x = np.asarray(a, dtype=np.complex128)[..., _bit_reversal(n)]
    m = 2
    while m <= n:
        half = m // 2
        x = x.reshape(*lead, n // m, m)
        even = x[..., :half]
        odd = x[..., half:] * _twiddles(m, inverse)
        x = np.concatenate((even + odd, even - odd), axis=-1)
        m *= 2
    return x.reshape(*lead, n)


def fft2(img: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes.

    Scaled by ``1/sqrt(rows*cols)`` so that ``fft2`` is orthonormal and
    ``ifft2`` is its exact inverse.
    """
    img = np.asarray(img)
    _check_dims(img.shape)
    rows, cols = img.shape[-2:]
    out = _fft_last_axis(img, inverse=False)
    out = _fft_last_axis(np.swapaxes(out, -1, -2), inverse=False)
    return np.swapaxes(out, -1, -2) / np.sqrt(rows * cols)


def ifft2(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` (also its adjoint)."""
    ksp = np.asarray(ksp)
    _check_dims(ksp.shape)
    rows, cols = ksp.shape[-2:]
    out = _fft_last_axis(ksp, inverse=True)
    out = _fft_last_axis(np.swapaxes(out, -1, -2), inverse=True)
    return np.swapaxes(out, -1, -2) / np.sqrt(rows * cols)


def l2_norm(t, axis=None) -> float | np.ndarray:
    """Euclidean norm over all real and imaginary components."""
    t = np.asarray(t)
    if np.iscomplexobj(t):
        sq = t.real**2 + t.imag**2
    else:
        sq = t.astype(np.float64) ** 2
    return np.sqrt(np.sum(sq, axis=axis))


class RngStream:
    """Seeded, single-owner random stream backed by numpy's PCG64 generator."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, algorithm={self.algorithm!r})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream, a pure function of ``(seed, key)``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))


def gaussian_tensor(rng: RngStream, rows: int, cols: int, complex: bool = False) -> np.ndarray:
    """I.i.d. standard normal ``rows x cols`` tensor.

    With ``complex=True`` the real part is drawn first and the imaginary part
    second, each N(0, 1).
    """
    if complex:
        re = rng.normal((rows, cols))
        im = rng.normal((rows, cols))
        return re + 1j * im
    return rng.normal((rows, cols))


def save_tensor(path, tensor) -> None:
    arr = np.asarray(tensor)
    if arr.ndim != 2:
        raise TensorFormatError(f"TNSR stores 2-D tensors, got ndim={arr.ndim}")
    if np.iscomplexobj(arr):
        dtype_code, payload = DTYPE_COMPLEX128, arr.astype("<c16")
    else:
        dtype_code, payload = DTYPE_REAL64, arr.astype("<f8")
    header = _HEADER.pack(TNSR_MAGIC, TNSR_VERSION, dtype_code, 2, arr.shape[0], arr.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != TNSR_MAGIC:
        raise BadMagicError(f"{path}: not a TNSR file")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, dtype_code, ndim, rows, cols = _HEADER.unpack_from(data)
    if version != TNSR_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {TNSR_VERSION}")
    if ndim != 2:
        raise TensorFormatError(f"{path}: ndim={ndim}, only 2 supported")
    if dtype_code == DTYPE_REAL64:
        dtype, itemsize = np.dtype("<f8"), 8
    elif dtype_code == DTYPE_COMPLEX128:
        dtype, itemsize = np.dtype("<c16"), 16
    else:
        raise TensorFormatError(f"{path}: unknown dtype code {dtype_code}")
    expected = rows * cols * itemsize
    payload = data[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise TensorFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder("="))
