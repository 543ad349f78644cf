"""Single-coil Cartesian acquisition model ``y = M * F x + noise``.

K-space uses the unshifted layout of :func:`~mri_instability.tensor_core.fft2`:
the DC line is row 0 and the "center band" wraps around it
(rows ``-c//2 .. c - c//2 - 1`` modulo ``rows``).  Measurements are kept
zero-filled on the full grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensor_core import RngStream, fft2, ifft2, load_tensor, save_tensor


def center_lines(rows: int, n_center: int) -> np.ndarray:
    """Row indices of the ``n_center`` fully sampled lines around DC."""
    return (np.arange(n_center) - n_center // 2) % rows


@dataclass(frozen=True)
class SamplingMask:
    """Cartesian line mask: one boolean per k-space row, broadcast across columns."""

    rows: int
    cols: int
    selected: np.ndarray
    acceleration: float = 1.0
    center_fraction: float = 0.0

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=bool)
        if sel.shape != (self.rows,):
            raise ShapeMismatchError(f"selected has shape {sel.shape}, expected ({self.rows},)")
        sel.setflags(write=False)
        object.__setattr__(self, "selected", sel)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def matrix(self) -> np.ndarray:
        """Diagonal of the selection operator as a ``rows x cols`` 0/1 float map."""
        return np.broadcast_to(self.selected[:, None], self.shape).astype(np.float64)

    @property
    def m(self) -> int:
        """Number of measured k-space entries (trace of the selector)."""
        return int(self.selected.sum()) * self.cols

    @property
    def n_lines(self) -> int:
        return int(self.selected.sum())

    def apply(self, ksp: np.ndarray) -> np.ndarray:
        return np.where(self.selected[:, None], ksp, 0.0)

    def save(self, path) -> None:
        save_tensor(path, self.matrix)

    @classmethod
    def load(cls, path, acceleration=None, center_fraction=0.0) -> "SamplingMask":
        mat = load_tensor(path)
        sel = mat[:, 0] != 0
        if not np.all((mat != 0) == sel[:, None]):
            raise ShapeMismatchError(f"{path}: mask is not constant along rows")
        rows, cols = mat.shape
        acc = acceleration if acceleration is not None else rows / max(int(sel.sum()), 1)
        return cls(rows, cols, sel, float(acc), float(center_fraction))


def full_mask(rows: int, cols: int | None = None) -> SamplingMask:
    cols = rows if cols is None else cols
    return SamplingMask(rows, cols, np.ones(rows, dtype=bool), 1.0, 1.0)


def make_cartesian_mask(rows: int, acceleration: float, center_fraction: float,
                        rng: RngStream, cols: int | None = None) -> SamplingMask:
    """Random Cartesian line mask with a fully sampled center band.

    ``floor(rows / acceleration)`` lines are selected in total; the central
    ``floor(center_fraction * rows)`` are always included and the rest are
    drawn uniformly without replacement.
    """
    if acceleration < 1:
        raise ConfigError(f"acceleration must be >= 1, got {acceleration}")
    if not 0.0 <= center_fraction <= 1.0:
        raise ConfigError(f"center_fraction must be in [0, 1], got {center_fraction}")
    cols = rows if cols is None else cols
    budget = int(np.floor(rows / acceleration))
    n_center = int(np.floor(center_fraction * rows))
    if budget < n_center:
        raise ConfigError(
            f"line budget {budget} is smaller than the center band of {n_center} lines")
    selected = np.zeros(rows, dtype=bool)
    selected[center_lines(rows, n_center)] = True
    remaining = np.flatnonzero(~selected)
    extra = budget - n_center
    if extra > 0:
        selected[rng.choice(remaining, size=extra, replace=False)] = True
    return SamplingMask(rows, cols, selected, float(acceleration), float(center_fraction))


@dataclass(frozen=True)
class MaskSpec:
    """Distribution over masks: acceleration and center band, fresh lines per draw."""

    acceleration: float = 8.0
    center_fraction: float = 0.04

    def sample(self, rows: int, rng: RngStream, cols: int | None = None) -> SamplingMask:
        return make_cartesian_mask(rows, self.acceleration, self.center_fraction, rng, cols)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Measurement:
    ksp: np.ndarray
    mask: SamplingMask
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        ksp = np.asarray(self.ksp, dtype=np.complex128)
        if ksp.shape != self.mask.shape:
            raise ShapeMismatchError(f"ksp shape {ksp.shape} != mask shape {self.mask.shape}")
        object.__setattr__(self, "ksp", ksp)

    def with_ksp(self, ksp) -> "Measurement":
        """Same mask and noise, new k-space (re-masked so the zero-fill invariant holds)."""
        return Measurement(self.mask.apply(np.asarray(ksp)), self.mask, self.noise)


def forward(x: np.ndarray, mask: SamplingMask, noise: NoiseModel | None = None,
            rng: RngStream | None = None) -> Measurement:
    """Apply the acquisition model to a real image.

    Noise is complex Gaussian with std ``noise.sigma`` per real/imaginary
    component; the real field is drawn before the imaginary one.
    """
    noise = noise or NoiseModel()
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mask.shape:
        raise ShapeMismatchError(f"image shape {x.shape} != mask shape {mask.shape}")
    ksp = fft2(x)
    if noise.sigma > 0:
        if rng is None:
            raise ConfigError("a noisy forward model needs an RngStream")
        eps = rng.normal(x.shape) + 1j * rng.normal(x.shape)
        ksp = ksp + noise.sigma * eps
    return Measurement(mask.apply(ksp), mask, noise)


def adjoint(meas: Measurement) -> np.ndarray:
    """Zero-filled reconstruction ``Re(F^H y)``."""
    return ifft2(meas.ksp).real


def normal_op(x: np.ndarray, mask_matrix: np.ndarray) -> np.ndarray:
    """``A^H A x`` for real images, with A^H including the real-part projection."""
    return ifft2(mask_matrix * fft2(x)).real
