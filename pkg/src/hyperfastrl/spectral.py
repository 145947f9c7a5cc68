"""Fourier-spectral discretisation and ETDRK4 stepping for the forced KS equation.

FFT convention: forward transforms are unnormalised, inverse transforms are
scaled by 1/N (numpy default).  All arrays carry the ensemble on the leading
axis and the N spatial modes on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "Etdrk4Coefficients",
    "ZeroModePolicy",
    "SpectralInstability",
    "linear_operator",
    "precompute_etdrk4",
    "nonlinear_term",
    "naive_nonlinear_term",
    "etdrk4_step",
    "to_spectral",
    "to_physical",
    "hermitian_project",
]

CONTOUR_POINTS = 32
CONTOUR_RADIUS = 1.0


class SpectralInstability(FloatingPointError):
    """Raised (or reported) when a step produces non-finite coefficients."""


@dataclass(frozen=True)
class GridSpec:
    L: float = 22.0
    N: int = 64

    def __post_init__(self):
        if self.N < 4 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 4, got {self.N}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.N) * self.dx

    @property
    def wavenumbers(self) -> np.ndarray:
        """k_m = 2*pi*m/L in FFT ordering (m = 0, 1, ..., N/2, -N/2+1, ..., -1)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.N, d=1.0 / self.N) / self.L

    @property
    def derivative_wavenumbers(self) -> np.ndarray:
        # Nyquist mode has no well-defined sign; zero it for odd derivatives.
        k = self.wavenumbers.copy()
        k[self.N // 2] = 0.0
        return k


@dataclass(frozen=True)
class ZeroModePolicy:
    """What to do with the k=0 coefficient after each substep.

    ``pin=None`` zeroes the spatial mean; ``pin=c`` pins the mean to ``c``.
    """

    pin: float | None = None

    @classmethod
    def zero_mean(cls) -> "ZeroModePolicy":
        return cls(None)

    @classmethod
    def pin_to(cls, value: float) -> "ZeroModePolicy":
        return cls(float(value))

    @property
    def mean(self) -> float:
        return 0.0 if self.pin is None else self.pin

    def apply(self, y_hat: np.ndarray, N: int) -> np.ndarray:
        y_hat[..., 0] = self.mean * N
        return y_hat


@dataclass(frozen=True)
class Etdrk4Coefficients:
    dt: float
    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)

    def astype(self, dtype) -> "Etdrk4Coefficients":
        return Etdrk4Coefficients(
            self.dt,
            *(a.astype(dtype) for a in (self.E, self.E2, self.Q, self.f1, self.f2, self.f3)),
            grid=self.grid,
        )


def linear_operator(grid: GridSpec) -> np.ndarray:
    """Fourier symbol of -(d_xx + d_xxxx): k^2 - k^4."""
    k = grid.wavenumbers
    return k**2 - k**4


def precompute_etdrk4(grid: GridSpec, dt: float, dtype=np.float64) -> Etdrk4Coefficients:
    """Kassam-Trefethen coefficients via contour averaging.

    The phi-functions are averaged over ``CONTOUR_POINTS`` equispaced points on
    a circle of radius ``CONTOUR_RADIUS`` around ``dt*L(k)``; this sidesteps the
    cancellation error of the closed forms near ``dt*L(k) = 0``.  Always
    computed in complex128 and downcast to ``dtype`` afterwards.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    lin = linear_operator(grid).astype(np.float64)
    E = np.exp(dt * lin)
    E2 = np.exp(dt * lin / 2.0)

    roots = CONTOUR_RADIUS * np.exp(2j * np.pi * (np.arange(CONTOUR_POINTS) + 0.5) / CONTOUR_POINTS)
    z = dt * lin[:, None] + roots[None, :]
    ez = np.exp(z)
    z3 = z**3
    Q = dt * np.mean((np.exp(z / 2.0) - 1.0) / z, axis=1).real
    f1 = dt * np.mean((-4.0 - z + ez * (4.0 - 3.0 * z + z**2)) / z3, axis=1).real
    f2 = dt * np.mean((2.0 + z + ez * (z - 2.0)) / z3, axis=1).real
    f3 = dt * np.mean((-4.0 - 3.0 * z - z**2 + ez * (4.0 - z)) / z3, axis=1).real

    arrays = (E, E2, Q, f1, f2, f3)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise SpectralInstability("non-finite ETDRK4 coefficient")
    return Etdrk4Coefficients(float(dt), *arrays, grid=grid).astype(dtype)


def to_spectral(y: np.ndarray) -> np.ndarray:
    return np.fft.fft(y, axis=-1)


def to_physical(y_hat: np.ndarray) -> np.ndarray:
    return np.fft.ifft(y_hat, axis=-1).real


def hermitian_project(y_hat: np.ndarray) -> np.ndarray:
    """Nearest coefficients of a real field: (y_hat[m] + conj(y_hat[-m])) / 2.

    Round-off leaves a small anti-Hermitian part that never reaches the
    (real-space) nonlinearity, so it would grow at the linear rate max L(k).
    """
    N = y_hat.shape[-1]
    mirror = np.conj(y_hat[..., (-np.arange(N)) % N])
    return 0.5 * (y_hat + mirror)


def _pad(y_hat: np.ndarray, M: int) -> np.ndarray:
    N = y_hat.shape[-1]
    half = N // 2
    out = np.zeros(y_hat.shape[:-1] + (M,), dtype=np.result_type(y_hat, np.complex64))
    out[..., :half] = y_hat[..., :half]
    out[..., M - half + 1 :] = y_hat[..., half + 1 :]
    return out


def _truncate(w_hat: np.ndarray, N: int) -> np.ndarray:
    M = w_hat.shape[-1]
    half = N // 2
    out = np.zeros(w_hat.shape[:-1] + (N,), dtype=w_hat.dtype)
    out[..., :half] = w_hat[..., :half]
    out[..., half + 1 :] = w_hat[..., M - half + 1 :]
    return out


def nonlinear_term(y_hat: np.ndarray, grid: GridSpec) -> np.ndarray:
    """De-aliased Fourier transform of -y*y_x = -(1/2) d_x(y^2), 3/2 rule.

    The Nyquist mode is dropped on padding so the result stays Hermitian.
    """
    N = grid.N
    M = 3 * N // 2
    y_pad = np.fft.ifft(_pad(y_hat, M), axis=-1).real * (M / N)
    sq_hat = np.fft.fft(y_pad * y_pad, axis=-1) * (N / M)
    return -0.5j * grid.derivative_wavenumbers * _truncate(sq_hat, N)


def naive_nonlinear_term(y_hat: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Same quantity without padding (aliased); reference for tests."""
    y = to_physical(y_hat)
    return -0.5j * grid.derivative_wavenumbers * to_spectral(y * y)


def etdrk4_step(
    y_hat: np.ndarray,
    forcing_hat: np.ndarray | float,
    coeffs: Etdrk4Coefficients,
    zero_mode: ZeroModePolicy | None = ZeroModePolicy(),
    nonlinear: bool = True,
) -> np.ndarray:
    """One ETDRK4 substep of y_t = L y + N(y) + F with F held constant.

    ``zero_mode=None`` leaves the k=0 coefficient untouched.  Non-finite values
    are not raised here; callers check with :func:`is_unstable`.
    """
    grid = coeffs.grid

    def rhs(v):
        if nonlinear:
            return nonlinear_term(v, grid) + forcing_hat
        return np.zeros_like(v) + forcing_hat

    E, E2, Q = coeffs.E, coeffs.E2, coeffs.Q
    Nv = rhs(y_hat)
    a = E2 * y_hat + Q * Nv
    Na = rhs(a)
    b = E2 * y_hat + Q * Na
    Nb = rhs(b)
    c = E2 * a + Q * (2.0 * Nb - Nv)
    Nc = rhs(c)
    out = hermitian_project(E * y_hat + coeffs.f1 * Nv + 2.0 * coeffs.f2 * (Na + Nb) + coeffs.f3 * Nc)
    if zero_mode is not None:
        zero_mode.apply(out, grid.N)
    return out


def is_unstable(y: np.ndarray, threshold: float = np.inf) -> np.ndarray:
    """Per-member flag: any non-finite value or max|y| above ``threshold``."""
    with np.errstate(invalid="ignore"):
        finite = np.all(np.isfinite(y), axis=-1)
        big = np.max(np.abs(np.nan_to_num(y, nan=0.0, posinf=np.inf)), axis=-1) > threshold
    return ~finite | big
