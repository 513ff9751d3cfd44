"""Shared domain types (geometry, clocks, measurements, Gaussian containers)
and the small-matrix utilities the tracking filters rely on.

Conventions: all clock quantities are seconds, angles are radians, the map
frame is a flat local Cartesian frame. Azimuth is measured counterclockwise
from the +x axis with full four-quadrant resolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0  # m/s
TWO_PI = 2.0 * math.pi


class DegenerateGeometryError(ValueError):
    """Raised when a geometric configuration makes a model function singular."""


def wrap_angle(a):
    """Wrap an angle (or array of angles) in radians to (-pi, pi].

    Idempotent and 2*pi-periodic; the -pi boundary maps to +pi.
    """
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap_angle requires finite input")
    wrapped = np.mod(arr + np.pi, TWO_PI) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(a) == 0:
        return float(wrapped)
    return wrapped


def wrap_to_positive(a):
    """Wrap an angle in radians to [0, 2*pi)."""
    arr = np.mod(np.asarray(a, dtype=float), TWO_PI)
    if np.ndim(a) == 0:
        return float(arr)
    return arr


def symmetrize_psd(m: np.ndarray) -> np.ndarray:
    """Return (M + M^T)/2 with eigenvalues floored at 1e-12 * trace.

    Intended for covariance conditioning of matrices whose coordinates share
    comparable scales; see `condition_cov` for the scale-aware variant the
    filters use on mixed-unit covariances.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    sym = 0.5 * (m + m.T)
    floor = 1e-12 * float(np.trace(sym))
    w, v = np.linalg.eigh(sym)
    if w[0] >= floor:
        return sym
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def condition_cov(m: np.ndarray) -> np.ndarray:
    """Symmetrize a covariance and repair indefiniteness scale-awarely.

    Repair happens in Jacobi-equilibrated coordinates so that coordinates with
    wildly different units (seconds^2 next to rad^2 or m^2) keep their own
    floor instead of inheriting an absolute one from the trace. Coordinates
    with exactly zero variance (pinned states) are left untouched.
    """
    sym = 0.5 * (np.asarray(m, dtype=float) + np.asarray(m, dtype=float).T)
    d = np.sqrt(np.abs(np.diag(sym)))
    d = np.where(d > 0.0, d, 1.0)
    scaled = sym / np.outer(d, d)
    w, v = np.linalg.eigh(scaled)
    if w[0] >= 0.0:
        return sym
    w = np.maximum(w, 0.0)
    repaired = (v * w) @ v.T
    return repaired * np.outer(d, d)


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite `a`.

    Uses Jacobi equilibration before the Cholesky factorization so systems
    mixing second- and radian-scaled coordinates (condition numbers ~1e14)
    stay solvable; escalating diagonal jitter handles borderline matrices.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.sqrt(np.abs(np.diag(a)))
    d = np.where(d > 0.0, d, 1.0)
    scaled = 0.5 * (a + a.T) / np.outer(d, d)
    rhs = b / d[:, None] if b.ndim == 2 else b / d
    n = a.shape[0]
    for jitter in (0.0, 1e-14, 1e-12, 1e-9, 1e-6):
        try:
            factor = cho_factor(scaled + jitter * np.eye(n), lower=True)
            if jitter:
                log.warning("solve_spd: added diagonal jitter %g", jitter)
            x = cho_solve(factor, rhs)
            return x / d[:, None] if b.ndim == 2 else x / d
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("matrix is not positive definite even after jitter")


def inv_spd(a: np.ndarray) -> np.ndarray:
    """Invert a symmetric positive definite matrix via equilibrated Cholesky."""
    return solve_spd(a, np.eye(a.shape[0]))


def _frozen_array(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("position components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Velocity2D:
    vx: float
    vy: float

    def __post_init__(self):
        if not (math.isfinite(self.vx) and math.isfinite(self.vy)):
            raise ValueError("velocity components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


@dataclass(frozen=True)
class ClockState:
    """Clock offset (seconds) and skew (seconds drift per second)."""

    offset: float
    skew: float

    def __post_init__(self):
        if not (math.isfinite(self.offset) and math.isfinite(self.skew)):
            raise ValueError("clock state must be finite")
        if abs(self.skew) >= 1e-3:
            raise ValueError(f"clock skew {self.skew} exceeds the 1e-3 sanity bound")


@dataclass(frozen=True)
class ClockModelParams:
    """First-order AR skew model plus AN offset random walk.

    beta: AR coefficient of the skew; sigma_eta: skew driving-noise STD per
    step; sigma_rho: AN offset random-walk STD per sqrt(second).
    """

    beta: float
    sigma_eta: float
    sigma_rho: float = 0.0

    def __post_init__(self):
        if abs(self.beta) > 1.0:
            raise ValueError("|beta| must be <= 1")
        if self.sigma_eta < 0.0 or self.sigma_rho < 0.0:
            raise ValueError("noise STDs must be non-negative")


@dataclass(frozen=True)
class AnInfo:
    """Access-node deployment record (truth side)."""

    an_id: int
    position: tuple[float, float]
    antenna_height: float = 7.0
    clock_offset: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.position):
            raise ValueError("AN position must be finite")
        if self.antenna_height <= 0.0:
            raise ValueError("antenna height must be positive")

    def xy(self) -> np.ndarray:
        return np.array(self.position, dtype=float)


@dataclass(frozen=True)
class Measurement:
    """Azimuth/ToA measurement from one access node.

    covariance is the 2x2 marginal of (azimuth, toa), i.e. entries in
    radians^2, rad*s and seconds^2.
    """

    an_id: int
    azimuth: float
    toa: float
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2):
            raise ValueError("measurement covariance must be 2x2")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, abs(np.trace(cov)))):
            raise ValueError("measurement covariance must be symmetric")
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, abs(np.trace(cov))):
            raise ValueError("measurement covariance must be PSD")
        if not (0.0 <= self.azimuth < TWO_PI):
            raise ValueError("azimuth must lie in [0, 2*pi)")
        object.__setattr__(self, "covariance", _frozen_array(cov))


@dataclass(frozen=True)
class GaussianState:
    """Mean vector plus symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean)
        cov = _frozen_array(self.cov)
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match dim {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("state must be finite")
        scale = max(1.0, float(np.abs(np.trace(cov))))
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * scale):
            raise ValueError("covariance must be symmetric to 1e-12 relative")
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * scale:
            raise ValueError("covariance must be numerically PSD")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]
