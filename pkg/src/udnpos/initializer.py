"""Two-phase fusion-filter initialization.

Phase one seeds position from the centroid of the LoS nodes' positions with a
deliberately broad covariance; phase two refines position and velocity with a
DoA-only warmup before the clock prior is attached and ToA measurements are
trusted. Initialization never inspects truth state, only node positions and
measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fusion import (
    FusionParams,
    UnFusionState,
    drop_degenerate,
    kinematic_process_noise,
    kinematic_transition,
    update_doa_only,
)
from .statespace import AnInfo, GaussianState, Measurement, Position2D, condition_cov

SIGMA_P0_FLOOR = 10.0  # m, for the single-AN degenerate centroid


@dataclass(frozen=True)
class InitConfig:
    """Initialization priors; defaults follow the nominal evaluation setup."""

    n_warmup: int = 20
    sigma_v0: float = 5.0           # m/s
    mu_alpha0: float = 25e-6        # 25 ppm
    sigma_alpha0: float = 30e-6     # 30 ppm
    sigma_rho0: float = 100e-6      # s
    sigma_p0_floor: float = SIGMA_P0_FLOOR

    def __post_init__(self):
        if self.n_warmup < 1:
            raise ValueError("warmup needs at least one iteration")
        for name in ("sigma_v0", "sigma_alpha0", "sigma_rho0", "sigma_p0_floor"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


def centroid_init(los_ans: list[AnInfo], cfg: InitConfig | None = None) -> tuple[Position2D, np.ndarray]:
    """Centroid of the LoS nodes' positions with isotropic covariance.

    sigma_p0 is the largest centroid-to-AN distance; the floor only covers the
    degenerate zero-spread case (single AN), where that distance vanishes.
    """
    if not los_ans:
        raise ValueError("centroid initialization needs at least one LoS AN")
    floor = cfg.sigma_p0_floor if cfg is not None else SIGMA_P0_FLOOR
    positions = np.array([an.position for an in los_ans], dtype=float)
    center = positions.mean(axis=0)
    spread = float(np.linalg.norm(positions - center, axis=1).max())
    sigma_p0 = spread if spread > 1e-9 else floor
    return Position2D(x=center[0], y=center[1]), sigma_p0**2 * np.eye(2)


def initial_kinematic_state(los_ans: list[AnInfo], cfg: InitConfig) -> GaussianState:
    """4-dim [x, y, vx, vy] prior: centroid position, zero-mean velocity."""
    pos, pos_cov = centroid_init(los_ans, cfg)
    mean = np.array([pos.x, pos.y, 0.0, 0.0])
    cov = np.zeros((4, 4))
    cov[:2, :2] = pos_cov
    cov[2:, 2:] = cfg.sigma_v0**2 * np.eye(2)
    return GaussianState(mean=mean, cov=cov)


def warmup_doa_only(
    state: GaussianState,
    measurement_stream: list[tuple[list[Measurement], list[AnInfo]]],
    n_warmup: int,
    params: FusionParams,
) -> GaussianState:
    """Run the DoA-only EKF on the 4-dim kinematic state for n_warmup steps.

    Velocity is refined as a by-product of the moving-bearing geometry. Steps
    whose measurement list is empty are predict-only.
    """
    if len(measurement_stream) < n_warmup:
        raise ValueError(
            f"warmup needs {n_warmup} steps but the stream has {len(measurement_stream)}"
        )
    f = kinematic_transition(params.dt)
    q = kinematic_process_noise(params.dt, params.sigma_v)
    mean, cov = state.mean.copy(), state.cov.copy()
    for measurements, ans in measurement_stream[:n_warmup]:
        mean = f @ mean
        cov = condition_cov(f @ cov @ f.T + q)
        measurements, ans = drop_degenerate(mean, measurements, ans)
        if measurements:
            mean, cov = update_doa_only(mean, measurements, ans, params, cov=cov)
    return GaussianState(mean=mean, cov=cov)


def attach_clock_prior(state: GaussianState, cfg: InitConfig, rng=None) -> UnFusionState:
    """Extend the 4-dim warmup output with the clock prior.

    The prior is deterministic (rho ~ N(0, sigma_rho0^2), alpha ~ N(mu_alpha0,
    sigma_alpha0^2) as distribution parameters); rng is accepted for interface
    symmetry with the truth-side draw but unused.
    """
    if state.dim != 4:
        raise ValueError("expected the 4-dim warmup output")
    mean = np.concatenate([state.mean, [0.0, cfg.mu_alpha0]])
    cov = np.zeros((6, 6))
    cov[:4, :4] = state.cov
    cov[4, 4] = cfg.sigma_rho0**2
    cov[5, 5] = cfg.sigma_alpha0**2
    return UnFusionState(mean=mean, cov=cov)


def select_reference_an(los_ans: list[AnInfo], un_estimate: np.ndarray) -> int:
    """Closest AN to the position estimate; ties break on the lowest id.

    The choice is made once, after initialization; it survives handovers.
    """
    if not los_ans:
        raise ValueError("cannot select a reference AN from an empty list")
    pos = np.asarray(un_estimate, dtype=float)[:2]
    best = min(los_ans, key=lambda an: (float(np.linalg.norm(an.xy() - pos)), an.an_id))
    return best.an_id
