"""Central fusion EKFs over azimuth-DoA/ToA measurements from LoS nodes.

Three variants share the kinematics + clock state [x, y, vx, vy, rho, alpha]:

* DoA-only: azimuth rows only, the reference method;
* Pos&Clock: azimuth + ToA with synchronized access nodes;
* Pos&Sync: state augmented with per-AN clock offsets relative to a pinned
  reference node, for phase-locked but mutually unsynchronized nodes.

All updates are gain-form with Joseph covariance arithmetic; azimuth
innovations are wrapped before the gain multiplication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .statespace import (
    SPEED_OF_LIGHT,
    AnInfo,
    DegenerateGeometryError,
    Measurement,
    condition_cov,
    solve_spd,
    wrap_angle,
)

MIN_AN_DISTANCE = 0.1  # meters; below this the arctangent geometry degenerates
GUARD_SKIP_DISTANCE = 0.5  # meters; drivers skip measurements inside this radius


class UnknownAnError(KeyError):
    """Measurement from an AN that has no offset coordinate in the state."""


@dataclass(frozen=True)
class FusionParams:
    """Fusion filter tuning: step length, process noises, clock model."""

    dt: float = 0.1
    sigma_v: float = 3.5        # m/s, velocity noise STD
    sigma_eta: float = 1e-4     # skew driving-noise STD (filter side)
    beta: float = 1.0
    sigma_rho: float = 0.0      # AN offset random-walk STD per sqrt(s)
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.dt <= 0.0 or self.sigma_v <= 0.0 or self.sigma_eta < 0.0:
            raise ValueError("dt and sigma_v must be positive, sigma_eta non-negative")
        if abs(self.beta) > 1.0 or self.sigma_rho < 0.0:
            raise ValueError("|beta| <= 1 and sigma_rho >= 0 required")


@dataclass(frozen=True)
class UnFusionState:
    """User-node state [x, y, vx, vy, rho, alpha] with 6x6 covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        if mean.shape != (6,) or cov.shape != (6, 6):
            raise ValueError("fusion state is 6-dimensional")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def clock_offset(self) -> float:
        return float(self.mean[4])


def kinematic_transition(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    return f


def kinematic_process_noise(dt: float, sigma_v: float) -> np.ndarray:
    q = np.zeros((4, 4))
    q[:2, :2] = sigma_v**2 * dt**3 / 3.0 * np.eye(2)
    q[:2, 2:] = q[2:, :2] = sigma_v**2 * dt**2 / 2.0 * np.eye(2)
    q[2:, 2:] = sigma_v**2 * dt * np.eye(2)
    return q


def un_transition(p: FusionParams) -> np.ndarray:
    """F_UN = blkdiag(kinematics, clock) with clock block [[1, dt], [0, beta]]."""
    f = np.zeros((6, 6))
    f[:4, :4] = kinematic_transition(p.dt)
    f[4, 4] = 1.0
    f[4, 5] = p.dt
    f[5, 5] = p.beta
    return f


def un_process_noise(p: FusionParams) -> np.ndarray:
    q = np.zeros((6, 6))
    q[:4, :4] = kinematic_process_noise(p.dt, p.sigma_v)
    dt, s2 = p.dt, p.sigma_eta**2
    q[4, 4] = s2 * dt**3 / 3.0
    q[4, 5] = q[5, 4] = s2 * dt**2 / 2.0
    q[5, 5] = s2 * dt
    return q


def predict_pos_clock(state: UnFusionState, p: FusionParams) -> UnFusionState:
    f = un_transition(p)
    mean = f @ state.mean
    cov = condition_cov(f @ state.cov @ f.T + un_process_noise(p))
    return UnFusionState(mean=mean, cov=cov)


def measurement_model_pos_clock(mean: np.ndarray, an: AnInfo) -> tuple[float, float]:
    """Predicted (azimuth, toa): four-quadrant bearing and range/c + rho."""
    dx = mean[0] - an.position[0]
    dy = mean[1] - an.position[1]
    d = math.hypot(dx, dy)
    if d < MIN_AN_DISTANCE:
        raise DegenerateGeometryError(
            f"UN estimate within {MIN_AN_DISTANCE} m of AN {an.an_id}"
        )
    return math.atan2(dy, dx), d / SPEED_OF_LIGHT + mean[4]


def jacobian_pos_clock(mean: np.ndarray, ans: list[AnInfo]) -> np.ndarray:
    """Stacked 2K x 6 Jacobian: azimuth row then ToA row per AN."""
    h = np.zeros((2 * len(ans), 6))
    for k, an in enumerate(ans):
        dx = mean[0] - an.position[0]
        dy = mean[1] - an.position[1]
        d2 = dx * dx + dy * dy
        d = math.sqrt(d2)
        if d < MIN_AN_DISTANCE:
            raise DegenerateGeometryError(
                f"UN estimate within {MIN_AN_DISTANCE} m of AN {an.an_id}"
            )
        h[2 * k, 0] = -dy / d2
        h[2 * k, 1] = dx / d2
        h[2 * k + 1, 0] = dx / (SPEED_OF_LIGHT * d)
        h[2 * k + 1, 1] = dy / (SPEED_OF_LIGHT * d)
        h[2 * k + 1, 4] = 1.0
    return h


def _resolve_ans(measurements: list[Measurement], ans: list[AnInfo]) -> list[AnInfo]:
    by_id = {an.an_id: an for an in ans}
    try:
        return [by_id[m.an_id] for m in measurements]
    except KeyError as exc:
        raise UnknownAnError(f"no AnInfo for AN id {exc.args[0]}") from None


def _check_r_psd(r: np.ndarray) -> None:
    if np.linalg.eigvalsh(r)[0] < -1e-10 * max(1.0, abs(float(np.trace(r)))):
        raise ValueError("stacked measurement covariance is not PSD")


def _gain_update(mean, cov, innov, h, r):
    """Joseph-form gain update; returns (mean, cov)."""
    s = h @ cov @ h.T + r
    _check_r_psd(r)
    k = solve_spd(s, h @ cov).T
    new_mean = mean + k @ innov
    ikh = np.eye(cov.shape[0]) - k @ h
    new_cov = condition_cov(ikh @ cov @ ikh.T + k @ r @ k.T)
    return new_mean, new_cov


def update_pos_clock(
    state: UnFusionState,
    measurements: list[Measurement],
    ans: list[AnInfo],
    p: FusionParams,
) -> UnFusionState:
    """Gain-form update on stacked (azimuth, toa) pairs."""
    if not measurements:
        raise ValueError("need at least one measurement")
    resolved = _resolve_ans(measurements, ans)
    h = jacobian_pos_clock(state.mean, resolved)
    innov = np.empty(2 * len(measurements))
    r = np.zeros((2 * len(measurements),) * 2)
    for k, (meas, an) in enumerate(zip(measurements, resolved)):
        phi_pred, tau_pred = measurement_model_pos_clock(state.mean, an)
        innov[2 * k] = wrap_angle(meas.azimuth - phi_pred)
        innov[2 * k + 1] = meas.toa - tau_pred
        r[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = meas.covariance
    mean, cov = _gain_update(state.mean, state.cov, innov, h, r)
    return UnFusionState(mean=mean, cov=cov)


def update_doa_only(
    state: UnFusionState | np.ndarray,
    measurements: list[Measurement],
    ans: list[AnInfo],
    p: FusionParams,
    cov: np.ndarray | None = None,
):
    """Azimuth-only gain update; works on 4-dim warmup or 6-dim states.

    Only the azimuth variance of each measurement enters; ToA entries are
    ignored entirely. Clock coordinates are untouched because neither the
    rows nor the (block-diagonal) prediction couple them to the kinematics.
    """
    if isinstance(state, UnFusionState):
        mean, pcov = state.mean, state.cov
        wrap = True
    else:
        mean, pcov = np.asarray(state, dtype=float), np.asarray(cov, dtype=float)
        wrap = False
    if not measurements:
        raise ValueError("need at least one measurement")
    resolved = _resolve_ans(measurements, ans)
    dim = mean.shape[0]
    h = np.zeros((len(measurements), dim))
    innov = np.empty(len(measurements))
    r = np.zeros((len(measurements),) * 2)
    for k, (meas, an) in enumerate(zip(measurements, resolved)):
        dx = mean[0] - an.position[0]
        dy = mean[1] - an.position[1]
        d2 = dx * dx + dy * dy
        if math.sqrt(d2) < MIN_AN_DISTANCE:
            raise DegenerateGeometryError(
                f"UN estimate within {MIN_AN_DISTANCE} m of AN {an.an_id}"
            )
        h[k, 0] = -dy / d2
        h[k, 1] = dx / d2
        innov[k] = wrap_angle(meas.azimuth - math.atan2(dy, dx))
        r[k, k] = meas.covariance[0, 0]
    new_mean, new_cov = _gain_update(mean, pcov, innov, h, r)
    if wrap:
        return UnFusionState(mean=new_mean, cov=new_cov)
    return new_mean, new_cov


# ---------------------------------------------------------------------------
# Pos&Sync: augmented state with per-AN clock offsets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetiredOffset:
    """Cached posterior of a retired AN offset, for later re-admission."""

    mean: float
    var: float
    retired_at: float


@dataclass(frozen=True)
class SyncFusionState:
    """UN state plus clock offsets of the tracked ANs.

    an_ids orders the offset coordinates 6..6+K-1; the reference AN is pinned
    to offset 0 with zero variance. Retired ANs keep their last posterior in
    `retired` so re-admission can restore it with an age-inflated variance.
    `t` is the filter time used for that inflation.
    """

    mean: np.ndarray
    cov: np.ndarray
    an_ids: tuple[int, ...]
    reference_an: int
    t: float = 0.0
    retired: tuple[tuple[int, RetiredOffset], ...] = ()

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        k = len(self.an_ids)
        if mean.shape != (6 + k,) or cov.shape != (6 + k, 6 + k):
            raise ValueError("state dimension must be 6 + number of tracked ANs")
        if len(set(self.an_ids)) != k:
            raise ValueError("duplicate AN ids in state")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def un(self) -> UnFusionState:
        return UnFusionState(mean=self.mean[:6], cov=condition_cov(self.cov[:6, :6]))

    def offset_index(self, an_id: int) -> int:
        try:
            return 6 + self.an_ids.index(an_id)
        except ValueError:
            raise UnknownAnError(f"AN {an_id} has no offset coordinate") from None

    def offset_estimate(self, an_id: int) -> tuple[float, float]:
        i = self.offset_index(an_id)
        return float(self.mean[i]), float(self.cov[i, i])

    @classmethod
    def from_un_state(cls, un: UnFusionState, reference_an: int, t: float = 0.0) -> "SyncFusionState":
        """Start tracking with only the (pinned) reference AN admitted."""
        mean = np.concatenate([un.mean, [0.0]])
        cov = np.zeros((7, 7))
        cov[:6, :6] = un.cov
        return cls(mean=mean, cov=cov, an_ids=(reference_an,), reference_an=reference_an, t=t)


def _pin_reference(mean: np.ndarray, cov: np.ndarray, idx: int) -> None:
    mean[idx] = 0.0
    cov[idx, :] = 0.0
    cov[:, idx] = 0.0


def predict_pos_sync(state: SyncFusionState, p: FusionParams) -> SyncFusionState:
    """UN block as predict_pos_clock; AN offsets random-walk (reference pinned)."""
    k = len(state.an_ids)
    f = np.eye(6 + k)
    f[:6, :6] = un_transition(p)
    q = np.zeros((6 + k, 6 + k))
    q[:6, :6] = un_process_noise(p)
    ref_idx = state.offset_index(state.reference_an)
    for i in range(6, 6 + k):
        if i != ref_idx:
            q[i, i] = p.sigma_rho**2 * p.dt
    mean = f @ state.mean
    cov = f @ state.cov @ f.T + q
    _pin_reference(mean, cov, ref_idx)
    return replace(state, mean=mean, cov=condition_cov(cov), t=state.t + p.dt)


def update_pos_sync(
    state: SyncFusionState,
    measurements: list[Measurement],
    ans: list[AnInfo],
    p: FusionParams,
) -> SyncFusionState:
    """Gain-form update on the augmented state.

    Each ToA row gains a unit entry at the measuring AN's offset coordinate;
    the reference offset is re-pinned to zero afterwards.
    """
    if not measurements:
        raise ValueError("need at least one measurement")
    resolved = _resolve_ans(measurements, ans)
    dim = 6 + len(state.an_ids)
    n = len(measurements)
    h = np.zeros((2 * n, dim))
    h[:, :6] = jacobian_pos_clock(state.mean[:6], resolved)
    innov = np.empty(2 * n)
    r = np.zeros((2 * n, 2 * n))
    for k, (meas, an) in enumerate(zip(measurements, resolved)):
        idx = state.offset_index(meas.an_id)
        h[2 * k + 1, idx] = 1.0
        phi_pred, tau_pred = measurement_model_pos_clock(state.mean[:6], an)
        tau_pred += state.mean[idx]
        innov[2 * k] = wrap_angle(meas.azimuth - phi_pred)
        innov[2 * k + 1] = meas.toa - tau_pred
        r[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = meas.covariance
    mean, cov = _gain_update(state.mean, state.cov, innov, h, r)
    cov = cov.copy()
    _pin_reference(mean, cov, state.offset_index(state.reference_an))
    return replace(state, mean=mean, cov=condition_cov(cov))


def admit_an(
    state: SyncFusionState,
    an_id: int,
    prior_offset_var: float,
    params: FusionParams | None = None,
) -> SyncFusionState:
    """Augment the state with an offset coordinate for a newly seen AN.

    A previously retired AN restores its cached posterior mean with variance
    inflated by sigma_rho^2 * elapsed time (the random-walk growth it missed);
    otherwise the offset starts at 0 with prior_offset_var. Cross-covariances
    start at zero either way.
    """
    if an_id in state.an_ids:
        raise ValueError(f"AN {an_id} already admitted")
    offset_mean, offset_var = 0.0, prior_offset_var
    retired = dict(state.retired)
    if an_id in retired:
        cached = retired.pop(an_id)
        offset_mean = cached.mean
        offset_var = cached.var
        if params is not None:
            offset_var += params.sigma_rho**2 * max(state.t - cached.retired_at, 0.0)
    dim = state.mean.shape[0]
    mean = np.concatenate([state.mean, [offset_mean]])
    cov = np.zeros((dim + 1, dim + 1))
    cov[:dim, :dim] = state.cov
    cov[dim, dim] = offset_var
    return replace(
        state,
        mean=mean,
        cov=cov,
        an_ids=state.an_ids + (an_id,),
        retired=tuple(sorted(retired.items())),
    )


def retire_an(state: SyncFusionState, an_id: int) -> SyncFusionState:
    """Marginalize out an AN offset, caching its posterior for re-admission."""
    if an_id == state.reference_an:
        raise ValueError("the reference AN is never retired")
    idx = state.offset_index(an_id)
    offset_mean, offset_var = state.offset_estimate(an_id)
    keep = [i for i in range(state.mean.shape[0]) if i != idx]
    retired = dict(state.retired)
    retired[an_id] = RetiredOffset(mean=offset_mean, var=offset_var, retired_at=state.t)
    return replace(
        state,
        mean=state.mean[keep],
        cov=state.cov[np.ix_(keep, keep)],
        an_ids=tuple(a for a in state.an_ids if a != an_id),
        retired=tuple(sorted(retired.items())),
    )


# ---------------------------------------------------------------------------
# Filter drivers
# ---------------------------------------------------------------------------


def drop_degenerate(mean: np.ndarray, measurements: list[Measurement], ans: list[AnInfo]):
    """Skip measurements whose AN lies inside the degenerate-geometry guard.

    The update ops raise on such geometry by contract; the drivers instead
    drop the offending rows for that step, since a linearization point on top
    of an AN carries no usable bearing anyway.
    """
    by_id = {an.an_id: an for an in ans}
    kept = [
        m
        for m in measurements
        if m.an_id in by_id
        and float(np.linalg.norm(by_id[m.an_id].xy() - mean[:2])) > GUARD_SKIP_DISTANCE
    ]
    return kept, [by_id[m.an_id] for m in kept]


class PosClockFilter:
    """Pos&Clock EKF: synchronized ANs, UN position/velocity/clock tracking."""

    def __init__(self, state: UnFusionState, params: FusionParams):
        self.state = state
        self.params = params

    def step(self, measurements: list[Measurement], ans: list[AnInfo]) -> UnFusionState:
        self.state = predict_pos_clock(self.state, self.params)
        measurements, ans = drop_degenerate(self.state.mean, measurements, ans)
        if measurements:
            self.state = update_pos_clock(self.state, measurements, ans, self.params)
        return self.state

    @property
    def un_state(self) -> UnFusionState:
        return self.state


class DoaOnlyFilter:
    """Reference method: azimuth-only updates on the same state."""

    def __init__(self, state: UnFusionState, params: FusionParams):
        self.state = state
        self.params = params

    def step(self, measurements: list[Measurement], ans: list[AnInfo]) -> UnFusionState:
        self.state = predict_pos_clock(self.state, self.params)
        measurements, ans = drop_degenerate(self.state.mean, measurements, ans)
        if len(measurements) >= 2:
            self.state = update_doa_only(self.state, measurements, ans, self.params)
        return self.state

    @property
    def un_state(self) -> UnFusionState:
        return self.state


class PosSyncFilter:
    """Pos&Sync EKF with automatic admit/retire of AN offset coordinates."""

    def __init__(
        self,
        state: SyncFusionState,
        params: FusionParams,
        prior_offset_var: float = (100e-6) ** 2,
    ):
        self.state = state
        self.params = params
        self.prior_offset_var = prior_offset_var

    def step(self, measurements: list[Measurement], ans: list[AnInfo]) -> SyncFusionState:
        self.state = predict_pos_sync(self.state, self.params)
        measurements, ans = drop_degenerate(self.state.mean[:6], measurements, ans)
        if measurements:
            current = {m.an_id for m in measurements}
            for an_id in sorted(current):
                if an_id not in self.state.an_ids:
                    self.state = admit_an(
                        self.state, an_id, self.prior_offset_var, self.params
                    )
            for an_id in list(self.state.an_ids):
                if an_id != self.state.reference_an and an_id not in current:
                    self.state = retire_an(self.state, an_id)
            self.state = update_pos_sync(self.state, measurements, ans, self.params)
        return self.state

    @property
    def un_state(self) -> UnFusionState:
        return self.state.un
