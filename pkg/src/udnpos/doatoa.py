"""Per-access-node information-form EKF tracking the dominant path.

State vector: [tau, theta, phi, dtau, dtheta, dphi] (delay in seconds, angles
in radians, plus their rates). Path weights are nuisance parameters handled by
concentrating them out of the likelihood: the filter works on the residual
r = P_perp(s) g left after projecting the snapshot off the fitted single-path
response, and feeds the observed FIM / score of that residual into an
information-form update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .arraychannel import (
    ArrayManifold,
    ChannelSnapshot,
    PathParams,
    PilotGrid,
    polarimetric_response,
    polarimetric_response_derivs,
)
from .statespace import (
    Measurement,
    condition_cov,
    inv_spd,
    solve_spd,
    wrap_angle,
    wrap_to_positive,
)

log = logging.getLogger(__name__)

THETA_CLAMP = 1e-3  # keep co-elevation off the coordinate poles

# default process-noise STDs per sqrt(s), per coordinate (s/s, rad/s, rad/s);
# the printed model uses a single sigma for all three, which is only usable
# when delay and angles share a unit scale
DEFAULT_SIGMA_W = (1e-8, 0.7, 0.7)


class DegenerateResponseError(ValueError):
    """Raised when the fitted response columns are (near-)parallel."""


@dataclass(frozen=True)
class CwnaParams:
    """Continuous white-noise acceleration model parameters.

    sigma_w may be a scalar (identical for delay and angle coordinates,
    matching the printed block form) or a per-coordinate 3-vector.
    """

    sigma_w: float | tuple[float, float, float] = DEFAULT_SIGMA_W
    dt: float = 0.1

    def __post_init__(self):
        sw = np.atleast_1d(np.asarray(self.sigma_w, dtype=float))
        if sw.size == 1:
            sw = np.full(3, sw[0])
        if sw.shape != (3,) or np.any(sw <= 0.0):
            raise ValueError("sigma_w must be a positive scalar or 3-vector")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        sw.setflags(write=False)
        object.__setattr__(self, "sigma_w", sw)


def cwna_matrices(p: CwnaParams) -> tuple[np.ndarray, np.ndarray]:
    """State transition F and process covariance Q of the CWNA model."""
    dt = p.dt
    f = np.eye(6)
    f[:3, 3:] = dt * np.eye(3)
    d = np.diag(np.asarray(p.sigma_w) ** 2)
    q = np.block(
        [
            [dt**3 / 3.0 * d, dt**2 / 2.0 * d],
            [dt**2 / 2.0 * d, dt * d],
        ]
    )
    return f, q


@dataclass(frozen=True)
class AnTrackState:
    """Tracker state: mean [tau, theta, phi, rates...] with 6x6 covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        if mean.shape != (6,) or cov.shape != (6, 6):
            raise ValueError("tracker state is 6-dimensional")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def normalized(self) -> "AnTrackState":
        mean = self.mean.copy()
        mean[1] = min(max(mean[1], THETA_CLAMP), math.pi - THETA_CLAMP)
        mean[2] = wrap_to_positive(mean[2])
        return AnTrackState(mean=mean, cov=self.cov)


def predict(state: AnTrackState, p: CwnaParams) -> AnTrackState:
    """CWNA prediction: s <- F s, P <- F P F^T + Q (re-symmetrized)."""
    f, q = cwna_matrices(p)
    mean = f @ state.mean
    cov = condition_cov(f @ state.cov @ f.T + q)
    return AnTrackState(mean=mean, cov=cov).normalized()


@dataclass(frozen=True)
class PathProjection:
    """Fitted single-path response with its implicit orthogonal projector."""

    b: np.ndarray        # M x 2 response at the evaluation point
    gram_inv: np.ndarray  # (B^H B)^(-1)
    weights: np.ndarray  # B^+ g, the concentrated path weights
    residual: np.ndarray  # g - B (B^+ g)

    def project_out(self, x: np.ndarray) -> np.ndarray:
        """Apply the orthogonal projector onto the nullspace of B^H."""
        return x - self.b @ (self.gram_inv @ (self.b.conj().T @ x))


def _fit_projection(g: np.ndarray, b: np.ndarray) -> PathProjection:
    gram = b.conj().T @ b
    w = np.linalg.eigvalsh(gram)
    if w[0] <= 1e-12 * w[-1]:
        raise DegenerateResponseError("response columns are nearly parallel")
    gram_inv = np.linalg.inv(gram)
    weights = gram_inv @ (b.conj().T @ g)
    residual = g - b @ weights
    return PathProjection(b=b, gram_inv=gram_inv, weights=weights, residual=residual)


def concentrated_residual(
    state_mean: np.ndarray,
    snapshot: ChannelSnapshot,
    manifold: ArrayManifold,
    grid: PilotGrid,
) -> tuple[np.ndarray, PathProjection]:
    """Residual after projecting the snapshot off the fitted path response."""
    tau, theta, phi = state_mean[0], state_mean[1], state_mean[2]
    path = PathParams(
        tau=tau,
        theta=min(max(theta, 0.0), math.pi),
        phi=wrap_to_positive(phi),
        gamma=np.zeros(2),
    )
    b = polarimetric_response(path, manifold, grid)
    if b.shape[0] != snapshot.g.size:
        raise ValueError("snapshot length does not match manifold/grid dimensions")
    proj = _fit_projection(snapshot.g, b)
    return proj.residual, proj


def _residual_derivatives(state_mean, snapshot, manifold, grid):
    """r and d r / d s for the first three coordinates (M x 3 complex)."""
    tau, theta, phi = state_mean[0], state_mean[1], state_mean[2]
    path = PathParams(
        tau=tau,
        theta=min(max(theta, 0.0), math.pi),
        phi=wrap_to_positive(phi),
        gamma=np.zeros(2),
    )
    b, db_dtau, db_dtheta, db_dphi = polarimetric_response_derivs(path, manifold, grid)
    proj = _fit_projection(snapshot.g, b)
    r = proj.residual
    b_pinv_h = b @ proj.gram_inv  # (B^+)^H, shape M x 2
    derivs = np.empty((snapshot.g.size, 3), dtype=complex)
    for i, db in enumerate((db_dtau, db_dtheta, db_dphi)):
        # dP_perp applied to g: -(P_perp dB B^+ + (P_perp dB B^+)^H) g
        term1 = proj.project_out(db @ proj.weights)
        term2 = b_pinv_h @ (db.conj().T @ r)
        derivs[:, i] = -(term1 + term2)
    return r, derivs, proj


def fim_and_score(
    state_mean: np.ndarray,
    snapshot: ChannelSnapshot,
    manifold: ArrayManifold,
    grid: PilotGrid,
    noise_var: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Observed FIM J and score v of the concentrated likelihood.

    J = (2/sigma^2) Re{(dr/ds)^H dr/ds}, v = -(2/sigma^2) Re{(dr/ds)^H r};
    only the (tau, theta, phi) rows/columns are nonzero.
    """
    r, derivs, _ = _residual_derivatives(state_mean, snapshot, manifold, grid)
    scale = 2.0 / noise_var
    j3 = scale * np.real(derivs.conj().T @ derivs)
    v3 = -scale * np.real(derivs.conj().T @ r)
    j = np.zeros((6, 6))
    j[:3, :3] = 0.5 * (j3 + j3.T)
    v = np.zeros(6)
    v[:3] = v3
    return j, v


def information_update(state: AnTrackState, j: np.ndarray, v: np.ndarray) -> AnTrackState:
    """Information-form update: P+ = ((P-)^-1 + J)^-1, s+ = s- + P+ v.

    The inversion runs in Jacobi-equilibrated coordinates; the state mixes
    seconds with radians, so raw condition numbers reach ~1e17. A singular
    prior covariance is regularized by 1e-12 * trace on the diagonal.
    """
    p_minus = state.cov
    d = np.sqrt(np.diag(p_minus))
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        bump = max(1e-12 * float(np.trace(p_minus)), 1e-30)
        log.warning("information_update: singular prior covariance, adding %g", bump)
        p_minus = p_minus + bump * np.eye(6)
        d = np.sqrt(np.diag(p_minus))
    scale = np.outer(d, d)
    p_scaled = p_minus / scale
    j_scaled = j * scale
    info = inv_spd(p_scaled) + j_scaled
    p_plus = inv_spd(info) / np.outer(1.0 / d, 1.0 / d)
    p_plus = condition_cov(p_plus)
    mean = state.mean + p_plus @ v
    return AnTrackState(mean=mean, cov=p_plus).normalized()


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

DEFAULT_FFT_PAD = 4
# prior rate STDs before two-point initialization (s/s, rad/s, rad/s); the
# delay rate is dominated by clock skew, so the prior covers a few 100 ppm
RATE_PRIOR_STD = (1e-4, 1.0, 1.0)


def _mode_lag_map(r_modes: np.ndarray, m_a: int, m_e: int, n_e: int, n_a: int) -> np.ndarray:
    """Evaluate d(w)^H R d(w) on the (n_e, n_a) angle FFT grid.

    R lives on the flattened mode index (p * m_a + q); the quadratic form is a
    trigonometric polynomial in the mode lags, so it is an inverse FFT of the
    lag-autocorrelation of R.
    """
    r4 = r_modes.reshape(m_e, m_a, m_e, m_a)
    buf = np.zeros((n_e, n_a), dtype=complex)
    for dp in range(-(m_e - 1), m_e):
        for dq in range(-(m_a - 1), m_a):
            # sum of R[(p, q), (p + dp, q + dq)] over valid p, q
            p0, p1 = max(0, -dp), min(m_e, m_e - dp)
            q0, q1 = max(0, -dq), min(m_a, m_a - dq)
            block = r4[p0:p1, q0:q1, p0 + dp : p1 + dp, q0 + dq : q1 + dq]
            buf[dp % n_e, dq % n_a] += np.einsum("pqpq->", block)
    return np.fft.ifft2(buf) * (n_e * n_a)


def init_beamformer(
    snapshot: ChannelSnapshot,
    manifold: ArrayManifold,
    grid: PilotGrid,
    fft_sizes: tuple[int, int, int] | None = None,
) -> tuple[float, float, float]:
    """Space-time conventional beamformer initializer.

    Reshapes the snapshot to subcarriers x ports, projects onto the conjugated
    EADFs, zero-padded 3D-FFTs each polarization, and scores each grid point
    with the concentrated single-path objective ||P_B(w) g||^2 (the raw
    |.|^2_H + |.|^2_V correlation is biased by the direction-dependent
    response norm, so the per-bin two-column Gram, itself FFT-evaluated from
    the EADF mode autocorrelations, normalizes it). The global maximum maps
    back to (tau, theta, phi): delay bins through the uniform allocation
    stride, and an elevation bin past pi denotes the mirror patch
    (2*pi - theta, phi + pi). Ties break at the lowest linear index.
    """
    g = snapshot.g
    if not np.any(g):
        raise ValueError("cannot initialize from an all-zero snapshot")
    stride = grid.uniform_stride
    if stride is None:
        raise ValueError("beamformer initializer requires a uniform-stride allocation")
    m_f, m_an, m_a, m_e = grid.m_f, manifold.m_an, manifold.m_a, manifold.m_e
    if g.size != m_f * m_an:
        raise ValueError("snapshot length does not match manifold/grid dimensions")
    if fft_sizes is None:
        fft_sizes = (DEFAULT_FFT_PAD * m_f, DEFAULT_FFT_PAD * m_e, DEFAULT_FFT_PAD * m_a)
    n_f, n_e, n_a = fft_sizes

    h = g.reshape(m_an, m_f).T  # subcarriers x ports
    corr = []
    for eadf in (manifold.g_h, manifold.g_v):
        a = (h @ eadf.conj()).reshape(m_f, m_e, m_a)
        corr.append(np.fft.fftn(a, s=(n_f, n_e, n_a), axes=(0, 1, 2)))
    q_h, q_v = corr

    gram_hh = np.real(_mode_lag_map(manifold.g_h.conj().T @ manifold.g_h, m_a, m_e, n_e, n_a))
    gram_vv = np.real(_mode_lag_map(manifold.g_v.conj().T @ manifold.g_v, m_a, m_e, n_e, n_a))
    gram_hv = _mode_lag_map(manifold.g_h.conj().T @ manifold.g_v, m_a, m_e, n_e, n_a)

    det = gram_hh * gram_vv - np.abs(gram_hv) ** 2
    det = np.maximum(det, 1e-6 * det.max())
    num = (
        gram_vv * np.abs(q_h) ** 2
        + gram_hh * np.abs(q_v) ** 2
        - 2.0 * np.real(np.conj(gram_hv) * q_h * np.conj(q_v))
    )
    score = num / det

    k_f, k_e, k_a = np.unravel_index(int(np.argmax(score)), score.shape)

    frac = k_f / n_f
    if frac >= 0.5:
        frac -= 1.0
    tau = frac / (grid.f0 * stride)
    phi = 2.0 * math.pi * k_a / n_a
    theta = 2.0 * math.pi * k_e / n_e
    if theta > math.pi:
        theta = 2.0 * math.pi - theta
        phi = wrap_to_positive(phi + math.pi)
    return tau, theta, phi


def initial_state(
    snapshot: ChannelSnapshot,
    manifold: ArrayManifold,
    grid: PilotGrid,
    fft_sizes: tuple[int, int, int] | None = None,
    tau_reference: float = 0.0,
) -> AnTrackState:
    """Beamformer estimate with covariance from the observed FIM there.

    The parameter covariance adds the FFT-grid quantization variance
    (bin^2 / 12 per coordinate) to the FIM inverse, since the beamformer
    returns bin centers. Rate variances start at broad priors until two
    estimates are available.

    tau_reference anchors the fractional beamformer delay to an absolute ToA:
    the steering model is periodic in 1/(f0 * stride) (the common phase folds
    into the path weights), so the receiver's FFT-window placement, known at
    the node from its symbol-sync loop, supplies the integer part.
    """
    tau, theta, phi = init_beamformer(snapshot, manifold, grid, fft_sizes)
    mean = np.array([tau_reference + tau, theta, phi, 0.0, 0.0, 0.0])
    # polish the bin-quantized fix with Gauss-Newton steps on the same
    # snapshot: the FFT bins are much finer than the likelihood main lobe, so
    # the iteration starts inside the quadratic basin and lands at CRB-level
    # accuracy, which the two-point rate initialization then inherits
    j = None
    for _ in range(3):
        j, v = fim_and_score(mean, snapshot, manifold, grid, snapshot.noise_var)
        step3 = solve_spd(j[:3, :3] + 1e-30 * np.eye(3), v[:3])
        mean = mean.copy()
        mean[:3] += step3
        mean[1] = min(max(mean[1], THETA_CLAMP), math.pi - THETA_CLAMP)
        mean[2] = wrap_to_positive(mean[2])
    cov = np.zeros((6, 6))
    cov[:3, :3] = inv_spd(condition_cov(j[:3, :3]) + 1e-30 * np.eye(3))
    cov[3:, 3:] = np.diag(np.asarray(RATE_PRIOR_STD) ** 2)
    return AnTrackState(mean=mean, cov=condition_cov(cov)).normalized()


def init_rates(
    mean1: np.ndarray,
    cov1: np.ndarray,
    mean2: np.ndarray,
    cov2: np.ndarray,
    dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-point rate initialization from consecutive parameter estimates.

    rate_i = (s2_i - s1_i) / dt with variance (P1_ii + P2_ii) / dt^2, applied
    to all three parameter coordinates; angle differences are wrapped so the
    0/2pi seam does not fabricate huge rates.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    m1 = np.asarray(mean1, dtype=float)[:3]
    m2 = np.asarray(mean2, dtype=float)[:3]
    diff = m2 - m1
    diff[1] = wrap_angle(diff[1])
    diff[2] = wrap_angle(diff[2])
    rates = diff / dt
    var1 = np.diag(np.asarray(cov1))[:3]
    var2 = np.diag(np.asarray(cov2))[:3]
    return rates, (var1 + var2) / dt**2


def measurement_from_state(state: AnTrackState, an_id: int) -> Measurement:
    """Extract the (azimuth, toa) measurement with its marginal covariance."""
    cov = state.cov
    r = np.array(
        [
            [cov[2, 2], cov[2, 0]],
            [cov[0, 2], cov[0, 0]],
        ]
    )
    return Measurement(
        an_id=an_id,
        azimuth=wrap_to_positive(state.mean[2]),
        toa=float(state.mean[0]),
        covariance=0.5 * (r + r.T),
    )


def track_step(
    state: AnTrackState,
    snapshot: ChannelSnapshot,
    manifold: ArrayManifold,
    grid: PilotGrid,
    params: CwnaParams,
    an_id: int = 0,
) -> tuple[AnTrackState, Measurement]:
    """One predict + information-update cycle, emitting the fused measurement."""
    pred = predict(state, params)
    j, v = fim_and_score(pred.mean, snapshot, manifold, grid, snapshot.noise_var)
    post = information_update(pred, j, v)
    return post, measurement_from_state(post, an_id)


REACQUIRE_QUALITY = 3.0  # post-fit residual energy / (sigma^2 M) restart threshold


class AnTracker:
    """Stateful per-AN tracker: beamformer init, two-point rate init, then
    steady-state information-form tracking. One instance per AN; processes
    snapshots in time order.

    The tracker monitors its own fit quality: the residual energy of a locked
    single-path fit is ~sigma^2 per sample, so a post-update ratio far above 1
    means the linearized update lost the main lobe (the score's pull-in range
    is one delay-resolution cell, far narrower than the alias window a
    drifting clock can sweep in one period). It then restarts from the
    beamformer, which searches the whole window."""

    def __init__(
        self,
        manifold: ArrayManifold,
        grid: PilotGrid,
        params: CwnaParams,
        an_id: int = 0,
        fft_sizes: tuple[int, int, int] | None = None,
        tau_reference: float = 0.0,
    ):
        self.manifold = manifold
        self.grid = grid
        self.params = params
        self.an_id = an_id
        self.fft_sizes = fft_sizes
        self.tau_reference = tau_reference
        self.state: AnTrackState | None = None
        self._n = 0
        self._rates_ok = False
        self._prev_estimate: tuple[np.ndarray, np.ndarray] | None = None

    def step(self, snapshot: ChannelSnapshot, tau_reference: float | None = None) -> Measurement:
        """Process one snapshot; optionally re-anchor the delay to the sync loop.

        tau_reference is the receiver's current FFT-window placement. The
        steering model is periodic in the allocation's alias window, so after
        prediction the delay estimate is snapped by whole alias periods onto
        the window; until the delay rate is learned, a drifting clock can move
        the true delay across several aliases per step and the local update
        alone would lock onto the wrong one.
        """
        self._n += 1
        if tau_reference is not None:
            self.tau_reference = tau_reference
        if self.state is None:
            self._restart(snapshot)
        else:
            pred = predict(self.state, self.params)
            stride = self.grid.uniform_stride
            if tau_reference is not None and stride is not None:
                alias = 1.0 / (self.grid.f0 * stride)
                shift = alias * round((tau_reference - pred.mean[0]) / alias)
                if shift != 0.0:
                    mean = pred.mean.copy()
                    mean[0] += shift
                    pred = AnTrackState(mean=mean, cov=pred.cov)
            j, v = fim_and_score(
                pred.mean, snapshot, self.manifold, self.grid, snapshot.noise_var
            )
            self.state = information_update(pred, j, v)
            if self._fit_quality(snapshot) > REACQUIRE_QUALITY:
                self._restart(snapshot)
        if not self._rates_ok and self._prev_estimate is not None:
            self._initialize_rates()
        self._prev_estimate = (self.state.mean.copy(), self.state.cov.copy())
        return measurement_from_state(self.state, self.an_id)

    def _initialize_rates(self) -> None:
        """Two-point rate init from the previous and current estimates.

        Restart estimates qualify too: two consecutive beamformer fixes pin
        the delay rate well enough for the next prediction to stay inside the
        score's pull-in range.
        """
        m1, p1 = self._prev_estimate
        rates, rate_vars = init_rates(m1, p1, self.state.mean, self.state.cov, self.params.dt)
        mean = self.state.mean.copy()
        mean[3:] = rates
        cov = self.state.cov.copy()
        cov[3:, :] = 0.0
        cov[:, 3:] = 0.0
        cov[3:, 3:] = np.diag(rate_vars)
        self.state = AnTrackState(mean=mean, cov=condition_cov(cov)).normalized()
        self._rates_ok = True

    def _fit_quality(self, snapshot: ChannelSnapshot) -> float:
        r, _ = concentrated_residual(self.state.mean, snapshot, self.manifold, self.grid)
        return float(np.sum(np.abs(r) ** 2) / (snapshot.noise_var * snapshot.g.size))

    def _restart(self, snapshot: ChannelSnapshot) -> None:
        self.state = initial_state(
            snapshot, self.manifold, self.grid, self.fft_sizes, self.tau_reference
        )
        self._rates_ok = False


def estimate_noise_var(
    snapshot: ChannelSnapshot,
    manifold: ArrayManifold,
    grid: PilotGrid,
    state_mean: np.ndarray,
) -> float:
    """Median-based fallback noise estimate from the residual energy.

    |r_i|^2 of white complex noise is exponential with mean sigma^2, so the
    median divided by ln 2 is a robust scale estimate.
    """
    r, _ = concentrated_residual(state_mean, snapshot, manifold, grid)
    return float(np.median(np.abs(r) ** 2) / math.log(2.0))
