"""Ground-truth generation and measurement production.

Couples the map, trajectory and clock models into a per-step truth trace, and
emits azimuth/ToA measurements at one of two fidelity levels: channel-level
(synthetic array snapshots through the per-AN tracker) or measurement-level
(direct noisy draws, for fast Monte Carlo). The ToA convention throughout is
tau = d / c + rho_un + rho_an.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .arraychannel import ArrayManifold, PathParams, PilotGrid, polarimetric_response, synth_snapshot
from .doatoa import AnTracker, CwnaParams
from .gridmap import AN_HEIGHT, UN_HEIGHT, GridMap, line_of_sight
from .statespace import SPEED_OF_LIGHT, AnInfo, ClockModelParams, ClockState, Measurement, wrap_to_positive
from .motion import TrajectorySamples


class FidelityMode(enum.Enum):
    CHANNEL = "channel"
    MEASUREMENT = "measurement"


def evolve_clocks(
    un_clock: ClockState,
    an_offsets: np.ndarray,
    params: ClockModelParams,
    dt: float,
    rng: np.random.Generator,
) -> tuple[ClockState, np.ndarray]:
    """One step of the truth clock models.

    UN skew is AR(1) (alpha' = beta alpha + eta), offset integrates the new
    skew; AN offsets random-walk with per-step STD sigma_rho * sqrt(dt)
    (sigma_rho = 0 models phase-locked nodes with static offsets).
    """
    alpha = params.beta * un_clock.skew + rng.normal(scale=params.sigma_eta)
    rho = un_clock.offset + alpha * dt
    if params.sigma_rho > 0.0:
        an_offsets = an_offsets + rng.normal(
            scale=params.sigma_rho * math.sqrt(dt), size=an_offsets.shape
        )
    return ClockState(offset=rho, skew=alpha), np.asarray(an_offsets, dtype=float)


def los_set(
    grid_map: GridMap,
    un_pos: np.ndarray,
    ans: list[AnInfo],
    k_max: int,
    detection_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Up to k_max nearest geometrically visible ANs.

    With probability detection_p one returned entry (chosen uniformly) is
    swapped for the nearest NLoS AN, modeling an imperfect LoS detector that
    believes an occluded node.
    """
    un_pos = np.asarray(un_pos, dtype=float)
    visible, hidden = [], []
    for an in ans:
        d = float(np.linalg.norm(an.xy() - un_pos))
        (visible if line_of_sight(grid_map, un_pos, an.xy()) else hidden).append((d, an.an_id))
    visible.sort()
    hidden.sort()
    chosen = [an_id for _, an_id in visible[:k_max]]
    if detection_p > 0.0 and rng is not None and chosen and hidden:
        if rng.random() < detection_p:
            victim = int(rng.integers(len(chosen)))
            chosen[victim] = hidden[0][1]
    return chosen


@dataclass(frozen=True)
class TruthTrace:
    """Per-step ground truth: kinematics, clocks, LoS sets.

    an_offsets columns follow an_ids order.
    """

    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    un_offset: np.ndarray
    un_skew: np.ndarray
    an_offsets: np.ndarray  # n_steps x n_ans
    an_ids: tuple[int, ...]
    los: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return self.t.size

    def an_offset_at(self, step: int, an_id: int) -> float:
        return float(self.an_offsets[step, self.an_ids.index(an_id)])

    def to_csv(self, path) -> None:
        """Column schema: step, t, x, y, vx, vy, rho, alpha, los (;-joined),
        then one an_offset_<id> column per AN."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "t", "x", "y", "vx", "vy", "rho", "alpha", "los"]
                + [f"an_offset_{i}" for i in self.an_ids]
            )
            for k in range(len(self)):
                writer.writerow(
                    [k, repr(float(self.t[k]))]
                    + [repr(float(v)) for v in self.position[k]]
                    + [repr(float(v)) for v in self.velocity[k]]
                    + [repr(float(self.un_offset[k])), repr(float(self.un_skew[k]))]
                    + [";".join(str(i) for i in self.los[k])]
                    + [repr(float(v)) for v in self.an_offsets[k]]
                )


def simulate_truth(
    grid_map: GridMap,
    ans: list[AnInfo],
    trajectory: TrajectorySamples,
    clock_params: ClockModelParams,
    dt: float,
    rng: np.random.Generator,
    k_max: int = 2,
    detection_p: float = 0.0,
    initial_un_clock: ClockState | None = None,
    an_offset_std: float = 0.0,
) -> TruthTrace:
    """Roll the clock models along a trajectory and record LoS sets."""
    n = len(trajectory)
    if initial_un_clock is None:
        initial_un_clock = ClockState(
            offset=rng.normal(scale=100e-6), skew=25e-6 + rng.normal(scale=30e-6)
        )
    an_offsets0 = (
        rng.normal(scale=an_offset_std, size=len(ans)) if an_offset_std > 0.0 else np.zeros(len(ans))
    )
    un_offset = np.empty(n)
    un_skew = np.empty(n)
    an_offsets = np.empty((n, len(ans)))
    los: list[tuple[int, ...]] = []
    clock, offsets = initial_un_clock, an_offsets0
    for k in range(n):
        if k > 0:
            clock, offsets = evolve_clocks(clock, offsets, clock_params, dt, rng)
        un_offset[k] = clock.offset
        un_skew[k] = clock.skew
        an_offsets[k] = offsets
        los.append(tuple(los_set(grid_map, trajectory.position[k], ans, k_max, detection_p, rng)))
    return TruthTrace(
        t=trajectory.t.copy(),
        position=trajectory.position.copy(),
        velocity=trajectory.velocity.copy(),
        un_offset=un_offset,
        un_skew=un_skew,
        an_offsets=an_offsets,
        an_ids=tuple(an.an_id for an in ans),
        los=tuple(los),
    )


def true_observables(un_pos: np.ndarray, un_offset: float, an: AnInfo, an_offset: float):
    """Noise-free (azimuth, co-elevation, toa) for one AN-UN link."""
    dx = un_pos[0] - an.position[0]
    dy = un_pos[1] - an.position[1]
    ground = math.hypot(dx, dy)
    azimuth = math.atan2(dy, dx) % (2.0 * math.pi)
    dz = UN_HEIGHT - an.antenna_height
    dist3d = math.hypot(ground, dz)
    theta = math.acos(dz / dist3d) if dist3d > 0 else math.pi / 2
    toa = ground / SPEED_OF_LIGHT + un_offset + an_offset
    return azimuth, theta, toa


@dataclass(frozen=True)
class MeasurementNoise:
    """Measurement-level mode noise model."""

    doa_std: float = math.radians(1.0)
    toa_std: float = 1e-9


def emit_measurements(
    truth: TruthTrace,
    step: int,
    ans: list[AnInfo],
    noise: MeasurementNoise,
    rng: np.random.Generator,
) -> list[Measurement]:
    """Measurement-level emission: truth projections plus white noise.

    Entries swapped in by imperfect detection carry the (NLoS) AN's own
    geometric direct-path values, wrong relative to its true propagation but
    plausible in magnitude, with the same R as genuine entries.
    """
    by_id = {an.an_id: an for an in ans}
    r = np.diag([noise.doa_std**2, noise.toa_std**2])
    out = []
    for an_id in truth.los[step]:
        an = by_id[an_id]
        azimuth, _, toa = true_observables(
            truth.position[step], truth.un_offset[step], an, truth.an_offset_at(step, an_id)
        )
        out.append(
            Measurement(
                an_id=an_id,
                azimuth=wrap_to_positive(azimuth + rng.normal(scale=noise.doa_std)),
                toa=toa + rng.normal(scale=noise.toa_std),
                covariance=r,
            )
        )
    return out


@dataclass
class ChannelEmitter:
    """Channel-level emission: per-AN snapshots through persistent trackers.

    A fresh tracker starts whenever an AN enters the LoS set; it is dropped
    when the AN leaves. Per-link SINR is drawn once per (AN, run) uniformly
    in snr_db_range; path weights get a fresh random phase per step (they are
    concentrated out by the tracker anyway).

    Measurements are withheld until a track matures (rates initialized and a
    few clean updates behind it): a tracker that is still converging reports
    covariances near the local CRB while its actual error is dominated by the
    acquisition transient, and fusing those overconfident values corrupts the
    central filter far more than a one-off smaller K[n].
    """

    manifold: ArrayManifold
    grid: PilotGrid
    cwna: CwnaParams
    snr_db_range: tuple[float, float] = (5.0, 40.0)
    reference_distance: float = 10.0
    maturity_steps: int = 1
    # error floors on the emitted covariance: the tracker's posterior marginal
    # understates the information actually delivered to the fusion stage
    # because consecutive tracker errors are strongly time-correlated, which
    # the central filter's white-noise model cannot represent; cm-grade
    # bearings at 10 Hz would otherwise push the fusion EKF into a regime
    # where its linearization overshoots
    doa_std_floor: float = math.radians(0.05)
    toa_std_floor: float = 0.1e-9

    def __post_init__(self):
        self._trackers: dict[int, AnTracker] = {}
        self._link_snr_db: dict[int, float] = {}
        self._age: dict[int, int] = {}

    def _floored(self, meas: Measurement) -> Measurement:
        cov = np.array(meas.covariance)
        cov[0, 0] = max(cov[0, 0], self.doa_std_floor**2)
        cov[1, 1] = max(cov[1, 1], self.toa_std_floor**2)
        limit = 0.99 * math.sqrt(cov[0, 0] * cov[1, 1])
        cov[0, 1] = cov[1, 0] = float(np.clip(cov[0, 1], -limit, limit))
        return Measurement(
            an_id=meas.an_id, azimuth=meas.azimuth, toa=meas.toa, covariance=cov
        )

    def emit(
        self,
        truth: TruthTrace,
        step: int,
        ans: list[AnInfo],
        rng: np.random.Generator,
    ) -> list[Measurement]:
        by_id = {an.an_id: an for an in ans}
        current = set(truth.los[step])
        for an_id in list(self._trackers):
            if an_id not in current:
                del self._trackers[an_id]
                del self._age[an_id]
        out = []
        for an_id in truth.los[step]:
            an = by_id[an_id]
            azimuth, theta, toa = true_observables(
                truth.position[step], truth.un_offset[step], an, truth.an_offset_at(step, an_id)
            )
            if an_id not in self._link_snr_db:
                self._link_snr_db[an_id] = float(rng.uniform(*self.snr_db_range))
            ground = np.linalg.norm(truth.position[step] - an.xy())
            amp = self.reference_distance / max(float(ground), 1.0)
            mix = rng.uniform(0.3, 1.0)
            gamma = amp * np.array(
                [
                    math.sqrt(mix) * np.exp(1j * rng.uniform(0, 2 * math.pi)),
                    math.sqrt(1 - mix) * np.exp(1j * rng.uniform(0, 2 * math.pi)),
                ]
            )
            # the steering model is periodic in the allocation's alias window;
            # synthesize at the fractional delay (identical response) and let
            # the tracker carry the absolute ToA via its window reference
            alias = 1.0 / (self.grid.f0 * self.grid.uniform_stride)
            window = round(toa / alias) * alias
            path = PathParams(tau=toa - window, theta=theta, phi=azimuth, gamma=gamma)
            b = polarimetric_response(path, self.manifold, self.grid)
            sig_power = float(np.mean(np.abs(b @ gamma) ** 2))
            noise_var = sig_power / 10 ** (self._link_snr_db[an_id] / 10.0)
            snapshot = synth_snapshot(path, self.manifold, self.grid, noise_var, rng)
            tracker = self._trackers.get(an_id)
            if tracker is None:
                # window placement is node-side knowledge from its symbol-sync
                # loop; it anchors the fractional beamformer delay
                tracker = AnTracker(
                    self.manifold, self.grid, self.cwna, an_id=an_id, tau_reference=window
                )
                self._trackers[an_id] = tracker
                self._age[an_id] = 0
            meas = tracker.step(snapshot, tau_reference=window)
            if tracker._rates_ok:
                self._age[an_id] += 1
            else:
                self._age[an_id] = 0
            if self._age[an_id] >= self.maturity_steps:
                out.append(meas)
        return out
