"""Vehicle routes along the road lattice and jerk-limited speed profiles.

Straight stretches accelerate with a constant-jerk s-curve (continuous speed
and tangential acceleration); turns are constant-speed circular arcs at the
turn speed. Centripetal acceleration therefore steps at arc boundaries, which
is the accepted simplification here; the speed profile itself is smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gridmap import GridMap

KMH = 1.0 / 3.6


@dataclass(frozen=True)
class MotionConfig:
    v_max: float = 50.0 * KMH       # m/s
    v_turn: float = 20.0 * KMH      # m/s
    accel_distance: float = 80.0    # m, for the full v_turn -> v_max ramp
    corner_radius: float = 9.0      # m

    def __post_init__(self):
        if not (0.0 < self.v_turn <= self.v_max):
            raise ValueError("need 0 < v_turn <= v_max")
        if self.accel_distance <= 0.0 or self.corner_radius <= 0.0:
            raise ValueError("accel_distance and corner_radius must be positive")

    @property
    def jerk(self) -> float:
        """Constant jerk of the full ramp: T = 2 d / (v1 + v2), J = 4 dv / T^2."""
        t_full = 2.0 * self.accel_distance / (self.v_turn + self.v_max)
        return 4.0 * (self.v_max - self.v_turn) / t_full**2


def random_route(grid_map: GridMap, rng: np.random.Generator, n_intersections: int = 6) -> list[tuple[float, float]]:
    """Random walk over the road lattice, ending after n intersections.

    Starts at the map-edge end of a random road and never U-turns; at each
    intersection the next heading is drawn uniformly from the feasible
    straight/left/right moves.
    """
    xs, ys = grid_map.road_xs(), grid_map.road_ys()
    lo = grid_map.extent[1]
    entry = int(rng.integers(len(xs)))
    start = (xs[entry], lo)
    i, j = entry, 0
    heading = (0, 1)
    waypoints = [start, (xs[i], ys[j])]
    for _ in range(n_intersections - 1):
        options = []
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            if (dx, dy) == (-heading[0], -heading[1]):
                continue
            ni, nj = i + dx, j + dy
            if 0 <= ni < len(xs) and 0 <= nj < len(ys):
                options.append((dx, dy))
        if not options:
            break
        heading = options[int(rng.integers(len(options)))]
        i, j = i + heading[0], j + heading[1]
        waypoints.append((xs[i], ys[j]))
    return waypoints


# ---------------------------------------------------------------------------
# Path geometry: straights and corner arcs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Straight:
    start: np.ndarray
    direction: np.ndarray
    length: float

    def point(self, s: float):
        pos = self.start + s * self.direction
        normal = np.array([-self.direction[1], self.direction[0]])
        return pos, self.direction, normal, 0.0


@dataclass(frozen=True)
class _Arc:
    center: np.ndarray
    radius: float
    angle0: float
    sweep: float  # signed; positive = counterclockwise

    @property
    def length(self) -> float:
        return self.radius * abs(self.sweep)

    def point(self, s: float):
        ang = self.angle0 + math.copysign(s / self.radius, self.sweep)
        radial = np.array([math.cos(ang), math.sin(ang)])
        pos = self.center + self.radius * radial
        sign = 1.0 if self.sweep >= 0 else -1.0
        tangent = sign * np.array([-radial[1], radial[0]])
        normal = np.array([-tangent[1], tangent[0]])
        curvature = sign / self.radius
        return pos, tangent, normal, curvature


def _build_path(waypoints: list[tuple[float, float]], radius: float):
    """Polyline with rounded corners; collinear waypoints merge into straights."""
    pts = [np.asarray(w, dtype=float) for w in waypoints]
    if len(pts) < 2:
        raise ValueError("a route needs at least two waypoints")
    elements = []
    cursor = pts[0]
    turn_flags = []  # per element: True when the element is a turn arc
    for k in range(1, len(pts) - 1):
        v_in = pts[k] - pts[k - 1]
        v_out = pts[k + 1] - pts[k]
        u_in = v_in / np.linalg.norm(v_in)
        u_out = v_out / np.linalg.norm(v_out)
        cross = u_in[0] * u_out[1] - u_in[1] * u_out[0]
        dot = float(np.clip(u_in @ u_out, -1.0, 1.0))
        turn = math.atan2(cross, dot)
        if abs(turn) < 1e-9:
            continue
        setback = radius * math.tan(abs(turn) / 2.0)
        leg_in = np.linalg.norm(pts[k] - cursor)
        leg_out = np.linalg.norm(v_out)
        if setback > leg_in - 1e-6 or setback > leg_out - 1e-6:
            raise ValueError("corner radius too large for route leg lengths")
        entry = pts[k] - setback * u_in
        straight_len = float(np.linalg.norm(entry - cursor))
        if straight_len > 1e-9:
            elements.append(_Straight(start=cursor, direction=u_in, length=straight_len))
            turn_flags.append(False)
        sign = 1.0 if turn > 0 else -1.0
        normal_in = sign * np.array([-u_in[1], u_in[0]])
        center = entry + radius * normal_in
        angle0 = math.atan2(entry[1] - center[1], entry[0] - center[0])
        elements.append(_Arc(center=center, radius=radius, angle0=angle0, sweep=turn))
        turn_flags.append(True)
        cursor = pts[k] + setback * u_out
    v_last = pts[-1] - cursor
    last_len = float(np.linalg.norm(v_last))
    if last_len > 1e-9:
        elements.append(_Straight(start=cursor, direction=v_last / last_len, length=last_len))
        turn_flags.append(False)
    return elements, turn_flags


# ---------------------------------------------------------------------------
# Speed profile: constant-jerk ramps, cruises, constant-speed arcs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Piece:
    duration: float
    length: float
    v0: float
    v1: float
    jerk: float  # 0 for cruise/arc

    def sample(self, t: float) -> tuple[float, float, float]:
        """(distance, speed, tangential accel) at time t within the piece."""
        if self.jerk == 0.0:
            return self.v0 * t, self.v0, 0.0
        half = self.duration / 2.0
        j = self.jerk
        if t <= half:
            return self.v0 * t + j * t**3 / 6.0, self.v0 + j * t**2 / 2.0, j * t
        u = self.duration - t
        s = self.length - (self.v1 * u - j * u**3 / 6.0)
        return s, self.v1 - j * u**2 / 2.0, j * u


def _ramp(v0: float, v1: float, jerk_mag: float) -> _Piece:
    dv = v1 - v0
    if abs(dv) < 1e-12:
        return _Piece(duration=0.0, length=0.0, v0=v0, v1=v1, jerk=0.0)
    duration = 2.0 * math.sqrt(abs(dv) / jerk_mag)
    j = 4.0 * dv / duration**2
    return _Piece(duration=duration, length=(v0 + v1) / 2.0 * duration, v0=v0, v1=v1, jerk=j)


def _straight_pieces(length: float, v_in: float, v_out: float, v_max: float, jerk: float) -> list[_Piece]:
    """Ramp-cruise-ramp fitting the straight length exactly."""

    def ramps_length(v_peak: float) -> float:
        return _ramp(v_in, v_peak, jerk).length + _ramp(v_peak, v_out, jerk).length

    floor = max(v_in, v_out)
    if ramps_length(floor) > length + 1e-9:
        raise ValueError("straight too short for the required speed change")
    v_peak = v_max
    if ramps_length(v_max) > length:
        lo, hi = floor, v_max
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if ramps_length(mid) > length:
                hi = mid
            else:
                lo = mid
        v_peak = lo
    up = _ramp(v_in, v_peak, jerk)
    down = _ramp(v_peak, v_out, jerk)
    cruise_len = length - up.length - down.length
    pieces = [p for p in (up,) if p.duration > 0.0]
    if cruise_len > 1e-9:
        pieces.append(_Piece(duration=cruise_len / v_peak, length=cruise_len,
                             v0=v_peak, v1=v_peak, jerk=0.0))
    if down.duration > 0.0:
        pieces.append(down)
    return pieces


@dataclass(frozen=True)
class TrajectorySamples:
    """Uniform-dt truth kinematics along a route."""

    t: np.ndarray
    position: np.ndarray  # N x 2
    velocity: np.ndarray  # N x 2
    acceleration: np.ndarray  # N x 2
    speed: np.ndarray

    def __len__(self) -> int:
        return self.t.size


def generate_trajectory(
    waypoints: list[tuple[float, float]],
    cfg: MotionConfig,
    dt: float,
    initial_speed: float | None = None,
    final_speed: float | None = None,
) -> TrajectorySamples:
    """Sample position/velocity/acceleration at dt along the route.

    Entry and exit speeds default to the turn speed; straights accelerate
    toward v_max as far as their length allows, turns hold v_turn exactly.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    elements, turn_flags = _build_path(waypoints, cfg.corner_radius)
    v_entry = cfg.v_turn if initial_speed is None else initial_speed
    v_exit = cfg.v_turn if final_speed is None else final_speed
    jerk = cfg.jerk

    pieces: list[tuple[_Piece, object, float]] = []  # (piece, element, elem offset)
    v_current = v_entry
    for idx, (elem, is_turn) in enumerate(zip(elements, turn_flags)):
        if is_turn:
            pieces.append(
                (_Piece(duration=elem.length / cfg.v_turn, length=elem.length,
                        v0=cfg.v_turn, v1=cfg.v_turn, jerk=0.0), elem, 0.0)
            )
            v_current = cfg.v_turn
            continue
        next_is_turn = idx + 1 < len(turn_flags) and turn_flags[idx + 1]
        v_out = cfg.v_turn if next_is_turn else v_exit
        offset = 0.0
        for piece in _straight_pieces(elem.length, v_current, v_out, cfg.v_max, jerk):
            pieces.append((piece, elem, offset))
            offset += piece.length
        v_current = v_out

    total_time = sum(p.duration for p, _, _ in pieces)
    n = int(math.floor(total_time / dt)) + 1
    t = np.arange(n) * dt
    pos = np.empty((n, 2))
    vel = np.empty((n, 2))
    acc = np.empty((n, 2))
    speed = np.empty(n)

    boundaries = np.cumsum([p.duration for p, _, _ in pieces])
    starts = boundaries - np.array([p.duration for p, _, _ in pieces])
    for k, tk in enumerate(t):
        idx = int(np.searchsorted(boundaries, tk, side="right"))
        idx = min(idx, len(pieces) - 1)
        piece, elem, offset = pieces[idx]
        local_t = min(tk - starts[idx], piece.duration)
        s, v, a_t = piece.sample(local_t)
        p_xy, tangent, normal, curvature = elem.point(offset + s)
        pos[k] = p_xy
        vel[k] = v * tangent
        acc[k] = a_t * tangent + v**2 * curvature * normal
        speed[k] = v
    return TrajectorySamples(t=t, position=pos, velocity=vel, acceleration=acc, speed=speed)
