"""Urban grid map: building blocks, road lattice, AN deployment, LoS geometry.

The map follows the dense-urban grid idiom: square 120 m building blocks on a
150 m pitch separated by 30 m corridors, each corridor carrying an 18 m road
centered between the building faces (3 m sidewalks plus parking strips make up
the clearance). The desk variant is a 3x3-block map for fast experiments; the
full variant adds 120x30 m slab blocks and a park.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .statespace import AnInfo

BLOCK = 120.0
PITCH = 150.0
ROAD_WIDTH = 18.0
SIDEWALK = 3.0
AN_HEIGHT = 7.0
UN_HEIGHT = 1.5


@dataclass(frozen=True)
class Building:
    """Axis-aligned footprint [x0, x1] x [y0, y1]."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("degenerate building footprint")

    def contains(self, x: float, y: float) -> bool:
        return self.x0 < x < self.x1 and self.y0 < y < self.y1


@dataclass(frozen=True)
class RoadSegment:
    """Straight road centerline with width."""

    start: tuple[float, float]
    end: tuple[float, float]
    width: float = ROAD_WIDTH

    def length(self) -> float:
        return math.dist(self.start, self.end)

    def direction(self) -> np.ndarray:
        d = np.array(self.end) - np.array(self.start)
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class GridMap:
    buildings: tuple[Building, ...]
    roads: tuple[RoadSegment, ...]
    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    def road_xs(self) -> list[float]:
        """x coordinates of vertical road centerlines."""
        return sorted({r.start[0] for r in self.roads if r.start[0] == r.end[0]})

    def road_ys(self) -> list[float]:
        return sorted({r.start[1] for r in self.roads if r.start[1] == r.end[1]})

    def intersections(self) -> list[tuple[float, float]]:
        return [(x, y) for x in self.road_xs() for y in self.road_ys()]


def _lattice(n_blocks: int) -> tuple[list[float], tuple[float, float]]:
    """Road-centerline coordinates and extent for an n x n block grid."""
    gap = PITCH - BLOCK  # corridor width between building faces
    centers = [k * PITCH - gap / 2.0 for k in range(n_blocks + 1)]
    lo = -gap
    hi = (n_blocks - 1) * PITCH + BLOCK + gap
    return centers, (lo, hi)


def build_map(variant: str = "desk") -> GridMap:
    """Deterministic map construction.

    desk: 3x3 square blocks, 4+4 road centerlines.
    full: 4x4 cells mixing square blocks, 120x30 slabs and one open park.
    """
    if variant == "desk":
        n = 3
        centers, (lo, hi) = _lattice(n)
        buildings = tuple(
            Building(i * PITCH, j * PITCH, i * PITCH + BLOCK, j * PITCH + BLOCK)
            for i in range(n)
            for j in range(n)
        )
    elif variant == "full":
        n = 4
        centers, (lo, hi) = _lattice(n)
        buildings = []
        for i in range(n):
            for j in range(n):
                x0, y0 = i * PITCH, j * PITCH
                if (i, j) == (1, 1):
                    continue  # park: open space, no building
                if i == n - 1:
                    # slab column: three 120x30 blocks with 15 m alleys
                    for k in range(3):
                        y_slab = y0 + k * 45.0
                        buildings.append(Building(x0, y_slab, x0 + BLOCK, y_slab + 30.0))
                else:
                    buildings.append(Building(x0, y0, x0 + BLOCK, y0 + BLOCK))
        buildings = tuple(buildings)
    else:
        raise ValueError(f"unknown map variant {variant!r}")

    roads = []
    for c in centers:
        roads.append(RoadSegment(start=(c, lo), end=(c, hi)))
        roads.append(RoadSegment(start=(lo, c), end=(hi, c)))
    return GridMap(buildings=buildings, roads=tuple(roads), extent=(lo, lo, hi, hi))


def deploy_ans(grid_map: GridMap, isd: float) -> list[AnInfo]:
    """Place ANs along road edges at the given inter-site distance.

    Sites run from each segment start to its end inclusive; consecutive sites
    alternate road sides (lateral offset of half the road width). Sites closer
    than 1 m to an already placed AN (road crossings) are skipped. Deployment
    detail is documented configuration, not ground truth.
    """
    if isd <= 0.0:
        raise ValueError("isd must be positive")
    max_span = max(
        grid_map.extent[2] - grid_map.extent[0], grid_map.extent[3] - grid_map.extent[1]
    )
    if isd > max_span:
        raise ValueError(f"isd {isd} exceeds the map span {max_span}")
    ans: list[AnInfo] = []
    placed: list[np.ndarray] = []
    an_id = 0
    for seg in grid_map.roads:
        direction = seg.direction()
        normal = np.array([-direction[1], direction[0]])
        n_sites = int(math.floor(seg.length() / isd + 1e-9)) + 1
        for k in range(n_sites):
            side = 1.0 if k % 2 == 0 else -1.0
            pos = np.array(seg.start) + k * isd * direction + side * (seg.width / 2.0) * normal
            if any(np.linalg.norm(pos - q) < 1.0 for q in placed):
                continue
            if any(b.contains(pos[0], pos[1]) for b in grid_map.buildings):
                continue
            placed.append(pos)
            ans.append(AnInfo(an_id=an_id, position=(float(pos[0]), float(pos[1])),
                              antenna_height=AN_HEIGHT))
            an_id += 1
    return ans


def segment_blocked(p: np.ndarray, q: np.ndarray, building: Building, eps: float = 1e-9) -> bool:
    """True if segment p-q passes through the building interior.

    Liang-Barsky clipping against the footprint shrunk by eps, so segments
    grazing a face do not count as blocked.
    """
    x0, y0 = building.x0 + eps, building.y0 + eps
    x1, y1 = building.x1 - eps, building.y1 - eps
    d = q - p
    t0, t1 = 0.0, 1.0
    for delta, lo, hi in ((d[0], x0 - p[0], x1 - p[0]), (d[1], y0 - p[1], y1 - p[1])):
        if delta == 0.0:
            if lo > 0.0 or hi < 0.0:
                return False
            continue
        ta, tb = lo / delta, hi / delta
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return t1 - t0 > eps


def line_of_sight(grid_map: GridMap, a: np.ndarray, b: np.ndarray) -> bool:
    """Geometric 2D visibility: no building interior intersects segment a-b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return not any(segment_blocked(a, b, bld) for bld in grid_map.buildings)
