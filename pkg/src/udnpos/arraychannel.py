"""Polarimetric multicarrier-multiantenna channel synthesis.

Models the uplink channel snapshot g = B(theta, phi, tau) @ gamma + n, where
the two-column response B is assembled from delay steering over subcarriers
and a spatial-harmonic (EADF) representation of the array's angle response.
Provides the simulator's snapshot generator, the model derivatives the
per-node tracker needs, and synthesis of EADF matrices for idealized arrays.

Layout convention: g is antenna-major, g[a * m_f + k] pairs antenna port a
with allocated subcarrier k, matching the Kronecker order of the response
columns (antenna factor) x (frequency factor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PilotGrid:
    """Pilot subcarrier allocation: spacing f0 (Hz) and integer indices."""

    f0: float
    subcarrier_indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.subcarrier_indices, dtype=int)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("subcarrier index list must be a non-empty vector")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("subcarrier indices must be strictly increasing")
        if self.f0 <= 0.0:
            raise ValueError("subcarrier spacing must be positive")
        idx.setflags(write=False)
        object.__setattr__(self, "subcarrier_indices", idx)

    @property
    def m_f(self) -> int:
        return int(self.subcarrier_indices.size)

    @property
    def centered_indices(self) -> np.ndarray:
        """Indices shifted so the phase reference sits at band center."""
        idx = self.subcarrier_indices
        return idx - 0.5 * (idx[0] + idx[-1])

    @property
    def uniform_stride(self) -> int | None:
        """Common index stride if the allocation is uniform, else None."""
        d = np.diff(self.subcarrier_indices)
        if d.size == 0:
            return 1
        return int(d[0]) if np.all(d == d[0]) else None

    @classmethod
    def continuous(cls, m_f: int, f0: float) -> "PilotGrid":
        return cls(f0=f0, subcarrier_indices=np.arange(m_f))

    @classmethod
    def sparse_uniform(cls, m_f: int, f0: float, stride: int) -> "PilotGrid":
        return cls(f0=f0, subcarrier_indices=stride * np.arange(m_f))


def mode_indices(count: int) -> np.ndarray:
    """Symmetric spatial-harmonic index set -(count-1)/2 ... +(count-1)/2."""
    if count < 1 or count % 2 == 0:
        raise ValueError(f"mode count must be odd and positive, got {count}")
    return np.arange(count) - (count - 1) // 2


def delay_steering(tau: float, grid: PilotGrid) -> np.ndarray:
    """Unit-modulus delay steering vector over the allocated subcarriers.

    Element for centered subcarrier index m is exp(+j*2*pi*f0*m*tau); the
    continuous allocation reproduces the Vandermonde vector spanning phases
    -pi*(m_f-1)*f0*tau ... +pi*(m_f-1)*f0*tau.
    """
    if not math.isfinite(tau):
        raise ValueError("tau must be finite")
    return np.exp(1j * TWO_PI * grid.f0 * grid.centered_indices * tau)


def delay_steering_deriv(tau: float, grid: PilotGrid) -> np.ndarray:
    m = grid.centered_indices
    return (1j * TWO_PI * grid.f0 * m) * np.exp(1j * TWO_PI * grid.f0 * m * tau)


def angle_steering(phi: float, theta: float, m_a: int, m_e: int) -> np.ndarray:
    """Spatial-harmonic steering d(theta) kron d(phi), each factor a symmetric
    complex exponential exp(+j*m*angle) over its mode index set."""
    d_a = np.exp(1j * mode_indices(m_a) * phi)
    d_e = np.exp(1j * mode_indices(m_e) * theta)
    return np.kron(d_e, d_a)


def _angle_steering_parts(phi, theta, m_a, m_e):
    ia = mode_indices(m_a)
    ie = mode_indices(m_e)
    d_a = np.exp(1j * ia * phi)
    d_e = np.exp(1j * ie * theta)
    return d_a, d_e, ia, ie


@dataclass(frozen=True)
class PathParams:
    """Single-path parameters: delay, co-elevation, azimuth, polarimetric weights."""

    tau: float
    theta: float
    phi: float
    gamma: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.theta <= math.pi):
            raise ValueError("co-elevation must lie in [0, pi]")
        if not (0.0 <= self.phi < TWO_PI):
            raise ValueError("azimuth must lie in [0, 2*pi)")
        g = np.array(self.gamma, dtype=complex)
        if g.shape != (2,):
            raise ValueError("gamma must be a complex 2-vector")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)


@dataclass(frozen=True)
class ArrayManifold:
    """EADF description of a polarimetric array.

    g_h / g_v are M_AN x (M_a * M_e) complex matrices for horizontal and
    vertical excitation; g_f holds optional per-subcarrier receiver gains
    (None means identical RF chains, i.e. all-ones).
    """

    m_an: int
    m_a: int
    m_e: int
    g_h: np.ndarray
    g_v: np.ndarray
    g_f: np.ndarray | None = None

    def __post_init__(self):
        if self.m_a % 2 == 0 or self.m_e % 2 == 0:
            raise ValueError("mode counts must be odd")
        gh = np.array(self.g_h, dtype=complex)
        gv = np.array(self.g_v, dtype=complex)
        want = (self.m_an, self.m_a * self.m_e)
        if gh.shape != want or gv.shape != want:
            raise ValueError(f"EADF matrices must have shape {want}")
        gh.setflags(write=False)
        gv.setflags(write=False)
        object.__setattr__(self, "g_h", gh)
        object.__setattr__(self, "g_v", gv)
        if self.g_f is not None:
            gf = np.array(self.g_f, dtype=complex)
            if gf.ndim != 1:
                raise ValueError("g_f must be a vector of per-subcarrier gains")
            gf.setflags(write=False)
            object.__setattr__(self, "g_f", gf)

    def freq_gains(self, grid: PilotGrid) -> np.ndarray | None:
        if self.g_f is None:
            return None
        if self.g_f.size != grid.m_f:
            raise ValueError(
                f"g_f has {self.g_f.size} entries but the grid allocates {grid.m_f}"
            )
        return self.g_f


@dataclass(frozen=True)
class ChannelSnapshot:
    """One uplink channel estimate: complex vector over ports x subcarriers."""

    g: np.ndarray
    noise_var: float

    def __post_init__(self):
        g = np.array(self.g, dtype=complex)
        if g.ndim != 1:
            raise ValueError("snapshot must be a vector")
        if self.noise_var <= 0.0:
            raise ValueError("noise variance must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)


def _freq_part(tau: float, manifold: ArrayManifold, grid: PilotGrid) -> np.ndarray:
    d = delay_steering(tau, grid)
    gf = manifold.freq_gains(grid)
    return d if gf is None else gf * d


def polarimetric_response(path: PathParams, manifold: ArrayManifold, grid: PilotGrid) -> np.ndarray:
    """Two-column response [G_H d(phi,theta) kron G_f d(tau), G_V ... kron ...]."""
    d_ang = angle_steering(path.phi, path.theta, manifold.m_a, manifold.m_e)
    freq = _freq_part(path.tau, manifold, grid)
    col_h = np.kron(manifold.g_h @ d_ang, freq)
    col_v = np.kron(manifold.g_v @ d_ang, freq)
    return np.column_stack([col_h, col_v])


def polarimetric_response_derivs(path: PathParams, manifold: ArrayManifold, grid: PilotGrid):
    """Response matrix and its derivatives wrt (tau, theta, phi).

    Returns (B, dB_dtau, dB_dtheta, dB_dphi), each of shape M x 2.
    """
    d_a, d_e, ia, ie = _angle_steering_parts(path.phi, path.theta, manifold.m_a, manifold.m_e)
    d_ang = np.kron(d_e, d_a)
    d_ang_dphi = np.kron(d_e, 1j * ia * d_a)
    d_ang_dtheta = np.kron(1j * ie * d_e, d_a)

    gf = manifold.freq_gains(grid)
    d_f = delay_steering(path.tau, grid)
    d_f_dtau = delay_steering_deriv(path.tau, grid)
    if gf is not None:
        d_f = gf * d_f
        d_f_dtau = gf * d_f_dtau

    def cols(ang, freq):
        return np.column_stack(
            [np.kron(manifold.g_h @ ang, freq), np.kron(manifold.g_v @ ang, freq)]
        )

    b = cols(d_ang, d_f)
    db_dtau = cols(d_ang, d_f_dtau)
    db_dtheta = cols(d_ang_dtheta, d_f)
    db_dphi = cols(d_ang_dphi, d_f)
    return b, db_dtau, db_dtheta, db_dphi


def synth_snapshot(
    path: PathParams,
    manifold: ArrayManifold,
    grid: PilotGrid,
    noise_var: float,
    rng: np.random.Generator | int,
) -> ChannelSnapshot:
    """Draw g = B @ gamma + n with complex-circular white Gaussian noise.

    Deterministic per seed: passing an int seeds a fresh generator.
    """
    if noise_var <= 0.0:
        raise ValueError("noise variance must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    b = polarimetric_response(path, manifold, grid)
    m = b.shape[0]
    scale = math.sqrt(noise_var / 2.0)
    noise = scale * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
    return ChannelSnapshot(g=b @ path.gamma + noise, noise_var=noise_var)


# ---------------------------------------------------------------------------
# Synthetic array elements and EADF synthesis
# ---------------------------------------------------------------------------

PATCH_FRONT_TO_BACK_DB = 25.0


@dataclass(frozen=True)
class ArrayPort:
    """One output port of the array.

    position is in wavelengths; boresight_azimuth orients the element normal
    in the horizontal plane; pattern is "patch" (cosine-shaped power pattern
    with a front-to-back floor), "dipole" (vertical ideal dipole) or
    "isotropic"; polarization selects which incoming field component the port
    picks up.
    """

    position: tuple[float, float, float]
    boresight_azimuth: float
    pattern: str
    polarization: str

    def __post_init__(self):
        if self.pattern not in ("patch", "dipole", "isotropic"):
            raise ValueError(f"unknown element pattern {self.pattern!r}")
        if self.polarization not in ("h", "v"):
            raise ValueError("polarization must be 'h' or 'v'")


def cylindrical_array(
    n_per_ring: int = 5,
    ring_spacing_wl: float = 0.5,
    element_spacing_wl: float = 0.5,
) -> list[ArrayPort]:
    """Dual-polarized cylindrical layout: two rings of patch elements.

    In-ring neighbours sit element_spacing_wl apart (chord), the rings are
    ring_spacing_wl apart vertically, and the upper ring is rotated by half
    the angular pitch. Each element contributes a V and an H port, so the
    default yields 10 elements / 20 ports.
    """
    radius = element_spacing_wl / (2.0 * math.sin(math.pi / n_per_ring))
    pitch = TWO_PI / n_per_ring
    ports: list[ArrayPort] = []
    for ring, (z, rot) in enumerate([(0.0, 0.0), (ring_spacing_wl, pitch / 2.0)]):
        for k in range(n_per_ring):
            az = k * pitch + rot
            pos = (radius * math.cos(az), radius * math.sin(az), z)
            for pol in ("v", "h"):
                ports.append(
                    ArrayPort(position=pos, boresight_azimuth=az, pattern="patch", polarization=pol)
                )
    return ports


def _port_response(port: ArrayPort, phi: np.ndarray, theta: np.ndarray):
    """Complex response of a port to (E_theta, E_phi) unit excitations.

    phi/theta broadcast together; returns (resp_v, resp_h) where resp_v is the
    pickup of the co-elevation field component and resp_h of the azimuthal one.
    The phase reference advances toward the arrival direction.
    """
    st, ct = np.sin(theta), np.cos(theta)
    u = np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=-1)
    pos = np.asarray(port.position)
    phase = np.exp(1j * TWO_PI * (u @ pos))

    if port.pattern == "dipole":
        resp_v = st * phase
        resp_h = np.zeros_like(resp_v)
        return resp_v, resp_h

    if port.pattern == "isotropic":
        amp = np.ones_like(st)
    else:
        bore = np.array(
            [math.cos(port.boresight_azimuth), math.sin(port.boresight_azimuth), 0.0]
        )
        cos_off = u @ bore
        fb = 10.0 ** (-PATCH_FRONT_TO_BACK_DB / 10.0)
        # cosine-shaped power pattern cos^4(psi/2) with a front-to-back floor;
        # smooth in the direction vector, so the harmonic series converges fast
        amp = np.sqrt(fb + (1.0 - fb) * (0.5 * (1.0 + cos_off)) ** 2)
    resp = amp * phase
    zeros = np.zeros_like(resp)
    if port.polarization == "v":
        return resp, zeros
    return zeros, resp


def _sampled_responses(ports, n_az: int, n_el: int):
    """Sample port responses on the torus grid used for harmonic projection.

    Co-elevation is extended past pi via the mirror patch
    f(phi, 2*pi - theta) = f(phi + pi, theta). For the idealized elements here
    (direction-vector amplitude times plane-wave phase) this extension is the
    smooth periodic continuation, so the truncated harmonic series converges
    fast; the polarimetric sign flip of measured-calibration practice does not
    apply to these scalar-amplitude patterns.
    """
    phi = TWO_PI * np.arange(n_az) / n_az
    theta_ext = TWO_PI * np.arange(n_el) / n_el
    pg, tg = np.meshgrid(phi, theta_ext, indexing="ij")
    mirror = tg > math.pi
    phys_theta = np.where(mirror, TWO_PI - tg, tg)
    phys_phi = np.where(mirror, np.mod(pg + math.pi, TWO_PI), pg)

    s_v = np.empty((len(ports), n_az, n_el), dtype=complex)
    s_h = np.empty_like(s_v)
    for i, port in enumerate(ports):
        rv, rh = _port_response(port, phys_phi, phys_theta)
        s_v[i] = rv
        s_h[i] = rh
    return s_v, s_h


def _project_modes(samples: np.ndarray, m_a: int, m_e: int) -> np.ndarray:
    """2D DFT of torus samples, keeping the central (m_a, m_e) harmonics.

    samples has shape (ports, n_az, n_el); the returned matrix is
    (ports, m_a * m_e) with column j = p * m_a + q holding the coefficient of
    exp(+j * me(p) * theta) * exp(+j * ma(q) * phi).
    """
    n_ports, n_az, n_el = samples.shape
    coeffs = np.fft.fft2(samples, axes=(1, 2)) / (n_az * n_el)
    out = np.empty((n_ports, m_a * m_e), dtype=complex)
    for p, me_idx in enumerate(mode_indices(m_e)):
        for q, ma_idx in enumerate(mode_indices(m_a)):
            out[:, p * m_a + q] = coeffs[:, ma_idx % n_az, me_idx % n_el]
    return out


def build_synthetic_manifold(
    ports: list[ArrayPort],
    m_a: int,
    m_e: int,
    n_az: int | None = None,
    n_el: int | None = None,
) -> ArrayManifold:
    """Synthesize EADF matrices by sampling idealized port responses.

    The angle grids must be at least twice as dense as the mode counts; the
    default oversamples by 8x, which keeps the harmonic truncation (not the
    sampling) as the only reconstruction error source.
    """
    if not ports:
        raise ValueError("need at least one array port")
    n_az = 8 * m_a if n_az is None else n_az
    n_el = 8 * m_e if n_el is None else n_el
    if n_az < 2 * m_a or n_el < 2 * m_e:
        raise ValueError("angular sampling must be at least 2x the mode counts")
    if n_az % 2 or n_el % 2:
        raise ValueError("angle grids must be even-sized (mirror patch needs phi+pi on-grid)")
    s_v, s_h = _sampled_responses(ports, n_az, n_el)
    g_v = _project_modes(s_v, m_a, m_e)
    g_h = _project_modes(s_h, m_a, m_e)
    return ArrayManifold(m_an=len(ports), m_a=m_a, m_e=m_e, g_h=g_h, g_v=g_v)


def reconstruction_rms(manifold: ArrayManifold, ports: list[ArrayPort], n_az: int = 64, n_el: int = 64) -> float:
    """Relative RMS error of the EADF reconstruction against direct sampling."""
    s_v, s_h = _sampled_responses(ports, n_az, n_el)
    phi = TWO_PI * np.arange(n_az) / n_az
    theta = TWO_PI * np.arange(n_el) / n_el
    ia = mode_indices(manifold.m_a)
    ie = mode_indices(manifold.m_e)
    basis_a = np.exp(1j * np.outer(phi, ia))
    basis_e = np.exp(1j * np.outer(theta, ie))
    # d(phi, theta) flattened: kron(d_e, d_a) -> index p * m_a + q
    basis = np.einsum("ep,aq->aepq", basis_e, basis_a).reshape(
        n_az, n_el, manifold.m_e * manifold.m_a
    )
    err = 0.0
    ref = 0.0
    for samples, g in ((s_v, manifold.g_v), (s_h, manifold.g_h)):
        recon = np.einsum("aem,pm->pae", basis, g)
        err += float(np.sum(np.abs(recon - samples) ** 2))
        ref += float(np.sum(np.abs(samples) ** 2))
    return math.sqrt(err / ref)


# ---------------------------------------------------------------------------
# Manifold text-file import/export
# ---------------------------------------------------------------------------

_MANIFOLD_MAGIC = "udnpos-manifold 1"


def _format_complex_row(row: np.ndarray) -> str:
    return " ".join(f"{float(z.real)!r} {float(z.imag)!r}" for z in row)


def _parse_complex_row(line: str, expected: int) -> np.ndarray:
    vals = [float(tok) for tok in line.split()]
    if len(vals) != 2 * expected:
        raise ValueError(f"expected {expected} re/im pairs, got {len(vals)} numbers")
    arr = np.array(vals).reshape(expected, 2)
    return arr[:, 0] + 1j * arr[:, 1]


def save_manifold(manifold: ArrayManifold, path) -> None:
    """Write a manifold to the documented text format (re/im pairs)."""
    lines = [
        _MANIFOLD_MAGIC,
        f"m_an {manifold.m_an}",
        f"m_a {manifold.m_a}",
        f"m_e {manifold.m_e}",
    ]
    if manifold.g_f is None:
        lines.append("g_f none")
    else:
        lines.append(f"g_f {manifold.g_f.size}")
        lines.append(_format_complex_row(manifold.g_f))
    for name, mat in (("g_h", manifold.g_h), ("g_v", manifold.g_v)):
        lines.append(name)
        lines.extend(_format_complex_row(row) for row in mat)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifold(path) -> ArrayManifold:
    """Read a manifold written by `save_manifold`."""
    with open(path, encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    it = iter(lines)
    if next(it) != _MANIFOLD_MAGIC:
        raise ValueError("not a udnpos manifold file")
    header = {}
    for _ in range(3):
        key, val = next(it).split()
        header[key] = int(val)
    m_an, m_a, m_e = header["m_an"], header["m_a"], header["m_e"]
    gf_line = next(it).split()
    if gf_line[0] != "g_f":
        raise ValueError("expected g_f header line")
    g_f = None
    if gf_line[1] != "none":
        g_f = _parse_complex_row(next(it), int(gf_line[1]))
    mats = {}
    for name in ("g_h", "g_v"):
        if next(it) != name:
            raise ValueError(f"expected {name} block")
        rows = [_parse_complex_row(next(it), m_a * m_e) for _ in range(m_an)]
        mats[name] = np.vstack(rows)
    return ArrayManifold(m_an=m_an, m_a=m_a, m_e=m_e, g_h=mats["g_h"], g_v=mats["g_v"], g_f=g_f)
