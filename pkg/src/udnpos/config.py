"""Scenario configuration: YAML key/value files with nesting.

One file describes one scenario; defaults follow the nominal evaluation
parameterization, so an empty file is a valid scenario. Validation reports
the offending key with its line number. The schema is documented in
docs/config.md.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .motion import KMH, MotionConfig
from .initializer import InitConfig
from .statespace import ClockModelParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PilotConfig:
    f0: float = 75e3
    subcarriers: int = 256
    allocation: str = "sparse"  # sparse | continuous
    stride: int = 5             # sparse allocation index stride

    def grid(self):
        from .arraychannel import PilotGrid

        if self.allocation == "continuous":
            return PilotGrid.continuous(self.subcarriers, self.f0)
        return PilotGrid.sparse_uniform(self.subcarriers, self.f0, self.stride)


@dataclass(frozen=True)
class ChannelConfig:
    snr_db_min: float = 5.0
    snr_db_max: float = 40.0
    m_a: int = 7
    m_e: int = 5
    sigma_w: tuple[float, float, float] = (1e-8, 0.7, 0.7)
    manifold_file: str | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    map_variant: str = "desk"
    isd: float = 50.0
    fidelity: str = "measurement"      # measurement | channel
    filter: str = "pos-clock"          # doa-only | pos-clock | pos-sync
    k_max: int = 2
    detection_p: float = 0.0
    dt: float = 0.1
    seed: int = 1
    runs: int = 15
    seeds: tuple[int, ...] | None = None
    n_intersections: int = 6
    burn_in: int = 10
    doa_std_deg: float = 1.0
    toa_std_ns: float = 1.0
    sigma_v: float = 3.5
    truth_beta: float = 1.0
    truth_sigma_eta: float = 6.3e-8
    truth_an_sigma_rho: float = 0.0
    an_offset_std: float = 0.0
    filter_beta: float = 1.0
    filter_sigma_eta: float = 1e-4
    filter_an_sigma_rho: float = 1e-9
    n_warmup: int = 20
    sigma_v0: float = 5.0
    mu_alpha0_ppm: float = 25.0
    sigma_alpha0_ppm: float = 30.0
    sigma_rho0: float = 100e-6
    an_prior_offset_std: float = 100e-6
    v_max_kmh: float = 50.0
    v_turn_kmh: float = 20.0
    accel_distance: float = 80.0
    corner_radius: float = 9.0
    pilot: PilotConfig = field(default_factory=PilotConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    out_dir: str | None = None
    workers: int = 1

    def run_seeds(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.seed + k for k in range(self.runs)]

    def motion_config(self) -> MotionConfig:
        return MotionConfig(
            v_max=self.v_max_kmh * KMH,
            v_turn=self.v_turn_kmh * KMH,
            accel_distance=self.accel_distance,
            corner_radius=self.corner_radius,
        )

    def init_config(self) -> InitConfig:
        return InitConfig(
            n_warmup=self.n_warmup,
            sigma_v0=self.sigma_v0,
            mu_alpha0=self.mu_alpha0_ppm * 1e-6,
            sigma_alpha0=self.sigma_alpha0_ppm * 1e-6,
            sigma_rho0=self.sigma_rho0,
        )

    def truth_clock_params(self) -> ClockModelParams:
        return ClockModelParams(
            beta=self.truth_beta,
            sigma_eta=self.truth_sigma_eta,
            sigma_rho=self.truth_an_sigma_rho,
        )

    def fusion_params(self):
        from .fusion import FusionParams

        return FusionParams(
            dt=self.dt,
            sigma_v=self.sigma_v,
            sigma_eta=self.filter_sigma_eta,
            beta=self.filter_beta,
            sigma_rho=self.filter_an_sigma_rho,
        )

    def measurement_noise(self):
        from .scenario import MeasurementNoise

        return MeasurementNoise(
            doa_std=math.radians(self.doa_std_deg),
            toa_std=self.toa_std_ns * 1e-9,
        )

    def validate(self) -> None:
        if self.fidelity not in ("measurement", "channel"):
            raise ConfigError(f"fidelity must be measurement|channel, got {self.fidelity!r}")
        if self.filter not in ("doa-only", "pos-clock", "pos-sync"):
            raise ConfigError(
                f"filter must be doa-only|pos-clock|pos-sync, got {self.filter!r}"
            )
        if self.map_variant not in ("desk", "full"):
            raise ConfigError(f"map_variant must be desk|full, got {self.map_variant!r}")
        if self.k_max < 1:
            raise ConfigError("k_max must be at least 1")
        if not (0.0 <= self.detection_p <= 1.0):
            raise ConfigError("detection_p must lie in [0, 1]")
        if self.dt <= 0.0 or self.burn_in < 0 or self.runs < 1 or self.workers < 1:
            raise ConfigError("dt > 0, burn_in >= 0, runs >= 1, workers >= 1 required")
        if self.pilot.allocation not in ("sparse", "continuous"):
            raise ConfigError(
                f"pilot.allocation must be sparse|continuous, got {self.pilot.allocation!r}"
            )


# --- YAML loading with per-key line numbers -------------------------------

_NESTED = {"pilot": PilotConfig, "channel": ChannelConfig}
_TUPLE_KEYS = {"seeds", "sigma_w"}


def _compose_marks(text: str) -> dict[tuple, int]:
    """Map of key paths to 1-based line numbers from the YAML node tree."""
    marks: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key_node, val_node in node.value:
                key_path = path + (key_node.value,)
                marks[key_path] = key_node.start_mark.line + 1
                walk(val_node, key_path)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if root is not None:
        walk(root, ())
    return marks


def _coerce(value, default, where: str, line: int):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} (line {line}): expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int,)):
            raise ConfigError(f"{where} (line {line}): expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} (line {line}): expected a number")
        return float(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where} (line {line}): expected a string")
        return value
    raise ConfigError(f"{where} (line {line}): unsupported value type")


def _build_section(cls, data: dict, marks: dict, path: tuple):
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        key_path = path + (key,)
        line = marks.get(key_path, 0)
        where = ".".join(key_path)
        if not hasattr(defaults, key):
            raise ConfigError(f"{where} (line {line}): unknown key")
        current = getattr(defaults, key)
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} (line {line}): expected a mapping")
            kwargs[key] = _build_section(_NESTED[key], value, marks, key_path)
        elif key in _TUPLE_KEYS:
            if value is None:
                kwargs[key] = None
                continue
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where} (line {line}): expected a list")
            if key == "seeds":
                if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise ConfigError(f"{where} (line {line}): expected a list of integers")
                kwargs[key] = tuple(value)
            else:
                if len(value) != 3:
                    raise ConfigError(f"{where} (line {line}): expected three numbers")
                kwargs[key] = tuple(float(v) for v in value)
        else:
            kwargs[key] = _coerce(value, current, where, line)
    return cls(**kwargs)


def load_config(path: str | Path) -> ScenarioConfig:
    """Parse and validate a scenario file; errors carry key paths and lines."""
    text = Path(path).read_text()
    return parse_config(text, name_hint=Path(path).stem)


def parse_config(text: str, name_hint: str | None = None) -> ScenarioConfig:
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("scenario file must be a YAML mapping")
    marks = _compose_marks(text)
    cfg = _build_section(ScenarioConfig, data, marks, ())
    if name_hint and "name" not in data:
        cfg = ScenarioConfig(**{**cfg.__dict__, "name": name_hint})
    cfg.validate()
    return cfg
