"""Network-side device positioning and clock synchronization via cascaded
extended Kalman filters: per-node DoA/ToA tracking from multiantenna
multicarrier snapshots, central fusion into position and clock states, plus
the scenario simulator and Monte Carlo harness around them."""

__version__ = "0.1.0"

from .statespace import (
    SPEED_OF_LIGHT,
    AnInfo,
    ClockModelParams,
    ClockState,
    GaussianState,
    Measurement,
    Position2D,
    Velocity2D,
    symmetrize_psd,
    wrap_angle,
)

__all__ = [
    "SPEED_OF_LIGHT",
    "AnInfo",
    "ClockModelParams",
    "ClockState",
    "GaussianState",
    "Measurement",
    "Position2D",
    "Velocity2D",
    "symmetrize_psd",
    "wrap_angle",
    "__version__",
]
