"""Vehicle state containers plus the smoothing and differencing stencils."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

DT = 0.2


@dataclass(frozen=True)
class VehicleState:
    """Kinematic record of one vehicle at one instant.

    ``x``/``v``/``a`` are longitudinal, ``y``/``u``/``e`` lateral (SI units).
    """

    x: float
    y: float = 0.0
    v: float = 0.0
    u: float = 0.0
    a: float = 0.0
    e: float = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x, self.y, self.v, self.u, self.a, self.e)


@dataclass
class Track:
    """Uniformly sampled trajectory of one vehicle.

    Stored column-wise; ``t0`` is the time of the first sample, so sample
    ``k`` sits at ``t0 + k * dt``.
    """

    vehicle_id: int
    t0: float
    dt: float
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    u: np.ndarray
    a: np.ndarray
    e: np.ndarray
    lane_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x)
        for name in ("y", "v", "u", "a", "e", "lane_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"track {self.vehicle_id}: column {name} has wrong length")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def start_frame(self) -> int:
        return int(round(self.t0 / self.dt))

    def state(self, k: int) -> VehicleState:
        return VehicleState(float(self.x[k]), float(self.y[k]), float(self.v[k]),
                            float(self.u[k]), float(self.a[k]), float(self.e[k]))

    def states(self) -> list[VehicleState]:
        return [self.state(k) for k in range(len(self))]

    def slice(self, start: int, stop: int) -> "Track":
        return Track(self.vehicle_id, self.t0 + start * self.dt, self.dt,
                     self.x[start:stop].copy(), self.y[start:stop].copy(),
                     self.v[start:stop].copy(), self.u[start:stop].copy(),
                     self.a[start:stop].copy(), self.e[start:stop].copy(),
                     self.lane_ids[start:stop].copy(), dict(self.meta))

    @classmethod
    def from_positions(cls, vehicle_id, t0, dt, x, y, lane_ids, meta=None) -> "Track":
        """Build a track by differencing already-smoothed positions."""
        v, a = differentiate_kinematics(x, dt)
        u, e = differentiate_kinematics(y, dt)
        return cls(vehicle_id, t0, dt, np.asarray(x, float), np.asarray(y, float),
                   v, u, a, e, np.asarray(lane_ids, dtype=int), dict(meta or {}))


def savitzky_golay_smooth(series, window: int = 11, poly_order: int = 3) -> np.ndarray:
    """Least-squares polynomial smoothing over a sliding odd window.

    The first and last ``window // 2`` samples are taken from the polynomial
    fitted to the first/last full window, so output length equals input.
    """
    series = np.asarray(series, dtype=float)
    if window % 2 != 1 or window < 1:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if poly_order >= window:
        raise ValueError("poly_order must be less than window")
    if series.size < window:
        raise ValueError(f"series of length {series.size} shorter than window {window}")
    return savgol_filter(series, window, poly_order, mode="interp")


def differentiate_kinematics(positions, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Second-order finite-difference velocity and acceleration.

    Interior points use central differences; the ends use one-sided
    second-order stencils (the 3-point second-difference stencil when only
    three samples exist).
    """
    x = np.asarray(positions, dtype=float)
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 positions to differentiate")
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = np.empty(n)
    a = np.empty(n)
    v[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    v[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt)
    v[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dt)
    a[1:-1] = (x[2:] - 2.0 * x[1:-1] + x[:-2]) / dt ** 2
    if n >= 4:
        a[0] = (2.0 * x[0] - 5.0 * x[1] + 4.0 * x[2] - x[3]) / dt ** 2
        a[-1] = (2.0 * x[-1] - 5.0 * x[-2] + 4.0 * x[-3] - x[-4]) / dt ** 2
    else:
        a[0] = a[-1] = a[1]
    return v, a
