"""Forecast the central vehicle's longitudinal motion with a fitted law.

Each step picks the nearest adjacent-lane leader ahead of the current
forecast position, blends it with the immediate leader into an actual
leader, evaluates the car-following law, clamps the acceleration and
speed, then advances position with the updated speed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .carfollow import CfParams, IdmParams, gap_saturated
from .kinematics import VehicleState
from .scenes import ADJACENT_ROLES, VIRTUAL_LEADER_X, NeighborRole

DEFAULT_A = 5.0
DEFAULT_B = -5.0
DEFAULT_VMAX = 35.0
VIRTUAL_ROLE = "virtual"


@dataclass
class RolloutConfig:
    fitted: CfParams
    dt: float = 0.2
    t_max: float = 15.0
    v_max: float = DEFAULT_VMAX
    A: float = DEFAULT_A
    B: float = DEFAULT_B  # negative floor

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.A <= 0 or self.B >= 0:
            raise ValueError("need A > 0 and B < 0 (B is stored as a negative floor)")
        if abs(self.t_max / self.dt - round(self.t_max / self.dt)) > 1e-9:
            raise ValueError("t_max must be a multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @classmethod
    def for_params(cls, fitted: CfParams, dt=0.2, t_max=15.0, v_max=None) -> "RolloutConfig":
        """Clamp bounds from the fitted IDM values, else the widest defaults."""
        p = fitted.params
        if isinstance(p, IdmParams):
            return cls(fitted, dt, t_max, p.v_d if v_max is None else v_max, p.A, -p.B)
        return cls(fitted, dt, t_max, DEFAULT_VMAX if v_max is None else v_max)


@dataclass
class StepFlags:
    accel_upper: bool = False
    accel_lower: bool = False
    speed_upper: bool = False
    speed_lower: bool = False
    nonfinite: bool = False
    gap_saturated: bool = False

    def code(self) -> str:
        names = [k for k, v in self.__dict__.items() if v]
        return "|".join(names)


@dataclass
class ForecastResult:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    leader_role: list[str]
    leader_x: np.ndarray
    leader_v: np.ndarray
    leader_a: np.ndarray
    flags: list[StepFlags]
    truth_x: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def select_nearest_adjacent_leader(x_hat: float, adjacent: Mapping[NeighborRole, VehicleState]
                                   ) -> tuple[str, VehicleState]:
    """Adjacent-lane vehicle with the smallest non-negative gap ahead.

    Ties go to the earlier role in l1, l2, f1, f2 order.  With nothing ahead a
    virtual leader at the far end is returned.
    """
    best_role, best_gap = None, math.inf
    for role in ADJACENT_ROLES:
        st = adjacent.get(role)
        if st is None:
            continue
        gap = st.x - x_hat
        if gap >= 0 and gap < best_gap:
            best_role, best_gap = role, gap
    if best_role is None:
        return VIRTUAL_ROLE, VehicleState(x=VIRTUAL_LEADER_X)
    return best_role.value, adjacent[best_role]


def actual_leader(immediate: VehicleState, nearest: VehicleState, x_end: float) -> VehicleState:
    """Midpoint of immediate and nearest leader, or the nearest leader alone
    once the immediate leader is at or past the ramp end."""
    if immediate.x >= x_end:
        return nearest
    return VehicleState(*(0.5 * (p + q) for p, q in zip(immediate.as_tuple(), nearest.as_tuple())))


def step(x: float, v: float, leader: VehicleState, cfg: RolloutConfig, a_prev: float = 0.0
         ) -> tuple[float, float, float, StepFlags]:
    """Advance one time step; returns new position, speed, acceleration, flags."""
    flags = StepFlags()
    ego = VehicleState(x=x, v=v, a=a_prev)
    fitted = cfg.fitted
    flags.gap_saturated = gap_saturated(ego, leader, fitted.family)
    a = fitted.accel(ego, leader)
    if not math.isfinite(a):
        a = cfg.B
        flags.nonfinite = True
    if a > cfg.A:
        a = cfg.A
        flags.accel_upper = True
    elif a < cfg.B:
        a = cfg.B
        flags.accel_lower = True
    v = v + a * cfg.dt
    if v > cfg.v_max:
        v = cfg.v_max
        flags.speed_upper = True
    elif v < 0.0:
        v = 0.0
        flags.speed_lower = True
    x = x + v * cfg.dt
    return x, v, a, flags


def forecast(initial: VehicleState, immediate_leader: np.ndarray,
             adjacent: Mapping[NeighborRole, np.ndarray], x_end: float,
             cfg: RolloutConfig, truth_x=None) -> ForecastResult:
    """Run the rollout for ``cfg.n_steps`` steps.

    ``immediate_leader`` and each ``adjacent[role]`` are arrays of shape
    ``(>= n_steps, 3)`` holding ``(x, v, a)`` at times ``0, dt, 2 dt, ...``
    after the anchor (row 0 is the anchor itself).  Step ``k`` uses row ``k``
    to move the central vehicle from ``k dt`` to ``(k + 1) dt``.
    """
    n = cfg.n_steps
    lead = np.asarray(immediate_leader, dtype=float)
    adj = {r: np.asarray(tab, dtype=float) for r, tab in adjacent.items()}
    for name, tab in [("immediate leader", lead), *((r.value, t) for r, t in adj.items())]:
        if tab.shape[0] < n:
            raise ValueError(f"{name} table covers {tab.shape[0]} steps, need {n}")

    x, v, a = initial.x, initial.v, initial.a
    xs, vs, accs = np.empty(n), np.empty(n), np.empty(n)
    lx, lv, la = np.empty(n), np.empty(n), np.empty(n)
    roles, flags = [], []
    for k in range(n):
        states = {r: VehicleState(x=t[k, 0], v=t[k, 1], a=t[k, 2]) for r, t in adj.items()}
        role, nearest = select_nearest_adjacent_leader(x, states)
        immediate = VehicleState(x=lead[k, 0], v=lead[k, 1], a=lead[k, 2])
        m = actual_leader(immediate, nearest, x_end)
        if immediate.x < x_end:
            role = f"l+{role}"
        x, v, a, fl = step(x, v, m, cfg, a)
        xs[k], vs[k], accs[k] = x, v, a
        lx[k], lv[k], la[k] = m.x, m.v, m.a
        roles.append(role)
        flags.append(fl)
    t = cfg.dt * np.arange(1, n + 1)
    truth = None if truth_x is None else np.asarray(truth_x, dtype=float)
    return ForecastResult(t, xs, vs, accs, roles, lx, lv, la, flags, truth)
