"""Synthetic on-ramp traffic for oracle testing.

Vehicles enter a two-lane segment (the on-ramp and the adjacent freeway
lane), follow their leaders with a car-following law on the native 0.1 s
grid, and ramp vehicles switch lanes at scripted times or positions.  Before
a lane change the vehicle drifts laterally from its lane centre to the lane
boundary, which is what makes the corpus separable for the classifier.
"""
from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, field

import numpy as np

from .carfollow import ACCELERATION, PARAM_TYPES, IdmParams
from .ingest import CANONICAL_COLUMNS, RawSeries
from .scenes import SceneGeometry

logger = logging.getLogger(__name__)

FREE_GAP = 1e6  # m; gap to the stand-in leader of a vehicle with nobody ahead
FAMILIES = ("idm", "gipps", "ghr", "none")


class CollisionError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleSpec:
    """One simulated vehicle.

    ``family == "none"`` means zero acceleration.  A ramp vehicle changes
    lane at ``lc_time`` if given, otherwise once it passes ``lc_x`` and the
    target lane has room.
    """

    vehicle_id: int
    lane_id: int
    entry_time: float
    entry_speed: float
    family: str = "idm"
    params: tuple = ()
    entry_x: float = 0.0
    lc_time: float | None = None
    lc_x: float | None = None

    def law_params(self):
        return None if self.family == "none" else PARAM_TYPES[self.family](*self.params)


@dataclass
class SyntheticScenario:
    vehicles: list[VehicleSpec]
    geometry: SceneGeometry = field(default_factory=SceneGeometry)
    duration: float = 60.0
    native_dt: float = 0.1
    noise: float = 0.0  # std of additive position noise, m
    seed: int = 0
    drift_time: float = 6.0  # lateral drift toward the boundary before a lane change, s
    settle_time: float = 2.0  # boundary to new lane centre after the change, s
    max_accel: float = 5.0
    max_decel: float = 8.0
    v_max: float = 35.0
    merge_gap: float = 10.0
    entry_gap: float = 8.0
    ramp_end_obstacle: bool = True

    def __post_init__(self):
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        for v in self.vehicles:
            if v.family not in FAMILIES:
                raise ValueError(f"vehicle {v.vehicle_id}: unknown family {v.family!r}")
        if self.native_dt <= 0 or self.duration <= 0:
            raise ValueError("duration and native_dt must be positive")

    def lane_center(self, lane: int) -> float:
        g = self.geometry
        return g.y_cur if lane == g.ramp_lane else g.y_tar


@dataclass
class SyntheticCorpus:
    scenario: SyntheticScenario
    series: dict[int, RawSeries]
    lc_times: dict[int, float]
    entry_times: dict[int, float]
    leaders: dict[int, np.ndarray]  # id of the leader used at each step, -1 if none

    def write(self, path) -> None:
        write_raw_corpus(self, path)


def random_scenario(seed: int = 0, n_ramp: int = 30, n_target: int = 40,
                    geometry: SceneGeometry | None = None, noise: float = 0.0,
                    lc_x_range: tuple[float, float] = (170.0, 225.0),
                    target_headway: tuple[float, float] = (2.5, 4.5),
                    ramp_headway: tuple[float, float] = (3.0, 6.0)) -> SyntheticScenario:
    """IDM traffic on both lanes with position-triggered merges."""
    geometry = geometry or SceneGeometry()
    rng = np.random.default_rng([seed, 101])
    specs = []

    def idm(v_lo):
        return (float(rng.uniform(5.0, 8.0)), float(rng.uniform(1.0, 1.8)), float(rng.uniform(1.0, 2.0)),
                float(rng.uniform(1.5, 3.0)), float(rng.uniform(max(v_lo, 15.0), 30.0)), 4.0)

    t = 0.0
    for _ in range(n_target):
        t += float(rng.uniform(*target_headway))
        v0 = float(rng.uniform(12.0, 18.0))
        specs.append((t, geometry.target_lane, v0, idm(v0), None))
    t = 0.0
    for _ in range(n_ramp):
        t += float(rng.uniform(*ramp_headway))
        v0 = float(rng.uniform(8.0, 14.0))
        specs.append((t, geometry.ramp_lane, v0, idm(v0), float(rng.uniform(*lc_x_range))))
    specs.sort(key=lambda s: (s[0], s[1]))
    vehicles = [VehicleSpec(k + 1, lane, round(t0, 1), v0, "idm", p, lc_x=lcx)
                for k, (t0, lane, v0, p, lcx) in enumerate(specs)]
    last = max(v.entry_time for v in vehicles) if vehicles else 0.0
    return SyntheticScenario(vehicles, geometry, duration=round(last + 60.0, 1), noise=noise, seed=seed)


def _nearest_ahead(x, pool):
    """(index, x) of the nearest entry in ``pool`` strictly ahead of ``x``."""
    best, best_x = -1, np.inf
    for j, xj in pool:
        if x < xj < best_x:
            best, best_x = j, xj
    return best


def generate_synthetic_corpus(scenario: SyntheticScenario) -> SyntheticCorpus:
    """Simulate the scenario and return raw native-rate series per vehicle.

    Each step computes every present vehicle's acceleration from its state and
    its leader's state at that step, clamps it, then advances speed and
    position semi-implicitly.  Raises :class:`CollisionError` if any gap in a
    lane closes to zero or below.
    """
    sc = scenario
    g = sc.geometry
    dt = sc.native_dt
    n_steps = int(round(sc.duration / dt)) + 1
    specs = sorted(sc.vehicles, key=lambda v: v.vehicle_id)
    nv = len(specs)
    params = [s.law_params() for s in specs]
    x = np.array([s.entry_x for s in specs], dtype=float)
    v = np.array([s.entry_speed for s in specs], dtype=float)
    lane = np.array([s.lane_id for s in specs], dtype=int)
    state = np.zeros(nv, dtype=int)  # 0 waiting, 1 driving, 2 exited
    entry_step = [int(round(s.entry_time / dt)) for s in specs]
    hist = [dict(t=[], x=[], v=[], a=[], lane=[], lead=[]) for _ in specs]
    lc_times, entry_times = {}, {}

    for k in range(n_steps):
        t = k * dt
        # admit waiting vehicles once the entry point is clear
        for i, s in enumerate(specs):
            if state[i] == 0 and k >= entry_step[i]:
                others = [x[j] for j in range(nv) if state[j] == 1 and lane[j] == lane[i]]
                if all(abs(xj - x[i]) >= sc.entry_gap for xj in others):
                    state[i] = 1
                    entry_times[s.vehicle_id] = round(t, 9)
        active = np.flatnonzero(state == 1)
        if active.size == 0:
            if (state == 2).all() or not (state == 0).any():
                break
            continue

        # scripted lane changes
        for i in active:
            s = specs[i]
            if lane[i] != g.ramp_lane or s.vehicle_id in lc_times:
                continue
            if s.lc_time is not None:
                go = t >= s.lc_time - 1e-9
            elif s.lc_x is not None and x[i] >= s.lc_x:
                tgt = [j for j in active if lane[j] == g.target_lane]
                ahead = [x[j] - x[i] for j in tgt if x[j] >= x[i]]
                behind = [(x[i] - x[j], v[j] - v[i]) for j in tgt if x[j] < x[i]]
                go = (all(d >= sc.merge_gap for d in ahead)
                      and all(d >= max(sc.merge_gap, 3.0 * dv) for d, dv in behind))
            else:
                go = False
            if go:
                lane[i] = g.target_lane
                lc_times[s.vehicle_id] = round(t, 9)

        acc = np.zeros(nv)
        lead_ids = np.full(nv, -1)
        lead_idx = np.full(nv, -1)
        for i in active:
            pool = [(j, x[j]) for j in active if j != i and lane[j] == lane[i]]
            j = _nearest_ahead(x[i], pool)
            if j >= 0:
                lx, lv = x[j], v[j]
                lead_ids[i] = specs[j].vehicle_id
                lead_idx[i] = j
            else:
                lx, lv = x[i] + FREE_GAP, v[i]
            if sc.ramp_end_obstacle and lane[i] == g.ramp_lane and x[i] < g.x_end < lx:
                lx, lv = g.x_end, 0.0
                lead_ids[i] = 0
            if params[i] is None:
                a = 0.0
            else:
                a = float(ACCELERATION[specs[i].family](v[i], lv, lx - x[i], params[i]))
            if not np.isfinite(a):
                a = -sc.max_decel
            acc[i] = min(max(a, -sc.max_decel), sc.max_accel)

        for i in active:
            h = hist[i]
            h["t"].append(t)
            h["x"].append(x[i])
            h["v"].append(v[i])
            h["a"].append(acc[i])
            h["lane"].append(lane[i])
            h["lead"].append(lead_ids[i])

        v[active] = np.clip(v[active] + acc[active] * dt, 0.0, sc.v_max)
        x[active] = x[active] + v[active] * dt
        state[active[x[active] > g.segment_length]] = 2

        still = np.flatnonzero(state == 1)
        # a follower must not reach or pass the leader it had before the step
        for i in still:
            j = lead_idx[i]
            if j >= 0 and state[j] == 1 and x[j] - x[i] <= 0:
                raise CollisionError(
                    f"collision at t={t + dt:.1f} s in lane {lane[i]}: vehicle "
                    f"{specs[i].vehicle_id} at x={x[i]:.3f} reached vehicle "
                    f"{specs[j].vehicle_id} at x={x[j]:.3f}")
        for ln in np.unique(lane[still]):
            members = still[lane[still] == ln]
            order = members[np.argsort(x[members], kind="stable")]
            gaps = np.diff(x[order])
            if gaps.size and gaps.min() <= 0:
                b = int(np.argmin(gaps))
                raise CollisionError(
                    f"collision at t={t + dt:.1f} s in lane {ln}: vehicle "
                    f"{specs[order[b]].vehicle_id} at x={x[order[b]]:.3f} reached vehicle "
                    f"{specs[order[b + 1]].vehicle_id} at x={x[order[b + 1]]:.3f}")

    series, leaders = {}, {}
    rng_noise = sc.noise > 0
    for i, s in enumerate(specs):
        h = hist[i]
        if len(h["t"]) < 2:
            continue
        tt = np.round(np.array(h["t"]), 9)
        xs = np.array(h["x"])
        lanes = np.array(h["lane"], dtype=int)
        ys = _lateral_profile(tt, lanes, lc_times.get(s.vehicle_id), sc)
        if rng_noise:
            rng = np.random.default_rng([sc.seed, 7, s.vehicle_id])
            xs = xs + rng.normal(0.0, sc.noise, xs.size)
            ys = ys + rng.normal(0.0, sc.noise, ys.size)
        u = np.gradient(ys, dt) if ys.size > 1 else np.zeros_like(ys)
        e = np.gradient(u, dt) if ys.size > 1 else np.zeros_like(ys)
        series[s.vehicle_id] = RawSeries(s.vehicle_id, tt, xs, ys, lanes, np.array(h["v"]), u,
                                         np.array(h["a"]), e)
        leaders[s.vehicle_id] = np.array(h["lead"], dtype=int)
    return SyntheticCorpus(sc, series, lc_times, entry_times, leaders)


def _lateral_profile(t, lanes, lc_time, sc: SyntheticScenario) -> np.ndarray:
    g = sc.geometry
    y = np.array([sc.lane_center(int(ln)) for ln in lanes], dtype=float)
    if lc_time is None:
        return y
    y_from, y_to = sc.lane_center(g.ramp_lane), sc.lane_center(g.target_lane)
    y_mid = 0.5 * (y_from + y_to)
    before = (t < lc_time) & (t > lc_time - sc.drift_time)
    frac = 1.0 - (lc_time - t[before]) / sc.drift_time
    y[before] = y_from + (y_mid - y_from) * frac
    after = (t >= lc_time) & (t < lc_time + sc.settle_time)
    frac = (t[after] - lc_time) / sc.settle_time
    y[after] = y_mid + (y_to - y_mid) * frac
    return y


def write_raw_corpus(corpus: SyntheticCorpus, path) -> None:
    """Write native-rate rows with fixed formatting so files are byte-stable."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(CANONICAL_COLUMNS) + "\n")
        for vid in sorted(corpus.series):
            s = corpus.series[vid]
            for k in range(len(s)):
                fh.write(f"{vid},{s.t[k]:.1f},{s.x[k]:.6f},{s.y[k]:.6f},{s.v[k]:.6f},{s.u[k]:.6f},"
                         f"{s.a[k]:.6f},{s.e[k]:.6f},{int(s.lane_ids[k])}\n")


def idm_platoon(params: IdmParams, n: int = 2, gap: float = 30.0, speed: float = 15.0,
                lead_speed: float | None = None, lane: int = 6, duration: float = 20.0,
                lead_family: str = "none") -> SyntheticScenario:
    """A single-lane platoon placed at t = 0, leader first."""
    vehicles = [VehicleSpec(1, lane, 0.0, speed if lead_speed is None else lead_speed, lead_family,
                            () if lead_family == "none" else astuple(params),
                            entry_x=gap * (n - 1))]
    for k in range(1, n):
        vehicles.append(VehicleSpec(k + 1, lane, 0.0, speed, "idm", astuple(params),
                                    entry_x=gap * (n - 1 - k)))
    return SyntheticScenario(vehicles, duration=duration, entry_gap=0.0, ramp_end_obstacle=False)
