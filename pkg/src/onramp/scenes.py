"""Neighbor resolution, virtual vehicles and scene extraction.

A *scene* is a fixed-length window around one on-ramp (central) vehicle.
Its six neighbors are resolved once, at the anchor step that ends the 4 s
observation, and their trajectories are carried over the whole window.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .kinematics import DT, Track, VehicleState

logger = logging.getLogger(__name__)

VIRTUAL_LEADER_X = 500.0
VIRTUAL_FOLLOWER_X = -500.0
INPUT_STEPS = 20
ANCHOR_STEP = INPUT_STEPS - 1


class NeighborRole(str, Enum):
    L = "l"
    F = "f"
    L1 = "l1"
    L2 = "l2"
    F1 = "f1"
    F2 = "f2"

    @property
    def is_leader(self) -> bool:
        return self in (NeighborRole.L, NeighborRole.L1, NeighborRole.L2)

    @property
    def same_lane(self) -> bool:
        return self in (NeighborRole.L, NeighborRole.F)


ADJACENT_ROLES = (NeighborRole.L1, NeighborRole.L2, NeighborRole.F1, NeighborRole.F2)
# block order of the classifier feature vector
FEATURE_ROLES = (NeighborRole.L, NeighborRole.L1, NeighborRole.L2,
                 NeighborRole.F, NeighborRole.F1, NeighborRole.F2)


@dataclass(frozen=True)
class SceneGeometry:
    x_end: float = 230.0
    y_cur: float = 0.0
    y_tar: float = 3.7
    segment_length: float = 503.0
    v_max: float = 35.0
    dt: float = DT
    ramp_lane: int = 7
    target_lane: int = 6
    # longitudinal band used to collect adjacent-lane tracks for pre-training
    influence: tuple[float, float] = (100.0, 330.0)

    def __post_init__(self):
        if not 0 < self.x_end <= self.segment_length:
            raise ValueError("need 0 < x_end <= segment_length")
        if self.dt <= 0 or self.v_max <= 0:
            raise ValueError("dt and v_max must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneGeometry":
        d = dict(d)
        if "influence" in d:
            d["influence"] = tuple(d["influence"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["influence"] = list(self.influence)
        return d


@dataclass(frozen=True)
class Neighbor:
    state: VehicleState
    real: bool
    vehicle_id: int | None = None


def place_virtual_vehicle(role: NeighborRole, geometry: SceneGeometry) -> VehicleState:
    """Stand-in for a missing neighbor: fixed position, zero kinematics."""
    if role is NeighborRole.L:
        x = geometry.x_end
    elif role.is_leader:
        x = VIRTUAL_LEADER_X
    else:
        x = VIRTUAL_FOLLOWER_X
    y = geometry.y_cur if role.same_lane else geometry.y_tar
    return VehicleState(x=x, y=y)


class TrackIndex:
    """Frame-indexed lookup over a collection of tracks on a common grid."""

    def __init__(self, tracks: Iterable[Track]):
        self.tracks: dict[int, Track] = {}
        frames: dict[int, list[tuple[int, int]]] = {}
        for tr in tracks:
            self.tracks[tr.vehicle_id] = tr
            f0 = tr.start_frame
            for k in range(len(tr)):
                frames.setdefault(f0 + k, []).append((tr.vehicle_id, k))
        self._frames = {}
        for f, entries in frames.items():
            entries.sort()
            ids = np.array([e[0] for e in entries], dtype=np.int64)
            ks = np.array([e[1] for e in entries], dtype=np.int64)
            xs = np.array([self.tracks[i].x[k] for i, k in entries])
            lanes = np.array([self.tracks[i].lane_ids[k] for i, k in entries])
            self._frames[f] = (ids, ks, xs, lanes)

    def __len__(self):
        return len(self.tracks)

    def at_frame(self, frame: int):
        empty = np.empty(0, dtype=np.int64)
        return self._frames.get(frame, (empty, empty, np.empty(0), empty))


def _ranked(ids, gaps):
    # nearest first, ties to the lower vehicle id
    order = np.lexsort((ids, np.abs(gaps)))
    return [int(ids[j]) for j in order]


def find_neighbors(central: Track, index: TrackIndex, step: int,
                   geometry: SceneGeometry) -> dict[NeighborRole, Neighbor]:
    """Resolve the six neighbor roles of ``central`` at sample ``step``.

    Leaders satisfy ``x_n >= x_i`` and followers ``x_n < x_i``.  The same
    lane is the ramp lane and the adjacent lane the merge target.  Missing
    roles are filled with virtual vehicles.
    """
    frame = central.start_frame + step
    xi = float(central.x[step])
    ids, ks, xs, lanes = index.at_frame(frame)
    keep = ids != central.vehicle_id
    ids, ks, xs, lanes = ids[keep], ks[keep], xs[keep], lanes[keep]
    gaps = xs - xi
    local = {int(i): int(k) for i, k in zip(ids, ks)}

    picks: dict[NeighborRole, int] = {}
    for lane, leaders, followers in (
        (geometry.ramp_lane, (NeighborRole.L,), (NeighborRole.F,)),
        (geometry.target_lane, (NeighborRole.L1, NeighborRole.L2),
         (NeighborRole.F1, NeighborRole.F2)),
    ):
        in_lane = lanes == lane
        ahead = in_lane & (gaps >= 0)
        behind = in_lane & (gaps < 0)
        for roles, mask in ((leaders, ahead), (followers, behind)):
            for role, vid in zip(roles, _ranked(ids[mask], gaps[mask])):
                picks[role] = vid

    out = {}
    for role in NeighborRole:
        vid = picks.get(role)
        if vid is None:
            out[role] = Neighbor(place_virtual_vehicle(role, geometry), False, None)
        else:
            out[role] = Neighbor(index.tracks[vid].state(local[vid]), True, vid)
    return out


def detect_lane_change(central: Track, geometry: SceneGeometry) -> float | None:
    """Absolute time of the first sample off the ramp lane, or None."""
    off = np.flatnonzero(np.asarray(central.lane_ids) != geometry.ramp_lane)
    if off.size == 0:
        return None
    return float(central.t0 + off[0] * central.dt)


@dataclass
class NeighborTrack:
    """A neighbor's trajectory on the scene grid.

    For virtual neighbors the state is constant.  ``present`` marks samples
    where the real vehicle was observed; elsewhere its motion is continued
    at constant speed from the nearest observed sample.
    """

    role: NeighborRole
    real: bool
    vehicle_id: int | None
    track: Track
    present: np.ndarray

    def state(self, k: int) -> VehicleState:
        return self.track.state(k)


def _virtual_track(role, geometry, t0, n):
    s = place_virtual_vehicle(role, geometry)
    lane = geometry.ramp_lane if role.same_lane else geometry.target_lane
    return Track(-1, t0, geometry.dt, np.full(n, s.x), np.full(n, s.y), np.zeros(n),
                 np.zeros(n), np.zeros(n), np.zeros(n), np.full(n, lane, dtype=int))


def cover_window(track: Track, start_frame: int, n: int) -> tuple[Track, np.ndarray]:
    """Re-grid ``track`` onto frames ``start_frame .. start_frame + n - 1``."""
    dt = track.dt
    local = np.arange(n) + start_frame - track.start_frame
    present = (local >= 0) & (local < len(track))
    k = np.clip(local, 0, len(track) - 1)
    shift = (local - k) * dt
    x = track.x[k] + track.v[k] * shift
    a = np.where(present, track.a[k], 0.0)
    e = np.where(present, track.e[k], 0.0)
    y = track.y[k] + track.u[k] * shift
    out = Track(track.vehicle_id, start_frame * dt, dt, x, y, track.v[k].copy(),
                track.u[k].copy(), a, e, track.lane_ids[k].copy())
    return out, present


@dataclass
class Scene:
    scene_id: str
    central: Track
    neighbors: dict[NeighborRole, NeighborTrack]
    geometry: SceneGeometry
    lc_time: float | None = None  # relative to the window start
    anchor: int = ANCHOR_STEP
    meta: dict = field(default_factory=dict)

    @property
    def window_start(self) -> float:
        return self.central.t0

    def neighbor_states(self, k: int) -> dict[NeighborRole, Neighbor]:
        return {r: Neighbor(n.state(k), n.real, n.vehicle_id) for r, n in self.neighbors.items()}

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "central_id": self.central.vehicle_id,
            "window_start": round(self.window_start, 6),
            "window_frame": self.central.start_frame,
            "n_steps": len(self.central),
            "anchor": self.anchor,
            "lc_time": self.lc_time,
            "neighbors": {r.value: (n.vehicle_id if n.real else "virtual")
                          for r, n in self.neighbors.items()},
            "geometry": self.geometry.to_dict(),
        }


def build_scene(central: Track, index: TrackIndex, start: int, n_steps: int,
                geometry: SceneGeometry, anchor: int = ANCHOR_STEP,
                roles: Mapping[str, int | str] | None = None) -> Scene:
    """Cut a window of ``central`` and attach its anchor-step neighbors.

    ``roles`` overrides neighbor resolution (used when reloading an archive).
    """
    window = central.slice(start, start + n_steps)
    if roles is None:
        found = find_neighbors(central, index, start + anchor, geometry)
        roles = {r.value: (nb.vehicle_id if nb.real else "virtual") for r, nb in found.items()}
    neighbors = {}
    for role in NeighborRole:
        vid = roles[role.value]
        if vid == "virtual" or vid is None:
            neighbors[role] = NeighborTrack(role, False, None,
                                            _virtual_track(role, geometry, window.t0, n_steps),
                                            np.zeros(n_steps, dtype=bool))
        else:
            tr, present = cover_window(index.tracks[int(vid)], window.start_frame, n_steps)
            neighbors[role] = NeighborTrack(role, True, int(vid), tr, present)
    lc = detect_lane_change(window, geometry)
    lc_rel = None if lc is None else round(lc - window.t0, 9)
    sid = f"{central.vehicle_id}@{window.start_frame}"
    return Scene(sid, window, neighbors, geometry, lc_rel, anchor)


def is_ramp_vehicle(track: Track, geometry: SceneGeometry) -> bool:
    return len(track) > 0 and int(track.lane_ids[0]) == geometry.ramp_lane


def extract_scenes(tracks: Iterable[Track], geometry: SceneGeometry, window_len: float = 19.0,
                   samples_per_vehicle: int = 2, rng_seed: int = 0,
                   index: TrackIndex | None = None) -> tuple[list[Scene], int]:
    """Draw random fixed-length windows for every on-ramp vehicle.

    Window starts are sampled without replacement from a generator seeded by
    ``(rng_seed, vehicle_id)``.  Returns the scenes and the number of ramp
    vehicles skipped because their track is shorter than the window.
    """
    tracks = list(tracks)
    index = index or TrackIndex(tracks)
    n_steps = int(round(window_len / geometry.dt)) + 1
    scenes, skipped = [], 0
    for tr in sorted(tracks, key=lambda t: t.vehicle_id):
        if not is_ramp_vehicle(tr, geometry):
            continue
        n_starts = len(tr) - n_steps + 1
        if n_starts < 1:
            skipped += 1
            continue
        rng = np.random.default_rng([rng_seed, tr.vehicle_id])
        k = min(samples_per_vehicle, n_starts)
        starts = np.sort(rng.choice(n_starts, size=k, replace=False))
        for s in starts:
            scenes.append(build_scene(tr, index, int(s), n_steps, geometry))
    if skipped:
        logger.info("skipped %d ramp vehicles shorter than %.1f s", skipped, window_len)
    return scenes, skipped


def write_scene_archive(scenes: Iterable[Scene], path) -> None:
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(json.dumps(sc.to_record(), sort_keys=True) + "\n")


def read_scene_archive(path, index: TrackIndex) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            geometry = SceneGeometry.from_dict(rec["geometry"])
            central = index.tracks[rec["central_id"]]
            start = rec["window_frame"] - central.start_frame
            scenes.append(build_scene(central, index, start, rec["n_steps"], geometry,
                                      rec["anchor"], roles=rec["neighbors"]))
    return scenes
