"""Classifier inputs and balanced lane-change training sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .forest import KINDS, N_FEATURES
from .kinematics import Track, VehicleState
from .scenes import (FEATURE_ROLES, Neighbor, NeighborRole, Scene, SceneGeometry, TrackIndex,
                     detect_lane_change, find_neighbors, is_ramp_vehicle)

logger = logging.getLogger(__name__)

FEATURE_NAMES = tuple(
    [f"{name}_{r.value}" for r in FEATURE_ROLES
     for name in ("dx", "dy", "v", "u", "a", "e")]
    + [f"{name}_i" for name in ("x", "y", "v", "u", "a", "e")]
)


def features_from_states(central: VehicleState, neighbors: Mapping[NeighborRole, Neighbor | VehicleState]
                         ) -> np.ndarray:
    """Assemble the 42-long vector: six values per neighbor, then the central's own six."""
    out = []
    for role in FEATURE_ROLES:
        nb = neighbors[role]
        s = nb.state if isinstance(nb, Neighbor) else nb
        out.extend([abs(s.x - central.x), s.y - central.y, s.v, s.u, s.a, s.e])
    out.extend(central.as_tuple())
    vec = np.array(out, dtype=float)
    assert vec.size == N_FEATURES
    return vec


def build_feature_vector(scene: Scene, anchor_step: int | None = None) -> np.ndarray:
    k = scene.anchor if anchor_step is None else anchor_step
    return features_from_states(scene.central.state(k), scene.neighbor_states(k))


def track_features(central: Track, index: TrackIndex, step: int, geometry: SceneGeometry) -> np.ndarray:
    """Features of ``central`` at ``step`` with neighbors resolved afresh."""
    return features_from_states(central.state(step), find_neighbors(central, index, step, geometry))


@dataclass
class TrainingSet:
    kind: str
    t: int
    X: np.ndarray
    y: np.ndarray
    vehicle_ids: np.ndarray
    steps: np.ndarray
    skipped: dict = field(default_factory=dict)


def anchor_labels(track: Track, lc_time: float | None, kind: str, t: float):
    """Positive and negative candidate steps of one track.

    ``time-to-LC`` is the LC time minus the step time.  Cumulative positives
    have ``0 <= ttl <= t``, exact positives ``|ttl - t| <= dt / 2``; negatives
    have ``ttl > t`` (beyond the half-step tolerance) or no lane change.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    half = 0.5 * track.dt
    times = track.times
    if lc_time is None:
        return np.empty(0, dtype=int), np.arange(len(track))
    ttl = lc_time - times
    if kind == "cumulative":
        pos = (ttl > -half) & (ttl < t + half)
    else:
        pos = (ttl > -half) & (np.abs(ttl - t) <= half)
    neg = ttl > t + half
    return np.flatnonzero(pos), np.flatnonzero(neg)


def build_training_sets(tracks: Iterable[Track], index: TrackIndex, geometry: SceneGeometry,
                        kind: str, t: int, seed: int = 0, cache: dict | None = None) -> TrainingSet:
    """One positive and one negative anchor per ramp vehicle, drawn uniformly.

    Vehicles lacking candidates for a class are counted in ``skipped``.
    ``cache`` may be shared across calls to reuse feature vectors.
    """
    cache = {} if cache is None else cache
    X, y, vids, steps = [], [], [], []
    skipped = {"no_positive": 0, "no_negative": 0}
    kind_code = KINDS.index(kind)
    for tr in sorted(tracks, key=lambda tr: tr.vehicle_id):
        if not is_ramp_vehicle(tr, geometry):
            continue
        lc = detect_lane_change(tr, geometry)
        pos, neg = anchor_labels(tr, lc, kind, t)
        rng = np.random.default_rng([seed, kind_code, int(t), tr.vehicle_id])
        for label, pool, miss in ((1, pos, "no_positive"), (0, neg, "no_negative")):
            if pool.size == 0:
                skipped[miss] += 1
                continue
            k = int(pool[rng.integers(pool.size)])
            key = (tr.vehicle_id, k)
            if key not in cache:
                cache[key] = track_features(tr, index, k, geometry)
            X.append(cache[key])
            y.append(label)
            vids.append(tr.vehicle_id)
            steps.append(k)
    y = np.array(y, dtype=np.int64)
    if not (y == 1).any() or not (y == 0).any():
        raise ValueError(f"training set ({kind}, t={t}) lacks a positive or negative sample")
    return TrainingSet(kind, int(t), np.array(X).reshape(-1, N_FEATURES), y,
                       np.array(vids, dtype=np.int64), np.array(steps, dtype=np.int64), skipped)
