import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onramp.scenes import (ADJACENT_ROLES, NeighborRole, SceneGeometry, TrackIndex, detect_lane_change,
                           extract_scenes, find_neighbors, place_virtual_vehicle, read_scene_archive,
                           write_scene_archive)

from .helpers import make_track

R = NeighborRole


def snapshot(central_x, others, central_lane=7):
    """Central vehicle 0 plus (vid, x, lane) vehicles, all standing still."""
    tracks = [make_track(0, [central_x] * 3, central_lane)]
    tracks += [make_track(vid, [x] * 3, lane) for vid, x, lane in others]
    return tracks[0], TrackIndex(tracks)


def oracle(central_x, others, g):
    """Sort-and-pick over signed gaps, ties to the lower id."""
    out = {}
    for lane, lead_roles, follow_roles in ((g.ramp_lane, [R.L], [R.F]),
                                          (g.target_lane, [R.L1, R.L2], [R.F1, R.F2])):
        ahead = sorted((x - central_x, vid) for vid, x, ln in others if ln == lane and x >= central_x)
        behind = sorted((central_x - x, vid) for vid, x, ln in others if ln == lane and x < central_x)
        for roles, items in ((lead_roles, ahead), (follow_roles, behind)):
            for role, (_, vid) in zip(roles, items):
                out[role] = vid
    return out


class TestFindNeighbors:
    def test_adjacent_roles(self, geometry):
        others = [(1, 110.0, 6), (2, 125.0, 6), (3, 95.0, 6), (4, 80.0, 6)]
        central, index = snapshot(100.0, others)
        nb = find_neighbors(central, index, 0, geometry)
        assert [nb[r].vehicle_id for r in ADJACENT_ROLES] == [1, 2, 3, 4]
        assert nb[R.L1].state.x - 100.0 == pytest.approx(10.0)
        assert nb[R.F2].state.x - 100.0 == pytest.approx(-20.0)

    def test_empty_adjacent_lane(self, geometry):
        central, index = snapshot(100.0, [(1, 120.0, 7)])
        nb = find_neighbors(central, index, 0, geometry)
        assert all(not nb[r].real for r in ADJACENT_ROLES)
        assert nb[R.L].real and nb[R.L].vehicle_id == 1
        assert not nb[R.F].real

    def test_side_by_side_counts_as_leader(self, geometry):
        central, index = snapshot(100.0, [(5, 100.0, 6)])
        nb = find_neighbors(central, index, 0, geometry)
        assert nb[R.L1].vehicle_id == 5 and not nb[R.F1].real

    def test_tie_goes_to_lower_id(self, geometry):
        central, index = snapshot(100.0, [(9, 110.0, 6), (4, 110.0, 6)])
        nb = find_neighbors(central, index, 0, geometry)
        assert nb[R.L1].vehicle_id == 4 and nb[R.L2].vehicle_id == 9

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3000), st.sampled_from([6, 7])), min_size=12, max_size=12),
           st.integers(0, 3000))
    def test_matches_sort_oracle(self, vehicles, cx):
        # positions on a 0.1 m lattice keep gap comparisons exact
        g = SceneGeometry()
        cx = cx / 10
        others = [(k + 1, x / 10, ln) for k, (x, ln) in enumerate(vehicles)]
        central, index = snapshot(cx, others)
        nb = find_neighbors(central, index, 0, g)
        expect = oracle(cx, others, g)
        for role in NeighborRole:
            assert nb[role].vehicle_id == expect.get(role)
            assert nb[role].real == (role in expect)
            assert nb[role].vehicle_id != 0
        # nobody in the adjacent lane sits strictly between l1 and the central vehicle
        adj = [x for _, x, ln in others if ln == 6]
        if nb[R.L1].real:
            assert not any(cx <= x < nb[R.L1].state.x for x in adj if x != nb[R.L1].state.x)
        if nb[R.F1].real:
            assert not any(nb[R.F1].state.x < x < cx for x in adj)


class TestVirtualVehicles:
    def test_missing_leader_at_ramp_end(self, geometry):
        s = place_virtual_vehicle(R.L, geometry)
        assert (s.x, s.v, s.a) == (230.0, 0.0, 0.0)

    def test_missing_l2(self, geometry):
        s = place_virtual_vehicle(R.L2, geometry)
        assert s.x == 500.0 and (s.v, s.u, s.a, s.e) == (0, 0, 0, 0)

    def test_missing_f1(self, geometry):
        s = place_virtual_vehicle(R.F1, geometry)
        assert s.x == -500.0 and s.y == geometry.y_tar


class TestLaneChange:
    def test_no_change(self, geometry):
        assert detect_lane_change(make_track(1, np.arange(50.0), 7), geometry) is None

    def test_first_flip(self, geometry):
        lanes = np.full(60, 7)
        lanes[30:] = 6
        assert detect_lane_change(make_track(1, np.arange(60.0), lanes), geometry) == pytest.approx(6.0)

    def test_reversal_keeps_first_crossing(self, geometry):
        lanes = np.full(60, 7)
        lanes[30:40] = 6
        assert detect_lane_change(make_track(1, np.arange(60.0), lanes), geometry) == pytest.approx(6.0)


class TestExtractScenes:
    def test_exact_length_track_gives_one_window(self, geometry):
        tr = make_track(3, 10.0 * 0.2 * np.arange(96), 7)
        scenes, skipped = extract_scenes([tr], geometry, 19.0, 2, 0)
        assert len(scenes) == 1 and skipped == 0
        assert len(scenes[0].central) == 96
        assert scenes[0].scene_id == "3@0"

    def test_short_track_skipped(self, geometry):
        scenes, skipped = extract_scenes([make_track(3, np.arange(50.0), 7)], geometry)
        assert scenes == [] and skipped == 1

    def test_only_ramp_vehicles(self, synthetic_window, geometry):
        _, tracks, _ = synthetic_window
        scenes, _ = extract_scenes(tracks, geometry, rng_seed=1)
        ramp = {t.vehicle_id for t in tracks if t.lane_ids[0] == geometry.ramp_lane}
        assert scenes and {s.central.vehicle_id for s in scenes} <= ramp
        assert len(scenes) <= 2 * len(ramp)

    def test_deterministic(self, synthetic_window, geometry):
        _, tracks, _ = synthetic_window
        a, _ = extract_scenes(tracks, geometry, rng_seed=7)
        b, _ = extract_scenes(tracks, geometry, rng_seed=7)
        assert [s.to_record() for s in a] == [s.to_record() for s in b]

    def test_flags_and_self_exclusion(self, synthetic_window, geometry):
        _, tracks, _ = synthetic_window
        for sc in extract_scenes(tracks, geometry, rng_seed=2)[0]:
            for role, nb in sc.neighbors.items():
                assert nb.vehicle_id != sc.central.vehicle_id
                if not nb.real:
                    assert nb.vehicle_id is None and not nb.present.any()
                    assert nb.track.x[0] in (geometry.x_end, 500.0, -500.0)

    def test_archive_round_trip(self, synthetic_window, geometry, tmp_path):
        _, tracks, _ = synthetic_window
        scenes, _ = extract_scenes(tracks, geometry, rng_seed=3)
        path = tmp_path / "scenes.jsonl"
        write_scene_archive(scenes, path)
        back = read_scene_archive(path, TrackIndex(tracks))
        assert [s.to_record() for s in back] == [s.to_record() for s in scenes]
        for a, b in zip(scenes, back):
            for role in NeighborRole:
                np.testing.assert_array_equal(a.neighbors[role].track.x, b.neighbors[role].track.x)
