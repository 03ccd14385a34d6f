import numpy as np
import pytest

from _synth import clutter_scenario, projected_grid
from eventcalib.camera import Intrinsics
from eventcalib.grid import (
    Candidate,
    DetectionFailure,
    SelectionParams,
    detect_grid,
    exhaustive_select_grid,
    joint_spread,
    nearest_linkages,
    order_grid_points,
    select_grid,
    write_candidates_csv,
)
from eventcalib.pattern import PatternSpec, pattern_object_points
from eventcalib.simulator import look_at_pose

INTR = Intrinsics(350.0, 352.0, 160.0, 120.0)


def _cands(points, radius=5.0):
    return [Candidate(tuple(map(float, p)), radius) for p in points]


class TestLinkages:
    def test_two_candidates(self):
        D = nearest_linkages(_cands([[0, 0], [3, 4]]))
        np.testing.assert_allclose(D, [25, 25])

    def test_three_collinear(self):
        D = nearest_linkages(_cands([[0, 0], [3, 0], [10, 0]]))
        np.testing.assert_allclose(D, [9, 9, 49])

    def test_matches_pairwise_scan(self, rng):
        pts = rng.uniform(0, 300, (40, 2))
        D = nearest_linkages(_cands(pts))
        ref = [min((pts[i] - pts[j]) @ (pts[i] - pts[j]) for j in range(40) if j != i) for i in range(40)]
        np.testing.assert_allclose(D, ref, rtol=1e-12)

    def test_single_candidate_fails(self):
        with pytest.raises(DetectionFailure) as err:
            nearest_linkages(_cands([[1, 1]]))
        assert err.value.stage == "selection"


class TestSelect:
    def test_no_clutter_selects_everything(self):
        spec = PatternSpec(4, 5, 24.0)
        pts = projected_grid(spec, look_at_pose(spec, 300, 0.2, 0.1, 0), INTR)
        assert select_grid(_cands(pts), spec.M).indices == tuple(range(spec.M))

    def test_far_outliers_with_other_radii_are_dropped(self, rng):
        spec = PatternSpec(3, 5, 24.0)
        pts = projected_grid(spec, look_at_pose(spec, 300, 0.1, -0.1, 0.1), INTR)
        cands = _cands(pts) + [Candidate((10.0, 10.0), 11.0), Candidate((330.0, 20.0), 2.0), Candidate((300.0, 240.0), 8.0)]
        sel = select_grid(cands, spec.M)
        assert sel.indices == tuple(range(spec.M))
        assert sel.indices == exhaustive_select_grid(cands, spec.M)[0]

    def test_distant_outlier_with_matching_radius_is_dropped(self):
        spec = PatternSpec(3, 5, 24.0)
        pts = projected_grid(spec, look_at_pose(spec, 300, 0.0, 0.0, 0.0), INTR)
        step = np.sqrt(nearest_linkages(_cands(pts)).min())
        far = pts.max(axis=0) + [10 * step, 0]
        cands = _cands(pts) + [Candidate(tuple(far), 5.0)]
        sel = select_grid(cands, spec.M)
        assert spec.M not in sel.indices
        assert sel.indices == exhaustive_select_grid(cands, spec.M)[0]

    def test_input_order_invariance(self, rng):
        spec = PatternSpec(3, 5, 24.0)
        cands, _ = clutter_scenario(rng, spec, INTR, 4)
        base = select_grid(cands, spec.M)
        for _ in range(5):
            perm = rng.permutation(len(cands))
            sel = select_grid([cands[i] for i in perm], spec.M)
            assert tuple(sorted(int(perm[i]) for i in sel.indices)) == base.indices

    def test_phi_rigid_invariance(self, rng):
        c = rng.uniform(0, 300, (12, 2))
        r = rng.uniform(3, 6, 12)
        sub = (0, 2, 3, 5, 7, 8, 11)
        th = 0.7
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        moved = c @ R.T + [40.0, -25.0]
        assert joint_spread(moved, r, sub) == pytest.approx(joint_spread(c, r, sub), rel=1e-10)

    def test_too_few_candidates(self):
        with pytest.raises(DetectionFailure):
            select_grid(_cands(np.arange(10).reshape(5, 2)), 6)

    def test_surplus_guard_rejects_window(self, rng):
        spec = PatternSpec(4, 11, 24.0)
        cands, _ = clutter_scenario(rng, spec, INTR, 20, radius_px=(4.8, 5.2))
        with pytest.raises(DetectionFailure) as err:
            select_grid(cands, spec.M, SelectionParams(delta_max=8))
        assert "surplus" in str(err.value)

    def test_radius_prefilter_applies_beyond_budget(self, rng):
        spec = PatternSpec(4, 11, 24.0)
        cands, grid_idx = clutter_scenario(rng, spec, INTR, 15, radius_px=(9.0, 14.0))
        sel = select_grid(cands, spec.M)
        assert sel.indices == grid_idx
        assert len(sel.pruned) == 15

    def test_subset_local_and_global_linkages_agree_without_clutter(self):
        spec = PatternSpec(4, 11, 24.0)
        pts = projected_grid(spec, look_at_pose(spec, 320, 0.3, -0.2, 0.1), INTR)
        r = np.full(spec.M, 5.0)
        full = tuple(range(spec.M))
        global_D = nearest_linkages(_cands(pts))
        assert joint_spread(pts, r, full) == pytest.approx(np.std(global_D), rel=1e-12)


class TestOrdering:
    def test_fronto_parallel_identity(self, spec_4x11):
        pts = projected_grid(spec_4x11, look_at_pose(spec_4x11, 300, 0, 0, 0), INTR)
        det = order_grid_points(pts, spec_4x11)
        np.testing.assert_array_equal(det.points, pts)
        assert det.candidate_index == tuple(range(spec_4x11.M))

    def test_tilted_homography_after_shuffle(self, rng, spec_4x11):
        pose = look_at_pose(spec_4x11, 320, np.radians(30), 0.0, 0.2)
        pts = projected_grid(spec_4x11, pose, INTR)
        perm = rng.permutation(spec_4x11.M)
        det = order_grid_points(pts[perm], spec_4x11)
        np.testing.assert_allclose(det.points, pts)

    def test_180_degree_rotation_resolved(self, spec_4x11):
        pose = look_at_pose(spec_4x11, 300, 0.1, 0.1, np.pi)
        pts = projected_grid(spec_4x11, pose, INTR)
        det = order_grid_points(pts[::-1], spec_4x11)
        np.testing.assert_allclose(det.points, pts)

    def test_various_rolls(self, rng, spec_4x11):
        for roll in np.linspace(-np.pi, np.pi, 13):
            pose = look_at_pose(spec_4x11, 330, rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), roll)
            pts = projected_grid(spec_4x11, pose, Intrinsics(300, 300, 320, 240))
            det = order_grid_points(pts[rng.permutation(44)], spec_4x11)
            np.testing.assert_allclose(det.points, pts)

    def test_non_lattice_rejected(self, rng, spec_4x11):
        with pytest.raises(DetectionFailure) as err:
            order_grid_points(rng.uniform(0, 300, (44, 2)), spec_4x11)
        assert err.value.stage == "ordering"

    def test_wrong_count(self, spec_4x11):
        with pytest.raises(DetectionFailure):
            order_grid_points(np.zeros((10, 2)), spec_4x11)

    def test_object_point_order_used(self, spec_4x11):
        # identity camera on the pattern plane: ordered points are the object points themselves
        obj = pattern_object_points(spec_4x11)[:, :2]
        det = order_grid_points(obj, spec_4x11)
        np.testing.assert_allclose(det.points, obj)


def test_detect_grid_with_clutter(rng, spec_4x11):
    pose = look_at_pose(spec_4x11, 310, 0.2, -0.3, 0.4)
    cands, grid_idx = clutter_scenario(rng, spec_4x11, INTR, 3, pose=pose)
    det = detect_grid(cands, spec_4x11, window_t_ref=1234)
    assert det.window_t_ref == 1234
    assert sorted(det.candidate_index) == list(grid_idx)
    truth = projected_grid(spec_4x11, pose, INTR)
    assert np.abs(det.points - truth).max() < 1.5


def test_candidates_csv(tmp_path, rng, spec_4x11):
    cands, grid_idx = clutter_scenario(rng, spec_4x11, INTR, 2)
    path = tmp_path / "cands.csv"
    write_candidates_csv(path, cands, grid_idx, window=3)
    rows = path.read_text().splitlines()
    assert rows[0].split(",") == ["window", "candidate", "cluster_id", "u", "v", "radius", "selected"]
    assert len(rows) == 1 + len(cands)
    assert sum(int(r.split(",")[-1]) for r in rows[1:]) == spec_4x11.M


def test_candidate_radius_positive():
    with pytest.raises(ValueError):
        Candidate((0.0, 0.0), 0.0)


def _misselected_scene(rng):
    """A tilted grid plus one clutter candidate that MHC prefers over a true circle."""
    spec = PatternSpec(3, 5, 24.0)
    pts = projected_grid(spec, look_at_pose(spec, 250, 0.6, 0.0, 0.0), INTR)
    base = _cands(pts)
    step = np.sqrt(np.median(nearest_linkages(base)))
    for _ in range(5000):
        q = pts[rng.integers(spec.M)] + rng.uniform(-1.2, 1.2, 2) * step
        cands = base + [Candidate(tuple(q), 5.0)]
        if spec.M in select_grid(cands, spec.M).indices:
            return spec, pts, cands
    raise AssertionError("no misleading clutter position found")


def test_swap_repair_recovers_lattice(rng):
    spec, pts, cands = _misselected_scene(rng)
    det = detect_grid(cands, spec)
    assert spec.M not in det.candidate_index
    np.testing.assert_allclose(np.sort(det.points, axis=0), np.sort(pts, axis=0))
    with pytest.raises(DetectionFailure):
        detect_grid(cands, spec, params=SelectionParams(repair_swaps=0))
