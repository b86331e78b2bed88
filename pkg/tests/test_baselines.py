import math

import numpy as np
import pytest
from scipy import stats

from relmm import baselines as B
from relmm import evaluation as E
from relmm import world as W


def blank():
    return np.zeros((W.N_CHANNELS, 32, 32), np.float32)


def with_blobs(*centres):
    o = blank()
    for r, c in centres:
        o[W.CH_OBJECTS, r - 1:r + 2, c - 1:c + 2] = 1.0
    return o


def fixed(points):
    """Projector that ignores pixels and returns the given robot-frame points."""
    return lambda uvs: np.asarray(points, dtype=float).reshape(-1, 2)[:len(uvs)]


def test_centroids_empty_single_and_two():
    assert B.detect_centroids(blank()) == []
    # block centred at row 12, column 10 -> (u, v) = (10, 12)
    assert B.detect_centroids(with_blobs((12, 10))) == [(10.0, 12.0)]
    found = B.detect_centroids(with_blobs((5, 5), (20, 25)))
    assert len(found) == 2
    boxes = [((4, 6), (4, 6)), ((24, 26), (19, 21))]
    for (u, v) in found:
        assert any(u0 <= u <= u1 and v0 <= v <= v1 for (u0, u1), (v0, v1) in boxes)


def test_diagonal_neighbours_are_one_blob():
    o = blank()
    o[W.CH_OBJECTS, 3, 3] = o[W.CH_OBJECTS, 4, 4] = 1.0
    assert B.detect_centroids(o) == [(3.5, 3.5)]


def test_nav_toward_examples():
    np.testing.assert_array_equal(B.nav_toward(0.2, 0.0), [1.0, 0.0])
    a = B.nav_toward(0.05, 0.05)
    assert a[0] == pytest.approx(math.hypot(0.05, 0.05) / 0.1 * 2 - 1, abs=1e-12)
    assert a[0] == pytest.approx(0.41421356, abs=1e-6) and a[1] == 1.0


def test_scripted_nav_goes_to_closest_or_wanders():
    rng = np.random.default_rng(0)
    a = B.scripted_nav(with_blobs((5, 5), (9, 9)), fixed([[0.2, 0.0], [0.6, 0.3]]), rng)
    np.testing.assert_array_equal(a, [1.0, 0.0])
    draws = np.array([B.scripted_nav(blank(), fixed([]), rng) for _ in range(2000)])
    assert draws.min() >= -1 and draws.max() <= 1 and abs(draws.mean()) < 0.05


def test_scripted_actions_stay_in_range_on_rendered_rooms():
    pol = B.ScriptedPolicy()
    rng = np.random.default_rng(1)
    region = W.DEFAULT_SIM.region
    for k in range(20):
        state = W.scatter_objects(W.RoomSpec(), k)
        o = W.render_nav_obs(state)
        a = pol.nav_action(o, rng)
        assert np.all(np.abs(a) <= 1.0)
        cell = pol.grasp_action(o, rng)
        assert cell is None or 0 <= cell < region.n_actions


def test_scripted_grasp_cells():
    o1 = with_blobs((5, 5))
    assert B.scripted_grasp(o1, fixed([[0.35, 0.0]])) == W.GRASP_REGION.flatten(4, 7)
    assert B.scripted_grasp(o1, fixed([[0.6, 0.0]])) is None
    o2 = with_blobs((5, 5), (20, 20))
    near, far = [0.32, 0.05], [0.45, -0.07]
    assert B.scripted_grasp(o2, fixed([far, near])) == W.GRASP_REGION.cell_of(*near)


def test_scripted_with_exact_projection_grasps_object_in_region():
    state = W.single_object_world(3)
    cell = B.scripted_grasp(W.render_nav_obs(state), B.exact_projector())
    assert cell is not None
    _, r = W.attempt_grasp(state, cell)
    assert r == 1


def test_quadratic_fit_exact_on_synthetic_data():
    rng = np.random.default_rng(0)
    uv = rng.uniform(0, 100, (12, 2))
    coef = rng.standard_normal((6, 2))
    robot = B.poly2_features(uv) @ coef
    fit = B.fit_pixel_to_world(B.CalibrationSet(uv, robot))
    assert np.max(np.abs(B.pixel_to_world(fit, uv) - robot)) < 1e-9


def test_fit_errors():
    with pytest.raises(B.CalibrationError):
        B.fit_pixel_to_world(B.CalibrationSet(np.ones((5, 2)), np.ones((5, 2))))
    line = np.stack([np.arange(8.0), np.arange(8.0)], axis=1)  # u == v
    with pytest.raises(B.CalibrationError):
        B.fit_pixel_to_world(B.CalibrationSet(line, np.zeros((8, 2))))


def test_paper_calibration_centre_point():
    coef = B.fit_pixel_to_world(B.PAPER_CALIBRATION)
    x, y = B.pixel_to_world(coef, [56, 70])[0]
    assert abs(x - 0.38) <= 0.02 and abs(y - 0.0) <= 0.02


def test_sim_calibration_is_accurate_near_the_region():
    project = B.calibrated_projector()
    exact = B.exact_projector()
    state = W.single_object_world(5)
    uv = B.detect_centroids(W.render_nav_obs(state))
    assert np.max(np.abs(project(uv) - exact(uv))) < 0.02


def test_rand_all_is_uniform():
    pol = B.RandAllPolicy()
    rng = np.random.default_rng(0)
    nav = np.array([pol.nav_action(None, rng) for _ in range(100_000)])
    assert nav.min() >= -1 and nav.max() <= 1
    assert np.all(np.abs(nav.mean(axis=0)) <= 0.01)
    cells = np.array([pol.grasp_action(None, rng) for _ in range(100_000)])
    counts = np.bincount(cells, minlength=225)
    assert len(counts) == 225
    assert stats.chisquare(counts).pvalue > 0.001


class Silent:
    """Ensemble stand-in whose optimistic values are all about zero."""

    def grasp_prob(self, o):
        return 1e-4

    def sample_action(self, o, rng, greedy=False):
        return 0

    def execute(self, state, a):
        return W.attempt_grasp(state, a)


def test_rand_nav_gate_rarely_fires_with_flat_model():
    report = E.evaluate(B.RandNavPolicy(Silent()), horizon=500, seed=0)
    assert report.grasp_attempts / 500 < 0.01


def test_rand_nav_requires_model():
    with pytest.raises(W.ConfigurationError):
        B.RandNavPolicy(None)
