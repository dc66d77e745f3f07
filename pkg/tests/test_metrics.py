import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbpose.errors import DomainError
from rbpose.metrics import (
    add_metric,
    adds_metric,
    auc_threshold,
    coverage_distances,
    find_modes,
    gaussian_baseline,
    marginals,
    rotation_coverage,
    transform,
)
from rbpose.so3_grid import (
    FULL_GRID,
    REDUCED_GRID,
    axis_angle_quaternion,
    euler_to_quaternion,
    geodesic_distance,
    grid_euler,
    grid_quaternions,
    quat_canonical,
    quat_multiply,
    quat_to_matrix,
)

I = np.array([1.0, 0, 0, 0])
seeds = st.integers(0, 2**32 - 1)


def _random_pose(rng):
    return quat_canonical(rng.standard_normal(4)), rng.normal(0, 0.2, 3)


def test_add_examples(rng):
    pts = rng.standard_normal((50, 3))
    pose = _random_pose(rng)
    assert add_metric(pose, pose, pts) == 0.0
    d = np.array([0.03, -0.04, 0.12])
    assert add_metric((pose[0], pose[1] + d), pose, pts) == pytest.approx(np.linalg.norm(d), rel=1e-12)
    ang = np.linspace(0, 2 * np.pi, 36, endpoint=False)
    circle = np.column_stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)])
    rz = axis_angle_quaternion([0, 0, 1], 90.0)
    assert add_metric((rz, np.zeros(3)), (I, np.zeros(3)), circle) == pytest.approx(math.sqrt(2), rel=1e-12)
    with pytest.raises(DomainError):
        add_metric(pose, pose, np.zeros((0, 3)))


def test_adds_matches_nearest_neighbour_loop(rng):
    pts = rng.standard_normal((60, 3))
    est, gt = _random_pose(rng), _random_pose(rng)
    pe, pg = transform(est, pts), transform(gt, pts)
    oracle = np.mean([min(np.linalg.norm(g - e) for e in pe) for g in pg])
    assert adds_metric(est, gt, pts, chunk=7) == pytest.approx(oracle, rel=1e-9)
    assert adds_metric(gt, gt, pts) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(DomainError):
        adds_metric(gt, gt, np.zeros((0, 3)))


def test_adds_zero_for_symmetric_points(rng):
    half = rng.standard_normal((40, 3))
    pts = np.vstack([half, half * np.array([-1, -1, 1])])  # 2-fold about z
    rz = axis_angle_quaternion([0, 0, 1], 180.0)
    t = np.array([0.1, 0, 1])
    assert adds_metric((rz, t), (I, t), pts) == pytest.approx(0.0, abs=1e-7)
    assert add_metric((rz, t), (I, t), pts) > 0.1


@given(seeds)
def test_metrics_invariant_to_common_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((30, 3))
    est, gt = _random_pose(rng), _random_pose(rng)
    q, t = _random_pose(rng)
    r = quat_to_matrix(q)

    def moved(p):
        return quat_multiply(q, p[0]), r @ p[1] + t

    a, s = add_metric(est, gt, pts), adds_metric(est, gt, pts)
    assert add_metric(moved(est), moved(gt), pts) == pytest.approx(a, rel=1e-9, abs=1e-12)
    assert adds_metric(moved(est), moved(gt), pts) == pytest.approx(s, rel=1e-6, abs=1e-7)
    assert s <= a + 1e-9


def test_auc_examples():
    assert auc_threshold(np.zeros(10)).area == 1.0
    assert auc_threshold(np.full(10, 0.2)).area == 0.0
    assert auc_threshold(np.r_[np.zeros(5), np.full(5, 0.5)]).area == 0.5
    c = auc_threshold([0.05], max_threshold=0.1, n_steps=10)
    assert c.recall.tolist() == [0.0] * 5 + [1.0] * 5
    with pytest.raises(DomainError):
        auc_threshold([])
    with pytest.raises(DomainError):
        auc_threshold([0.1], max_threshold=0.0)


@given(st.lists(st.floats(0, 0.2), min_size=1, max_size=30), st.floats(0, 0.05))
def test_auc_monotone_under_increase(values, bump):
    v = np.array(values)
    assert auc_threshold(v + bump).area <= auc_threshold(v).area


# ---------------------------------------------------------------- coverage


def test_coverage_examples():
    g = FULL_GRID
    b = 54_321
    d = np.zeros(g.total)
    d[b] = 0.9
    d[b + 1] = 0.1
    gt = grid_quaternions(g)[b]
    c = rotation_coverage([d], [gt], angle_thresholds=(0.0,))
    assert np.all(c.hit_rates == 1.0)
    u = np.full(g.total, 1.0 / g.total)
    assert rotation_coverage([u], [gt], percentiles=(1,), angle_thresholds=(180.0,)).hit_rates[0, 0] == 1.0
    anti = quat_multiply(axis_angle_quaternion([1, 0, 0], 180.0), gt)
    k = int(np.argmin(geodesic_distance(grid_quaternions(g), anti)))
    delta = np.zeros(g.total)
    delta[k] = 1.0
    assert rotation_coverage([delta], [gt], percentiles=(1,), angle_thresholds=(20.0,)).hit_rates[0, 0] == 0.0


def test_coverage_rank_uses_bin_count_and_skips_zero_bins():
    g = REDUCED_GRID
    d = np.zeros(g.total)
    d[[10, 20, 30]] = [0.5, 0.3, 0.2]
    gt = grid_quaternions(g)[30]
    dist = coverage_distances(d, gt, [0.1, 0.2, 0.3, 100], g)
    # ceil(0.1% of 1008) = 2 bins, ceil(0.2%) = 3, ceil(0.3%) = 4 -> capped at 3 positive bins
    assert dist[0] > 0 and dist[1] == pytest.approx(0.0, abs=1e-3)
    assert dist[2] == dist[1] and dist[3] == dist[1]
    # ties resolved by bin index
    t = np.zeros(g.total)
    t[[40, 5]] = 1.0
    got = coverage_distances(t, grid_quaternions(g)[5], [0.05], g)
    assert got[0] == pytest.approx(0.0, abs=1e-3)


@given(seeds)
def test_coverage_monotone(seed):
    g = REDUCED_GRID
    rng = np.random.default_rng(seed)
    dists = rng.random((4, g.total)) ** 8
    gts = quat_canonical(rng.standard_normal((4, 4)))
    c = rotation_coverage(dists, gts, (1, 5, 10, 30, 60, 100), (0.0, 10.0, 20.0, 45.0), g)
    assert np.all(np.diff(c.hit_rates, axis=1) >= 0)
    assert np.all(np.diff(c.hit_rates, axis=0) >= 0)
    assert len(c.rows()) == 6 * 4


def test_gaussian_baseline():
    q = euler_to_quaternion(np.array([100.0, 15.0, 40.0]))
    b = gaussian_baseline(q, 10.0, FULL_GRID)
    assert b.sum() == pytest.approx(1.0)
    assert geodesic_distance(grid_quaternions(FULL_GRID)[np.argmax(b)], q) < 0.01


# ---------------------------------------------------------------- modes


def _bimodal(sep_az=180.0, tail=0.0):
    g = FULL_GRID
    quats = grid_quaternions(g)
    qa = euler_to_quaternion(np.array([30.0, 20.0, 60.0]))
    qb = euler_to_quaternion(np.array([30.0 + sep_az, 20.0, 60.0]))
    d = np.exp(-0.5 * (geodesic_distance(quats, qa) / 6) ** 2) + np.exp(-0.5 * (geodesic_distance(quats, qb) / 6) ** 2)
    return d / d.sum(), qa, qb


def test_two_modes_found():
    d, qa, qb = _bimodal()
    modes = find_modes(d, rel_floor=1e-6)
    assert len(modes) == 2
    q = grid_quaternions(FULL_GRID)[modes]
    assert {int(np.argmin([geodesic_distance(x, qa), geodesic_distance(x, qb)])) for x in q} == {0, 1}
    assert all(min(geodesic_distance(x, qa), geodesic_distance(x, qb)) < 3.0 for x in q)


def test_median_rule_alone_keeps_negligible_pole_ripples():
    # the Euler window is not a geodesic neighbourhood at the poles, so
    # far-tail bins there can be window maxima; only the relative floor drops them
    d, _, _ = _bimodal()
    literal = find_modes(d)
    assert len(literal) > 2
    extra = literal[2:]
    assert np.all(d[extra] < 1e-20 * d.max())
    assert np.all(np.abs(grid_euler(FULL_GRID)[extra, 1]) == 90.0)


def test_isolated_spike_is_a_mode():
    d, _, _ = _bimodal()
    spike = d.copy()
    spike[5 * 2664 + 10 * 72 + 7] = 0.01 * d.max()
    assert len(find_modes(spike, rel_floor=1e-6)) == 3


def test_marginals_sum_to_one(rng):
    m = marginals(rng.random(REDUCED_GRID.total), REDUCED_GRID)
    assert [x.shape for x in m] == [(12,), (7,), (12,)]
    assert all(x.sum() == pytest.approx(1.0) for x in m)
