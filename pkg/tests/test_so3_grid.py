import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbpose.errors import DomainError
from rbpose.so3_grid import (
    FULL_GRID,
    REDUCED_GRID,
    EulerAngles,
    GridKernel,
    RotationDistribution,
    axis_angle_quaternion,
    bin_center,
    convolve_distribution,
    convolve_rows,
    euler_to_quaternion,
    gaussian_kernel,
    geodesic_distance,
    grid_euler,
    grid_index,
    grid_indices,
    quat_canonical,
    quat_multiply,
    quat_to_matrix,
    quaternion_to_euler,
    quaternion_weighted_average,
    quaternions_to_euler,
)

unit_quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 0.1
).map(lambda v: quat_canonical(np.array(v)))


def _same_rotation(a, b, tol=1e-9):
    return abs(float(np.dot(a, b))) > 1.0 - tol


def _rot(axis, deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# ---------------------------------------------------------------- indexing


def test_grid_cardinality_and_layout():
    assert FULL_GRID.total == 191_808
    eu = grid_euler(FULL_GRID)
    assert np.array_equal(np.unique(eu[:, 0]), np.arange(0, 360, 5))
    assert np.array_equal(np.unique(eu[:, 1]), np.arange(-90, 91, 5))
    assert np.array_equal(np.unique(eu[:, 2]), np.arange(0, 360, 5))


def test_index_examples():
    assert grid_index(EulerAngles(0, -90, 0)) == 0
    assert grid_index(EulerAngles(355, 90, 355)) == 191_807
    assert bin_center(0) == EulerAngles(0, -90, 0)
    assert bin_center(191_807) == EulerAngles(355, 90, 355)
    assert bin_center(72) == EulerAngles(0, -85, 0)


def test_nearest_bin_matches_scan():
    eu = grid_euler(FULL_GRID)
    for probe in [(2.4, -88, 0), (357.6, 12.4, 181.0), (123.0, 44.9, 2.6)]:
        da = (eu[:, 0] - probe[0] + 180) % 360 - 180
        di = (eu[:, 2] - probe[2] + 180) % 360 - 180
        scan = int(np.argmin(da**2 + (eu[:, 1] - probe[1]) ** 2 + di**2))
        assert grid_index(EulerAngles(*probe)) == scan
    assert grid_index(EulerAngles(2.4, -88, 0)) == 0


def test_index_center_inverse_on_every_bin():
    idx = grid_indices(grid_euler(FULL_GRID))
    assert np.array_equal(idx, np.arange(FULL_GRID.total))


def test_out_of_range_errors():
    with pytest.raises(DomainError):
        EulerAngles(0, 91, 0)
    with pytest.raises(DomainError):
        grid_indices(np.array([0.0, -90.5, 0.0]))
    with pytest.raises(DomainError):
        bin_center(FULL_GRID.total)
    with pytest.raises(DomainError):
        bin_center(-1)


# ---------------------------------------------------------------- rotations


def test_euler_convention_matches_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(20):
        az, el, ip = rng.uniform(0, 360), rng.uniform(-89, 89), rng.uniform(0, 360)
        expected = _rot("z", ip) @ _rot("x", el) @ _rot("y", az)
        assert np.allclose(quat_to_matrix(euler_to_quaternion(np.array([az, el, ip]))), expected, atol=1e-12)


def test_euler_examples():
    assert np.allclose(euler_to_quaternion(EulerAngles(0, 0, 0)), [1, 0, 0, 0])
    q = euler_to_quaternion(EulerAngles(180, 0, 0))
    assert np.allclose(np.abs(q), [0, 0, 1, 0], atol=1e-12)


def test_quaternion_norm_on_random_angles():
    rng = np.random.default_rng(1)
    e = np.column_stack([rng.uniform(0, 360, 10_000), rng.uniform(-90, 90, 10_000), rng.uniform(0, 360, 10_000)])
    q = euler_to_quaternion(e)
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    assert np.all(q[:, 0] >= 0)


@given(st.floats(0, 359.99), st.floats(-89.5, 89.5), st.floats(0, 359.99))
def test_euler_round_trip(az, el, ip):
    back = quaternion_to_euler(euler_to_quaternion(np.array([az, el, ip]))).as_array()
    diff = (back - np.array([az, el, ip]) + 180) % 360 - 180
    assert np.all(np.abs(diff) < 1e-6)


def test_gimbal_lock_keeps_rotation():
    e = np.array([[40.0, 90.0, 10.0], [300.0, -90.0, 20.0]])
    q = euler_to_quaternion(e)
    back = euler_to_quaternion(quaternions_to_euler(q))
    assert np.all(geodesic_distance(q, back) < 1e-6)


def test_geodesic_examples():
    q = euler_to_quaternion(np.array([10.0, 20.0, 30.0]))
    assert geodesic_distance(q, q) == pytest.approx(0.0, abs=1e-6)
    assert geodesic_distance(q, -q) == pytest.approx(0.0, abs=1e-6)
    assert geodesic_distance([1, 0, 0, 0], axis_angle_quaternion([0, 0, 1], 90)) == pytest.approx(90.0)


@given(unit_quats, unit_quats, unit_quats)
def test_geodesic_metric_properties(a, b, c):
    ab, ba = geodesic_distance(a, b), geodesic_distance(b, a)
    assert ab == pytest.approx(ba)
    assert 0 <= ab <= 180
    assert geodesic_distance(a, c) <= ab + geodesic_distance(b, c) + 1e-6


def test_geodesic_triangle_on_random_triples():
    rng = np.random.default_rng(2)
    q = quat_canonical(rng.standard_normal((3, 1000, 4)))
    d_ac = geodesic_distance(q[0], q[2])
    assert np.all(d_ac <= geodesic_distance(q[0], q[1]) + geodesic_distance(q[1], q[2]) + 1e-6)


# ---------------------------------------------------------------- averaging


def test_weighted_average_examples():
    q = euler_to_quaternion(np.array([30.0, 10.0, 200.0]))
    assert _same_rotation(quaternion_weighted_average(q[None], [1.0]), q)
    assert _same_rotation(quaternion_weighted_average(np.stack([q, -q]), [1.0, 1.0]), q)
    with pytest.raises(DomainError):
        quaternion_weighted_average(q[None], [0.0])


def test_weighted_average_matches_sampled_maximiser():
    rng = np.random.default_rng(3)
    qs = quat_canonical(rng.standard_normal((3, 4)))
    ws = rng.uniform(0.1, 1.0, 3)
    avg = quaternion_weighted_average(qs, ws)
    samples = quat_canonical(rng.standard_normal((1_000_000, 4)))
    score = ((samples @ qs.T) ** 2) @ ws
    best = samples[np.argmax(score)]
    # the sampled maximiser can never beat the analytic one
    assert ((avg @ qs.T) ** 2) @ ws >= score.max() - 1e-12
    assert geodesic_distance(avg, best) < 4.0


@given(st.floats(0.01, 100.0))
def test_weighted_average_scale_invariant(scale):
    rng = np.random.default_rng(4)
    qs = quat_canonical(rng.standard_normal((5, 4)))
    ws = rng.uniform(0, 1, 5)
    assert _same_rotation(quaternion_weighted_average(qs, ws), quaternion_weighted_average(qs, ws * scale))


# ---------------------------------------------------------------- kernels


def test_gaussian_kernel_examples():
    k = gaussian_kernel((5, 5, 5), 3.0)
    assert k.half_widths == (3, 3, 3)
    assert k.weights.sum() == pytest.approx(1.0)
    assert gaussian_kernel(1e-3).half_widths == (0, 0, 0)
    k = gaussian_kernel((10, 5, 10), 3.0)
    central = []
    for sig in (10, 5, 10):
        h = math.ceil(3 * sig / 5)
        w = [math.exp(-0.5 * (j * 5 / sig) ** 2) for j in range(-h, h + 1)]
        central.append(1.0 / sum(w))
    assert k.weights[6, 3, 6] == pytest.approx(np.prod(central), rel=1e-12)
    with pytest.raises(DomainError):
        gaussian_kernel((5, 0, 5))


def _brute_force_convolution(values, kernel, grid):
    na, ne, ni = grid.shape
    ha, he, hi = kernel.half_widths
    w = kernel.weights
    out = np.zeros_like(values)
    for a, e, i in itertools.product(range(na), range(ne), range(ni)):
        acc = 0.0
        for da, de, di in itertools.product(range(-ha, ha + 1), range(-he, he + 1), range(-hi, hi + 1)):
            src_e = e - de
            if 0 <= src_e < ne:
                acc += w[da + ha, de + he, di + hi] * values[(a - da) % na, src_e, (i - di) % ni]
        out[a, e, i] = acc
    return out * (values.sum() / out.sum())


def test_convolution_matches_brute_force_on_reduced_grid():
    rng = np.random.default_rng(5)
    g = REDUCED_GRID
    v = rng.random(g.shape)
    v /= v.sum()
    k = gaussian_kernel((40.0, 25.0, 55.0), 3.0, g)
    assert min(k.half_widths) >= 2
    got = convolve_distribution(RotationDistribution(v, g), k).values
    assert np.max(np.abs(got - _brute_force_convolution(v, k, g))) < 1e-10


def test_convolution_delta_cases():
    g = REDUCED_GRID
    rng = np.random.default_rng(6)
    d = RotationDistribution(rng.random(g.shape), g).normalized()
    assert np.array_equal(convolve_distribution(d, GridKernel.delta()).values, d.values)
    # a delta at a wrapped corner spreads as the kernel, rolled onto it
    b = (0 * g.n_elevation + 3) * g.n_inplane + 11
    k = gaussian_kernel((30.0, 30.0, 30.0), 2.0, g)
    out = convolve_distribution(RotationDistribution.delta(b, g), k).values
    expected = np.zeros(g.shape)
    ha, he, hi = k.half_widths
    for da, de, di in itertools.product(range(-ha, ha + 1), range(-he, he + 1), range(-hi, hi + 1)):
        expected[da % g.n_azimuth, 3 + de, (11 + di) % g.n_inplane] += k.weights[da + ha, de + he, di + hi]
    assert np.allclose(out, expected / expected.sum(), atol=1e-14)


def test_kernel_wider_than_axis_rejected():
    with pytest.raises(DomainError):
        convolve_rows(np.ones((1, REDUCED_GRID.total)), gaussian_kernel((5, 90, 5), 3.0, REDUCED_GRID), REDUCED_GRID)


@given(st.integers(0, 2**32 - 1), st.floats(5.0, 60.0))
def test_convolution_keeps_mass_and_sign(seed, sigma):
    g = REDUCED_GRID
    rng = np.random.default_rng(seed)
    v = rng.random((3, g.total)) * (rng.random((3, g.total)) < 0.3)
    v[:, 0] += 1.0
    k = gaussian_kernel((sigma, min(sigma, 40.0), sigma), 3.0, g)
    out = convolve_rows(v, k, g)
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), v.sum(axis=1), rtol=1e-9)


def test_cyclic_axes_preserve_mass_before_rescale():
    # with no elevation spread nothing leaves the grid, so mass is exact anyway
    g = REDUCED_GRID
    rng = np.random.default_rng(7)
    v = rng.random(g.shape)
    k = GridKernel(np.array([1.0, 2.0, 1.0]), np.ones(1), np.array([1.0, 3.0, 1.0]))
    out = convolve_distribution(RotationDistribution(v, g), k).values
    raw = np.zeros_like(v)
    for da, wa in zip((-1, 0, 1), k.azimuth):
        for di, wi in zip((-1, 0, 1), k.inplane):
            raw += wa * wi * np.roll(np.roll(v, da, axis=0), di, axis=2)
    assert raw.sum() == pytest.approx(v.sum(), rel=1e-12)
    assert np.allclose(out, raw, atol=1e-14)


def test_quat_multiply_composes_matrices():
    rng = np.random.default_rng(8)
    a, b = quat_canonical(rng.standard_normal((2, 4)))
    assert np.allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b))
