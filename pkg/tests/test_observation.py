import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rbpose.errors import DomainError
from rbpose.observation import (
    SENTINEL_SCORE,
    Box,
    CameraIntrinsics,
    DepthPatch,
    Frame,
    Roi,
    Sphere,
    depth_discrepancy,
    depth_likelihoods,
    depth_score,
    evaluate_depth,
    project_translation,
    render_depth,
    render_depth_image,
    roi_for_translation,
    rotation_likelihood,
    translation_likelihood,
    visibility_mask,
)
from rbpose.codebook import scores_to_likelihoods
from rbpose.simulator import Occluder, SyntheticEncoder, _occlude
from rbpose.so3_grid import REDUCED_GRID, grid_quaternions

CAM = CameraIntrinsics(500, 500, 320, 240, 640, 480)


def test_projection_examples():
    assert np.allclose(project_translation([0, 0, 1], CAM), [320, 240])
    assert np.allclose(project_translation([0.1, 0, 1], CAM), [370, 240])
    assert np.allclose(project_translation([0.1, 0, 2], CAM), [345, 240])
    with pytest.raises(DomainError):
        project_translation([0, 0, 0], CAM)
    with pytest.raises(DomainError):
        roi_for_translation([0, 0, -1], CAM, 1.0, 128)


def test_roi_size_examples():
    assert roi_for_translation([0, 0, 1.0], CAM, 1.0, 128).size == pytest.approx(128)
    assert roi_for_translation([0, 0, 2.0], CAM, 1.0, 128).size == pytest.approx(64)
    assert roi_for_translation([0, 0, 0.5], CAM, 1.0, 128).size == pytest.approx(256)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.2, 5.0), st.floats(0.01, 1.0))
def test_roi_geometry_properties(x, y, z, dz):
    a = roi_for_translation([x, y, z], CAM, 1.0, 128)
    b = roi_for_translation([x, y, z + dz], CAM, 1.0, 128)
    assert b.size < a.size
    c = roi_for_translation([2 * x, 2 * y, z], CAM, 1.0, 128)
    assert c.center_u - CAM.px == pytest.approx(2 * (a.center_u - CAM.px), abs=1e-9)
    assert c.center_v - CAM.py == pytest.approx(2 * (a.center_v - CAM.py), abs=1e-9)


def test_roi_rejects_non_positive_size():
    with pytest.raises(DomainError):
        Roi(0, 0, 0)


# ---------------------------------------------------------------- colour


def _frame(q, t=(0.0, 0.0, 1.0)):
    return Frame(0, CAM, rotation=q, translation=np.asarray(t, dtype=float))


def test_rotation_likelihood_noiseless(reduced_codebook, box_object):
    j = 5 * 84 + 3 * 12 + 8  # away from the gimbal-locked poles
    q = grid_quaternions(REDUCED_GRID)[j]
    enc = SyntheticEncoder(box_object)
    scores, emb = rotation_likelihood(_frame(q), [0, 0, 1], reduced_codebook, enc)
    assert int(np.argmax(scores)) == j
    assert scores[j] >= 0.99
    # 20% of the RoI size sideways
    off, _ = rotation_likelihood(_frame(q), [0.2 * 128 / 500, 0, 1], reduced_codebook, enc)
    assert off.max() < scores.max()


def test_rotation_likelihood_off_image_is_sentinel(reduced_codebook, box_object):
    enc = SyntheticEncoder(box_object)
    scores, emb = rotation_likelihood(_frame(grid_quaternions(REDUCED_GRID)[0]), [5.0, 0, 1], reduced_codebook, enc)
    assert np.all(scores == SENTINEL_SCORE)
    assert not emb.any()


def test_translation_likelihood_examples(rng):
    assert translation_likelihood(np.zeros(100)) == 0.0
    d = np.zeros(100)
    d[17] = 1.0
    assert translation_likelihood(d) == 1.0
    x = rng.random(REDUCED_GRID.total) * 10.0 ** rng.integers(-8, 8, REDUCED_GRID.total)
    exact = sum((Fraction(float(v)) for v in x), Fraction(0))
    assert translation_likelihood(x) == float(exact)


def test_translation_likelihood_prefers_true_translation(reduced_codebook, box_object):
    enc = SyntheticEncoder(box_object)
    q = grid_quaternions(REDUCED_GRID)[321]
    f = _frame(q)
    shift = 0.25 * 128 / 500
    sums = []
    for t in ([0, 0, 1], [shift, 0, 1], [0, -shift, 1], [0, 0, 1.3]):
        s, _ = rotation_likelihood(f, t, reduced_codebook, enc)
        sums.append(s)
    lik = scores_to_likelihoods(np.stack(sums), 0.05)
    totals = [translation_likelihood(r) for r in lik]
    assert totals[0] > max(totals[1:])


# ---------------------------------------------------------------- depth


def test_render_sphere_front_surface_and_silhouette():
    sphere = Sphere(0.1)
    pose = (np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]))
    patch = render_depth(pose, sphere, CAM, Roi(320, 240, 1.0), raster=1)
    assert patch.values[0, 0] == pytest.approx(0.9, abs=1e-12)
    img = render_depth_image(pose, sphere, CAM)
    row = img[240]
    cols = np.flatnonzero(row > 0) - 320.0
    radius = 500 * 0.1 / math.sqrt(1 - 0.01)
    # pixel centres strictly inside the analytic silhouette are hit, those outside are not
    assert cols.max() <= radius and cols.max() + 1 > radius
    assert -cols.min() <= radius and -cols.min() + 1 > radius


def test_render_behind_camera_is_invalid():
    patch = render_depth((np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -1.0])), Sphere(0.1), CAM, Roi(320, 240, 100))
    assert not patch.valid.any()


def _patch(values):
    return DepthPatch(np.asarray(values, dtype=float), np.ones(np.shape(values), dtype=bool))


def test_visibility_examples():
    r = _patch(np.full((4, 4), 1.0))
    assert visibility_mask(r, _patch(np.full((4, 4), 1.0)), 0.02)[1] == 1.0
    assert visibility_mask(r, _patch(np.full((4, 4), 0.99)), 0.02)[1] == 1.0
    mask, v = visibility_mask(r, _patch(np.full((4, 4), 0.96)), 0.02)
    assert v == 0.0 and not mask.any()
    empty = DepthPatch(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))
    assert visibility_mask(empty, r, 0.02)[1] == 0.0


def test_visibility_half_occluded_box():
    obj = Box((0.12, 0.16, 0.06))
    pose = (np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]))
    depth = render_depth_image(pose, obj, CAM)
    occluded, visible, _ = _occlude(depth, Occluder(0.5, 0.1))
    frame = Frame(0, CAM, depth=occluded)
    roi = roi_for_translation(pose[1], CAM, 1.0, 128).as_array()
    v, delta = evaluate_depth(frame, obj, pose[0][None], pose[1][None], roi[None], 0.02, 0.05)
    assert v[0] == pytest.approx(0.5, abs=0.05)
    assert visible == pytest.approx(0.5, abs=0.02)
    assert delta[0] == pytest.approx(0.0, abs=1e-12)


def test_discrepancy_examples():
    r = _patch(np.full((2, 2), 1.0))
    full = np.ones((2, 2), dtype=bool)
    assert depth_discrepancy(r, _patch(np.full((2, 2), 1.0)), full, 0.05) == 0.0
    assert depth_discrepancy(r, _patch(np.full((2, 2), 1.2)), full, 0.05) == 1.0
    m = _patch([[1.0, 1.0], [1.025, 1.025]])
    assert depth_discrepancy(r, m, full, 0.05) == pytest.approx(0.25)
    assert depth_discrepancy(r, m, np.zeros((2, 2), dtype=bool), 0.05) == 1.0


def test_depth_score_and_likelihood_examples():
    assert depth_score(1.0, 0.0) == 1.0
    assert depth_score(0.0, 0.3) == 0.0
    lik = depth_likelihoods(np.array([1.0, 0.5, 0.9]), np.array([0.1, 0.0, 0.0]), 0.05)
    assert lik[np.argmax(depth_score(np.array([1.0, 0.5, 0.9]), np.array([0.1, 0.0, 0.0])))] == 1.0


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_depth_score_bounded_and_monotone(v, d1, d2):
    s1, s2 = depth_score(v, d1), depth_score(v, d2)
    assert 0.0 <= s1 <= 1.0
    if d1 <= d2:
        assert s1 >= s2


def test_exact_pose_has_perfect_depth_score():
    obj = Box((0.12, 0.16, 0.06))
    q = grid_quaternions(REDUCED_GRID)[400]
    t = np.array([0.05, -0.02, 1.1])
    frame = Frame(0, CAM, depth=render_depth_image((q, t), obj, CAM), rotation=q, translation=t)
    roi = roi_for_translation(t, CAM, 1.0, 128).as_array()
    v, delta = evaluate_depth(frame, obj, q[None], t[None], roi[None], 0.02, 0.05)
    assert v[0] == 1.0 and delta[0] == 0.0
