import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monovo.geometry import exp_so3, hat, log_so3
from monovo.initializer import (CorrespondenceSet, InitParams, InsufficientCorrespondences, NoAcceptableHypothesis,
                                NoSolution, NotTriggered, attempt_initialization, decompose_essential,
                                decompose_homography, estimate_essential_5pt, estimate_homography, parallax_angle,
                                ransac_relative_pose, rotation_only_estimate)

FOCAL = 300.0


def _scene(n, rng, depth=(0.7, 1.3), spread=0.3):
    z = rng.uniform(*depth, n)
    return np.column_stack([rng.uniform(-spread, spread, (n, 2)) * z[:, None], z])


def _corr(X, R, t, ids=None, sigma_px=0.0, rng=None):
    """Correspondences for keyframe points ``X`` seen from ``p_cur = R p_key + t``."""
    Xc = X @ R.T + t
    bk, bc = X.copy(), Xc.copy()
    if sigma_px:
        bk[:, :2] += rng.normal(size=(len(X), 2)) * sigma_px / FOCAL * bk[:, 2:3]
        bc[:, :2] += rng.normal(size=(len(X), 2)) * sigma_px / FOCAL * bc[:, 2:3]
    ids = np.arange(len(X)) if ids is None else ids
    return CorrespondenceSet(ids, bk, bc, FOCAL)


def _angle_deg(a, b):
    return math.degrees(math.acos(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1, 1)))


def _rot_err_deg(Ra, Rb):
    return math.degrees(np.linalg.norm(log_so3(Ra.T @ Rb)))


def test_parallax_examples(oracle):
    assert parallax_angle(0.35, 1.0) == pytest.approx(oracle["parallax_deg_at_0p35"], rel=1e-12)
    assert parallax_angle(2.0, 1.0) == pytest.approx(oracle["parallax_deg_at_2"], rel=1e-12)
    assert parallax_angle(0.0, 1.0) == 0.0


def test_homography_planar_scene():
    rng = np.random.default_rng(0)
    n_vec, dist = np.array([0.0, 0.0, 1.0]), 2.0
    X = np.column_stack([rng.uniform(-1, 1, (20, 2)), np.full(20, dist)])
    R, t = exp_so3([0.02, -0.05, 0.03]), np.array([0.3, 0.1, -0.05])
    corr = _corr(X, R, t)
    H = estimate_homography(corr, np.arange(20))
    ref = R + np.outer(t, n_vec) / dist
    ref /= np.linalg.norm(ref)
    assert np.allclose(H, ref * np.sign(H.ravel() @ ref.ravel()), atol=1e-9)
    cands = decompose_homography(H, corr.b_key, corr.b_cur)
    best = min(cands, key=lambda c: _rot_err_deg(c[0], R) + _angle_deg(c[1], t))
    assert _rot_err_deg(best[0], R) < 1e-6 and _angle_deg(best[1], t) < 1e-6


def test_homography_of_pure_rotation_is_the_rotation():
    rng = np.random.default_rng(1)
    X = _scene(12, rng, depth=(1, 10))
    R = exp_so3([0.1, 0.2, -0.1])
    corr = _corr(X, R, np.zeros(3))
    H = estimate_homography(corr, np.arange(12))
    (Rh, th), = decompose_homography(H, corr.b_key, corr.b_cur)
    assert _rot_err_deg(Rh, R) < 1e-6 and np.array_equal(th, np.zeros(3))
    (Ri, _), = decompose_homography(np.eye(3))
    assert np.allclose(Ri, np.eye(3))


def test_homography_needs_four_points():
    corr = _corr(_scene(10, np.random.default_rng(2)), np.eye(3), np.array([0.1, 0, 0]))
    with pytest.raises(InsufficientCorrespondences):
        estimate_homography(corr, [0, 1, 2])


@settings(max_examples=30)
@given(st.integers(0, 100_000))
def test_five_point_contains_true_essential(seed):
    rng = np.random.default_rng(seed)
    X = _scene(5, rng, depth=(2, 6), spread=0.6)
    R, t = exp_so3(rng.uniform(-0.2, 0.2, 3)), rng.uniform(-1, 1, 3)
    corr = _corr(X, R, t)
    try:
        Es = estimate_essential_5pt(corr, np.arange(5))
    except NoSolution:
        return
    ref = hat(t / np.linalg.norm(t)) @ R
    ref /= np.linalg.norm(ref)
    assert min(min(np.abs(E - ref).max(), np.abs(E + ref).max()) for E in Es) < 1e-6
    for E in Es:
        assert np.abs(np.einsum("ni,ij,nj->n", corr.b_cur, E, corr.b_key)).max() < 1e-9


def test_five_point_degenerate_sample():
    X = np.tile([[0.1, 0.2, 1.0]], (5, 1))
    corr = _corr(X, np.eye(3), np.array([0.2, 0, 0]))
    with pytest.raises(NoSolution):
        estimate_essential_5pt(corr, np.arange(5))


def test_decompose_essential_four_candidates():
    R, t = exp_so3([0.1, -0.2, 0.05]), np.array([1.0, 0.2, 0.1])
    cands = decompose_essential(hat(t) @ R)
    assert len(cands) == 4
    assert min(_rot_err_deg(c[0], R) + _angle_deg(c[1], t) for c in cands) < 1e-6


def test_ransac_clean_recovers_motion():
    rng = np.random.default_rng(3)
    X = _scene(100, rng, depth=(2, 6), spread=0.5)
    R, t = exp_so3([0.02, 0.05, -0.01]), np.array([0.5, 0.05, 0.1])
    corr = _corr(X, R, t)
    h = ransac_relative_pose(corr, 1.5, 200, np.random.default_rng(0))
    assert h.n_inliers == 100
    assert _angle_deg(h.T_rel.t, t) < 0.1 and _rot_err_deg(h.T_rel.R, R) < 0.1


def test_ransac_rejects_exactly_the_outliers():
    rng = np.random.default_rng(4)
    X = _scene(100, rng, depth=(2, 6), spread=0.5)
    R, t = exp_so3([0.02, 0.05, -0.01]), np.array([0.5, 0.05, 0.1])
    corr = _corr(X, R, t)
    bad = rng.choice(100, 30, replace=False)
    # outliers: current bearings replaced by random directions in the view cone
    corr.b_cur[bad] = _scene(30, rng, depth=(1, 1), spread=0.5)
    corr.b_cur[bad] /= np.linalg.norm(corr.b_cur[bad], axis=1, keepdims=True)
    h = ransac_relative_pose(corr, 1.5, 500, np.random.default_rng(0))
    expected = np.ones(100, bool)
    expected[bad] = False
    assert np.array_equal(h.inliers, expected)


def test_ransac_needs_five():
    corr = _corr(_scene(4, np.random.default_rng(5)), np.eye(3), np.array([0.1, 0, 0]))
    with pytest.raises(InsufficientCorrespondences):
        ransac_relative_pose(corr, 1.5, 10, np.random.default_rng(0))


def test_rotation_only_estimate():
    rng = np.random.default_rng(6)
    X = _scene(60, rng, depth=(2, 6), spread=0.5)
    R = exp_so3([0.05, -0.1, 0.2])
    h = rotation_only_estimate(_corr(X, R, np.zeros(3)), 1.5, np.random.default_rng(0))
    assert h.n_inliers == 60 and _rot_err_deg(h.T_rel.R, R) < 0.01
    h0 = rotation_only_estimate(_corr(X, np.eye(3), np.zeros(3)), 1.5)
    assert np.allclose(h0.T_rel.R, np.eye(3), atol=1e-12)
    moved = rotation_only_estimate(_corr(X, R, np.array([0.5, 0, 0])), 1.5, np.random.default_rng(0))
    assert moved.n_inliers < 60


def _init(baseline, seed=7, n=80, params=None, R=None):
    rng = np.random.default_rng(seed)
    X = _scene(n, rng)
    R = exp_so3([0.01, -0.02, 0.015]) if R is None else R
    corr = _corr(X, R, np.array([baseline, 0.0, 0.0]))
    return attempt_initialization([(0, corr)], 5, params or InitParams(), np.random.default_rng(seed)), X


def test_initialization_accepts_enough_parallax(oracle):
    res, X = _init(0.35)
    assert res.accepted and res.frames == (0, 5)
    # scene mean distance is close to one, so the rescaled baseline is close to the true one
    assert res.parallax_deg == pytest.approx(oracle["parallax_deg_at_0p35"], rel=0.05)
    d = np.array([v[1] for v in res.landmarks.values()])
    assert np.count_nonzero(d > 0) >= 5
    assert np.mean(1.0 / d[d > 0]) == pytest.approx(1.0, abs=1e-6)


def test_initialization_rejects_small_parallax():
    with pytest.raises(NoAcceptableHypothesis):
        _init(0.05)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_pure_rotation_never_initializes(seed):
    rng = np.random.default_rng(seed)
    with pytest.raises(NoAcceptableHypothesis):
        _init(0.0, seed=seed, R=exp_so3(rng.uniform(-0.3, 0.3, 3)))


def test_initialization_mean_distance_parameter():
    res, _ = _init(0.35, params=InitParams(mean_distance=2.5))
    d = np.array([v[1] for v in res.landmarks.values()])
    assert np.mean(1.0 / d[d > 0]) == pytest.approx(2.5, abs=1e-6)


def test_initialization_trigger_and_determinism():
    with pytest.raises(NotTriggered):
        attempt_initialization([], 1, InitParams(), np.random.default_rng(0), n_finite_observations=5)
    a, _ = _init(0.35, seed=11)
    b, _ = _init(0.35, seed=11)
    assert np.array_equal(a.T_rel.R, b.T_rel.R) and np.array_equal(a.T_rel.t, b.T_rel.t)
    assert a.landmarks.keys() == b.landmarks.keys()
