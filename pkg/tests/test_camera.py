import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from monovo.camera import (AtInfinity, BehindCamera, Landmark, OutOfView, PinholeCamera, project, project_many,
                           retract_bearing, tangent_basis, transform_homog, triangulate, triangulate_many,
                           triangulation_angle, unproject)
from monovo.geometry import Pose, compose, exp_so3

CAM = PinholeCamera(100.0, 100.0, 50.0, 50.0, 100, 100)


def test_project_examples(oracle):
    assert np.array_equal(project(CAM, [0, 0, 2, 1]), [50, 50])
    assert np.allclose(project(CAM, [1, 0, 2, 1]), oracle["project_x1_z2"], atol=0)
    assert np.array_equal(project(CAM, [0, 0, 1, 0]), [50, 50])


def test_project_rejects_points_behind_or_outside():
    with pytest.raises(OutOfView):
        project(CAM, [0, 0, -1, 1])
    with pytest.raises(OutOfView):
        project(CAM, [10, 0, 1, 1])


@given(arrays(float, 3, elements=st.floats(-1, 1)), st.floats(0.1, 5), st.floats(1e-3, 1e3))
def test_project_scale_invariant(xy, z, s):
    p = np.array([xy[0] * z * 0.4, xy[1] * z * 0.4, z, xy[2] ** 2])
    assert np.allclose(project(CAM, s * p), project(CAM, p), atol=1e-9)


def test_transform_homog_examples(oracle):
    b = np.array([0.6, 0.0, 0.8])
    assert np.array_equal(transform_homog(Pose(), b, 0.3), [0.6, 0.0, 0.8, 0.3])
    R = exp_so3([0.1, 0.2, 0.3])
    a = transform_homog(Pose(R, [1, 2, 3]), b, 0.0)
    c = transform_homog(Pose(R, [-5, 0, 9]), b, 0.0)
    assert np.array_equal(a, c)
    out = transform_homog(Pose(np.eye(3), [1, 0, 0]), [0, 0, 1], 0.5)
    assert np.allclose(out, oracle["transform_homog_example"], atol=0)


@given(arrays(float, 12, elements=st.floats(-2, 2)), st.floats(0, 2))
def test_transform_homog_composes(x, d):
    A = Pose(exp_so3(x[:3]), x[3:6])
    B = Pose(exp_so3(x[6:9]), x[9:12])
    b = np.array([0.2, -0.3, 0.9])
    b /= np.linalg.norm(b)
    inner = transform_homog(B, b, d)
    outer = np.concatenate([A.R @ inner[:3] + A.t * inner[3], inner[3:]])
    assert np.allclose(transform_homog(compose(A, B), b, d), outer, atol=1e-9)


def test_unproject_examples(oracle):
    assert np.allclose(unproject(CAM, [50, 50]), [0, 0, 1])
    assert np.allclose(unproject(CAM, [150, 50]), oracle["unproject_150_50"], atol=1e-16)


def test_project_unproject_roundtrip():
    rng = np.random.default_rng(0)
    uv = rng.uniform([0, 0], [100, 100], (100, 2))
    b = unproject(CAM, uv)
    back = np.array([project(CAM, np.append(v, 1.0)) for v in b])
    assert np.allclose(back, uv, atol=1e-10)


def test_triangulate_example(oracle):
    p = np.array([0.0, 0.0, 5.0])
    obs = Pose(np.eye(3), [1.0, 0.0, 0.0])
    T_host_to_obs = obs.inverse()
    bo = (p - obs.t) / np.linalg.norm(p - obs.t)
    d = triangulate([0, 0, 1], bo, T_host_to_obs)
    assert d == pytest.approx(oracle["triangulate_inverse_distance"], rel=1e-12)


def test_triangulate_zero_baseline_is_at_infinity():
    with pytest.raises(AtInfinity):
        triangulate([0, 0, 1], [0, 0, 1], Pose(exp_so3([0, 0.1, 0]), np.zeros(3)))


def test_triangulate_parallel_rays():
    # identical bearings, baseline orthogonal to them: zero angle
    with pytest.raises((AtInfinity, BehindCamera)):
        triangulate([0, 0, 1], [0, 0, 1], Pose(np.eye(3), [1.0, 0, 0]))


def test_triangulate_behind_camera():
    # rays diverge: the "intersection" lies behind the cameras
    bo = np.array([-0.3, 0.0, 1.0])
    bo /= np.linalg.norm(bo)
    with pytest.raises(BehindCamera):
        triangulate([0, 0, 1], bo, Pose(np.eye(3), [1.0, 0, 0]))


@given(st.integers(0, 10_000))
def test_triangulate_noise_free_accuracy(seed):
    rng = np.random.default_rng(seed)
    X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 8)])
    T_obs = Pose(exp_so3(rng.uniform(-0.1, 0.1, 3)), rng.uniform(-1, 1, 3))
    T = T_obs.inverse()
    bh = X / np.linalg.norm(X)
    xo = T.R @ X + T.t
    bo = xo / np.linalg.norm(xo)
    if xo[2] <= 0 or math.degrees(triangulation_angle(bh, bo, T)) <= 2.0 or np.linalg.norm(T.t) < 0.02:
        return
    assert triangulate(bh, bo, T) == pytest.approx(1 / np.linalg.norm(X), rel=1e-9)


def test_triangulate_many_matches_scalar():
    rng = np.random.default_rng(5)
    X = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(3, 8, 20)])
    T = Pose(exp_so3([0.02, -0.03, 0.01]), [-0.7, 0.1, 0.05])
    bh = X / np.linalg.norm(X, axis=1, keepdims=True)
    xo = X @ T.R.T + T.t
    bo = xo / np.linalg.norm(xo, axis=1, keepdims=True)
    d = triangulate_many(bh, bo, np.broadcast_to(T.R, (20, 3, 3)), np.broadcast_to(T.t, (20, 3)))
    ref = [triangulate(a, b, T) for a, b in zip(bh, bo)]
    assert np.allclose(d, ref, rtol=1e-12)
    # zero baseline: every entry reported at infinity
    z = triangulate_many(bh, bh, np.broadcast_to(np.eye(3), (20, 3, 3)), np.zeros((20, 3)))
    assert np.array_equal(z, np.zeros(20))


def test_landmark_normalizes_and_clamps():
    lm = Landmark(0, [0, 0, 2.0], -0.5)
    assert np.allclose(lm.bearing, [0, 0, 1]) and lm.inv_dist == 0.0


@given(arrays(float, 3, elements=st.floats(-1, 1)))
def test_tangent_basis_orthonormal(v):
    if np.linalg.norm(v) < 1e-3:
        return
    b = v / np.linalg.norm(v)
    B = tangent_basis(b)
    assert np.allclose(B.T @ B, np.eye(2), atol=1e-12)
    assert np.allclose(b @ B, 0, atol=1e-12)
    assert np.allclose(np.linalg.norm(retract_bearing(b, np.array([0.1, -0.2]))), 1.0)


def test_camera_validation():
    with pytest.raises(ValueError):
        PinholeCamera(-1, 1, 1, 1, 2, 2)
    with pytest.raises(ValueError):
        PinholeCamera(1, 1, 5, 1, 2, 2)
    uv, ok = project_many(CAM, np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert ok.tolist() == [True, False]
