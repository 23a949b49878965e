import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monovo.backend.marginalization import marginalize_oldest
from monovo.backend.pipeline import MAPPED, ROTATION_ONLY, Odometry
from monovo.backend.problem import (EmptyProblem, apply_update, build_normal_equations, gauss_newton_solve,
                                    linearize)
from monovo.backend.residuals import huber, level_weight, reprojection_residual, scale_fix_residual
from monovo.backend.tracking import (MAKE_PREVIOUS_FRAME_KEYFRAME, KeyframePolicyState, TrackingLost,
                                     keyframe_decision, negative_entropy, track_frame)
from monovo.backend.window import BackendParams, MarginalizationPrior, OptimizationWindow
from monovo.camera import project, retract_bearing
from monovo.geometry import Pose, box_minus, exp_so3, inc, log_so3
from monovo.simworld import NoiseSpec, SceneSpec, TrackSimulator, TrajectorySpec, generate_scene, pose_at

from synth import CAM, keyframe_poses, make_window, project_world, random_points, strong_prior, toy_window


# ---------------------------------------------------------------- residuals

def _residual_setup(rng):
    Th = Pose(exp_so3(rng.uniform(-0.1, 0.1, 3)), rng.uniform(-0.5, 0.5, 3))
    Tt = Pose(exp_so3(rng.uniform(-0.1, 0.1, 3)), Th.t + rng.uniform(-0.5, 0.5, 3))
    b = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    return Th, Tt, b / np.linalg.norm(b), rng.uniform(0.1, 0.4), rng.uniform(100, 500, 2)


def test_level_weight_values():
    assert level_weight(0) == 1.0 and level_weight(1) == 0.5 and level_weight(3) == 0.125
    with pytest.raises(ValueError):
        level_weight(-1)


def test_huber_pieces():
    rho, w = huber(np.array([0.0, 1.0, 1.5, 3.0]), 1.5)
    assert np.allclose(rho, [0.0, 1.0, 2.25, 2 * 1.5 * 3 - 2.25])
    assert np.allclose(w, [1.0, 1.0, 1.0, 0.5])


def test_residual_zero_at_truth():
    X = np.array([0.3, -0.2, 4.0])
    Th, Tt = Pose(), Pose(exp_so3([0, 0.05, 0]), [0.4, 0, 0])
    uv = project_world(Tt, X[None])[0]
    r, *_ = reprojection_residual(CAM, Th, Tt, X / np.linalg.norm(X), 1 / np.linalg.norm(X), uv)
    assert np.abs(r).max() < 1e-10


@settings(max_examples=50)
@given(st.integers(0, 100_000))
def test_reprojection_jacobians_match_finite_differences(seed):
    Th, Tt, b, d, uv = _residual_setup(np.random.default_rng(seed))
    r0, Jh, Jt, Jb, Jd = reprojection_residual(CAM, Th, Tt, b, d, uv)
    eps = 1e-6

    def fd(f):
        return (f(eps) - f(-eps)) / (2 * eps)

    for k in range(6):
        e = np.eye(6)[k]
        num_h = fd(lambda s: reprojection_residual(CAM, inc(Th, s * e), Tt, b, d, uv)[0])
        num_t = fd(lambda s: reprojection_residual(CAM, Th, inc(Tt, s * e), b, d, uv)[0])
        assert np.allclose(Jh[:, k], num_h, atol=1e-5 * max(1, np.abs(num_h).max()))
        assert np.allclose(Jt[:, k], num_t, atol=1e-5 * max(1, np.abs(num_t).max()))
    for k in range(2):
        e = np.eye(2)[k]
        num = fd(lambda s: reprojection_residual(CAM, Th, Tt, retract_bearing(b, s * e), d, uv)[0])
        assert np.allclose(Jb[:, k], num, atol=1e-5 * max(1, np.abs(num).max()))
    num = fd(lambda s: reprojection_residual(CAM, Th, Tt, b, d + s, uv)[0])
    assert np.allclose(Jd, num, atol=1e-5 * max(1, np.abs(num).max()))


def test_point_at_infinity_ignores_translation():
    Th, Tt, b, _, uv = _residual_setup(np.random.default_rng(3))
    _, Jh, Jt, _, Jd = reprojection_residual(CAM, Th, Tt, b, 0.0, uv)
    assert np.array_equal(Jh[:, :3], np.zeros((2, 3))) and np.array_equal(Jt[:, :3], np.zeros((2, 3)))
    assert np.abs(Jd).max() > 0


def test_host_frame_observation_has_no_pose_jacobian():
    Th, _, b, d, uv = _residual_setup(np.random.default_rng(4))
    _, Jh, Jt, _, Jd = reprojection_residual(CAM, Th, Th, b, d, uv, same_frame=True)
    assert not Jh.any() and not Jt.any() and not Jd.any()


def test_scale_fix_example(oracle):
    ex = oracle["scale_fix_double_distance"]
    res, Ji, Jj = scale_fix_residual(Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [2, 0, 0]), 1.0)
    assert res == pytest.approx(ex["residual"]) and res * res == pytest.approx(ex["cost_per_weight"])
    assert np.allclose(Ji, [-1, 0, 0, 0, 0, 0]) and np.allclose(Jj, [1, 0, 0, 0, 0, 0])


def test_scale_fix_jacobian_fd():
    rng = np.random.default_rng(5)
    Ti, Tj = Pose(exp_so3(rng.normal(size=3)), rng.normal(size=3)), Pose(exp_so3(rng.normal(size=3)), rng.normal(size=3))
    _, Ji, Jj = scale_fix_residual(Ti, Tj, 0.7)
    for k in range(6):
        e = 1e-6 * np.eye(6)[k]
        ni = (scale_fix_residual(inc(Ti, e), Tj, 0.7)[0] - scale_fix_residual(inc(Ti, -e), Tj, 0.7)[0]) / 2e-6
        nj = (scale_fix_residual(Ti, inc(Tj, e), 0.7)[0] - scale_fix_residual(Ti, inc(Tj, -e), 0.7)[0]) / 2e-6
        assert Ji[k] == pytest.approx(ni, abs=1e-7) and Jj[k] == pytest.approx(nj, abs=1e-7)


# ---------------------------------------------------------------- normal equations

def test_normal_equations_vanish_at_truth():
    H, b, cost = build_normal_equations(toy_window())
    assert cost < 1e-18 and np.abs(b).max() < 1e-7
    assert np.allclose(H, H.T)


def _state_cost(window, lin, x):
    K6 = 6 * len(window.keyframes)
    w = apply_update(window, lin, x[:K6], x[K6:].reshape(-1, 3))
    return linearize(w, lin.lm_ids, jacobians=False).cost


def test_hessian_matches_finite_differences():
    rng = np.random.default_rng(0)
    w = make_window(keyframe_poses(2, rng), random_points(5, rng), anchor=False, scale_fix=False)
    lin = linearize(w)
    H, _ = lin.dense()
    n, eps = H.shape[0], 1e-4
    num = np.zeros((n, n))
    E = np.eye(n) * eps
    for i in range(n):
        for j in range(i, n):
            f = lambda a, b: _state_cost(w, lin, a * E[i] + b * E[j])
            num[i, j] = num[j, i] = (f(1, 1) - f(1, -1) - f(-1, 1) + f(-1, -1)) / (4 * eps * eps)
    # cost is a plain sum of squares, so its Hessian is twice the Gauss-Newton matrix
    assert np.abs(num / 2 - H).max() < 1e-4 * np.abs(H).max()


def test_translation_block_of_points_at_infinity_is_the_weak_prior():
    w = toy_window(n_kf=2, anchor=False, scale_fix=False)
    for lm in w.landmarks.values():
        lm.inv_dist = 0.0
    assert w.prior is None
    lin = linearize(w)
    idx = [0, 1, 2, 6, 7, 8]
    wi = w.params.w_inf
    expected = wi * np.block([[np.eye(3), -np.eye(3)], [-np.eye(3), np.eye(3)]])
    assert np.allclose(lin.Hpp[np.ix_(idx, idx)], expected, atol=1e-15)


def test_empty_window_is_rejected():
    with pytest.raises(EmptyProblem):
        build_normal_equations(OptimizationWindow(CAM, BackendParams()))


# ---------------------------------------------------------------- solver

def test_quadratic_prior_solved_in_one_step():
    w = toy_window(n_kf=2, anchor=False, scale_fix=False)
    for kf in w.keyframes:
        kf.obs = {}
    H0 = np.diag(np.arange(1.0, 13.0))
    b0 = np.linspace(-1, 1, 12)
    w.prior = MarginalizationPrior([0, 1], H0, b0, [kf.pose for kf in w.keyframes])
    out, stats = gauss_newton_solve(w, max_iters=1, lam0=0.0)
    dx = np.concatenate([box_minus(kf.pose, T0) for kf, T0 in zip(out.keyframes, w.prior.lin_poses)])
    assert stats.accepted == 1
    assert np.allclose(dx, -np.linalg.solve(H0, b0), atol=1e-8)


def test_solver_recovers_perturbed_window():
    truth = toy_window()
    w = truth.copy()
    rng = np.random.default_rng(9)
    for kf in w.keyframes[1:]:
        kf.pose = inc(kf.pose, np.concatenate([rng.normal(0, 0.02, 3), rng.normal(0, 0.01, 3)]))
    for lm in w.landmarks.values():
        lm.inv_dist *= 1.05
    out, stats = gauss_newton_solve(w, max_iters=50)
    assert stats.final_cost < stats.initial_cost
    for a, b in zip(out.keyframes, truth.keyframes):
        assert np.abs(box_minus(a.pose, b.pose)).max() < 1e-6


def test_inverse_distance_clamped_at_zero():
    rng = np.random.default_rng(2)
    poses = keyframe_poses(3, rng)
    w = make_window(poses, random_points(20, rng))
    # landmark 0: observations generated from a negative inverse distance
    lm = w.landmarks[0]
    for kf in w.keyframes[1:]:
        T = kf.pose.inverse() @ poses[0]
        q = T.R @ lm.bearing + T.t * -0.05
        kf.obs[0] = (project(CAM, np.append(q, 1.0)), 0)
    strong_prior(w)
    out, _ = gauss_newton_solve(w, max_iters=30)
    assert out.landmarks[0].inv_dist == 0.0
    assert all(l.inv_dist >= 0 for l in out.landmarks.values())


@settings(max_examples=15)
@given(st.integers(0, 100_000))
def test_solver_never_increases_cost(seed):
    rng = np.random.default_rng(seed)
    w = toy_window(n_kf=3, n_lm=25, sigma=1.0, seed=seed)
    for kf in w.keyframes[1:]:
        kf.pose = inc(kf.pose, rng.normal(0, 0.01, 6))
    out, stats = gauss_newton_solve(w, max_iters=10)
    assert stats.final_cost <= stats.initial_cost
    assert all(l.inv_dist >= 0 for l in out.landmarks.values())


def test_scale_fix_holds_the_gauge():
    w = toy_window(n_kf=4, sigma=1.0, seed=3)
    out, _ = gauss_newton_solve(w, max_iters=30)
    dist = np.linalg.norm(out.keyframes[0].pose.t - out.keyframes[1].pose.t)
    assert abs(dist - w.scale_fix.t_init) < 0.1 * w.scale_fix.t_init
    assert np.abs(box_minus(out.keyframes[0].pose, w.keyframes[0].pose)).max() < 1e-3


# ---------------------------------------------------------------- tracking

def _frame_obs(window, pose, points):
    uv = project_world(pose, points)
    ids = np.arange(len(points))
    return ids, uv, np.zeros(len(points), dtype=int)


def test_tracking_recovers_ground_truth_pose():
    rng = np.random.default_rng(0)
    poses, pts = keyframe_poses(3, rng), random_points(40, rng)
    w = make_window(poses, pts)
    T_true = Pose(exp_so3([0.01, -0.02, 0.03]), [1.2, 0.05, 0.1])
    ids, uv, lev = _frame_obs(w, T_true, pts)
    guess = inc(T_true, [0.02, -0.01, 0.01, 0.005, 0.0, -0.005])
    res = track_frame(w, ids, uv, lev, guess)
    assert np.abs(box_minus(res.pose, T_true)).max() < 1e-6
    assert res.n_inliers == 40 and res.n_finite == 40


def test_tracking_rotation_only():
    w = toy_window(n_kf=1, n_lm=40, scale_fix=False)
    for lm in w.landmarks.values():
        lm.inv_dist = 0.0
    R = exp_so3([0.0, math.radians(5.0), 0.0])
    T_true = Pose(w.keyframes[0].pose.R @ R, w.keyframes[0].pose.t)
    ids = np.array(sorted(w.landmarks))
    uv = np.array([project(CAM, np.append(T_true.R.T @ w.keyframes[0].pose.R @ w.landmarks[t].bearing, 0.0))
                   for t in ids])
    res = track_frame(w, ids, uv, np.zeros(len(ids), int), w.keyframes[0].pose, fix_translation=True)
    assert math.degrees(np.linalg.norm(log_so3(res.pose.R.T @ T_true.R))) < 0.05
    assert np.array_equal(res.pose.t, T_true.t)


def test_tracking_lost():
    w = toy_window()
    with pytest.raises(TrackingLost):
        track_frame(w, [9999], np.array([[1.0, 1.0]]), [0], w.keyframes[-1].pose)
    ids = np.array(sorted(w.landmarks))
    garbage = np.random.default_rng(0).uniform(0, 640, (len(ids), 2))
    with pytest.raises(TrackingLost):
        track_frame(w, ids, garbage, np.zeros(len(ids), int), w.keyframes[-1].pose)


# ---------------------------------------------------------------- keyframe policy

def test_negative_entropy_examples(oracle):
    assert negative_entropy(2 * np.eye(6)) == pytest.approx(oracle["entropy_2I6"], rel=1e-12)
    assert negative_entropy(np.zeros((6, 6))) == -math.inf


def test_keyframe_decision_positive_average():
    p = KeyframePolicyState(0.7)
    assert keyframe_decision(p, 10.0) is None and keyframe_decision(p, 10.0) is None
    assert p.running_avg == 10.0
    assert keyframe_decision(p, 7.5) is None
    p = KeyframePolicyState(0.7)
    keyframe_decision(p, 10.0)
    assert keyframe_decision(p, 6.5) == MAKE_PREVIOUS_FRAME_KEYFRAME
    assert keyframe_decision(p, -math.inf) == MAKE_PREVIOUS_FRAME_KEYFRAME


def test_keyframe_decision_negative_average():
    p = KeyframePolicyState(0.7)
    keyframe_decision(p, -10.0)
    assert keyframe_decision(p, -12.0) is None
    p = KeyframePolicyState(0.7)
    keyframe_decision(p, -10.0)
    assert keyframe_decision(p, -14.0) == MAKE_PREVIOUS_FRAME_KEYFRAME


# ---------------------------------------------------------------- keyframes and window maintenance

def _sequence(traj, sigma=0.0, seconds=None, n_landmarks=6000, seed=1):
    """Frames plus the landmark behind every track id."""
    cam = CAM
    pts = generate_scene(SceneSpec(n_landmarks=n_landmarks, seed=seed))
    sim = TrackSimulator(pts, cam, NoiseSpec(pixel_sigma=sigma, track_kill_prob=0.02),
                         np.random.default_rng(seed))
    frames = [sim.observe(pose_at(traj, k / traj.rate), k, k / traj.rate) for k in range(traj.n_frames)]
    return frames, pts, sim.track_points


def test_first_frame_is_a_keyframe():
    frames, _, _ = _sequence(TrajectorySpec(duration=1.0, peak_time=1.0))
    odo = Odometry(CAM, BackendParams()).run(frames[:1])
    assert odo.status[0].keyframe and len(odo.window.keyframes) == 1
    assert all(lm.inv_dist == 0.0 for lm in odo.window.landmarks.values())


def test_pure_rotation_keeps_points_at_infinity():
    traj = TrajectorySpec(kind="pure_rotation", duration=6.0, axis=(0.2, 0.1, 1.0), total_angle=math.pi / 4)
    frames, _, _ = _sequence(traj, sigma=0.3)
    odo = Odometry(CAM, BackendParams()).run(frames)
    assert all(s.state == ROTATION_ONLY for s in odo.status)
    assert sum(s.keyframe for s in odo.status) >= 2
    assert all(lm.inv_dist == 0.0 for lm in odo.window.landmarks.values())


def test_new_landmarks_are_triangulated_consistently():
    traj = TrajectorySpec(duration=12.0, peak_time=12.0)
    frames, pts, track_points = _sequence(traj, sigma=0.3)
    odo = Odometry(CAM, BackendParams())
    for f in frames:
        odo.process(f)
        assert len(odo.window.keyframes) <= odo.params.n_max
    assert odo.status[-1].state == MAPPED
    w = odo.window
    true_kf = {kf.id: pose_at(traj, kf.timestamp) for kf in w.keyframes}
    ratios = []
    for tid, lm in w.landmarks.items():
        if lm.inv_dist > 0:
            ratios.append(lm.inv_dist * np.linalg.norm(pts[track_points[tid]] - true_kf[lm.host].t))
    ratios = np.array(ratios)
    assert len(ratios) > 50
    # one global scale; individual depths agree with it within 5 %
    rel = np.abs(ratios / np.median(ratios) - 1.0)
    assert np.median(rel) < 0.05


def test_marginalizing_an_uncoupled_keyframe_keeps_the_prior():
    w = toy_window(n_kf=3, anchor=False, scale_fix=False)
    w.keyframes[0].obs = {}
    for lm in w.landmarks.values():
        lm.host = 1
    rng = np.random.default_rng(0)
    A = rng.normal(size=(12, 12))
    H12, b12 = A @ A.T + np.eye(12), rng.normal(size=12)
    # keyframe 0 carries information of its own but shares none with the others
    H = np.zeros((18, 18))
    H[:6, :6] = 5.0 * np.eye(6)
    H[6:, 6:] = H12
    b = np.concatenate([rng.normal(size=6), b12])
    w.prior = MarginalizationPrior([0, 1, 2], H, b, [kf.pose for kf in w.keyframes])
    out = marginalize_oldest(w)
    assert [kf.id for kf in out.keyframes] == [1, 2]
    assert np.allclose(out.prior.H, H12, atol=1e-9) and np.allclose(out.prior.b, b12, atol=1e-9)


def test_marginalization_matches_dense_schur_complement():
    rng = np.random.default_rng(4)
    poses = keyframe_poses(3, rng)
    pts = random_points(20, rng)
    w = make_window(poses, pts, sigma=0.5, rng=rng, scale_fix=False)
    w.keyframes[0].pose = inc(w.keyframes[0].pose, rng.normal(0, 1e-3, 6))
    # the anchor prior is evaluated away from its linearization point, so b is nonzero
    lin = linearize(w, sorted(w.landmarks), use_scale_fix=False, inf_pairs=[])
    H, b = lin.dense()
    keep = np.arange(6, 18)
    drop = np.setdiff1d(np.arange(len(b)), keep)
    Hkd = H[np.ix_(keep, drop)]
    ref_H = H[np.ix_(keep, keep)] - Hkd @ np.linalg.solve(H[np.ix_(drop, drop)], Hkd.T)
    ref_b = b[keep] - Hkd @ np.linalg.solve(H[np.ix_(drop, drop)], b[drop])
    out = marginalize_oldest(w)
    assert len(out.landmarks) == 0
    scale = np.abs(ref_H).max()
    assert np.abs(out.prior.H - ref_H).max() < 1e-8 * scale
    assert np.abs(out.prior.b - ref_b).max() < 1e-8 * max(np.abs(ref_b).max(), 1.0)
