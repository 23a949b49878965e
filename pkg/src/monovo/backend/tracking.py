"""Pose-only tracking of a new frame and the entropy-based keyframe policy."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import Pose, inc
from .residuals import huber, level_weight, project_batch
from .window import OptimizationWindow

MAKE_PREVIOUS_FRAME_KEYFRAME = "make_previous_frame_keyframe"


class TrackingLost(RuntimeError):
    pass


@dataclass
class TrackResult:
    pose: Pose
    info: np.ndarray  # 6x6 Fisher information of the pose
    n_active: int  # observations associated with window landmarks
    n_inliers: int
    n_finite: int  # inlier observations of landmarks with d > 0
    cost: float

    @property
    def entropy(self) -> float:
        return negative_entropy(self.info)


def negative_entropy(info: np.ndarray) -> float:
    """``ln det`` of a Fisher information matrix; ``-inf`` when it is not positive definite."""
    sign, logdet = np.linalg.slogdet(0.5 * (info + info.T))
    return float(logdet) if sign > 0 else -math.inf


def _associate(window: OptimizationWindow, track_ids, uv, levels):
    rows = [k for k, tid in enumerate(track_ids) if int(tid) in window.landmarks]
    idx = np.array(rows, dtype=int)
    tids = [int(track_ids[k]) for k in rows]
    lms = [window.landmarks[t] for t in tids]
    hosts = {kf.id: kf.pose for kf in window.keyframes}
    Rh = np.array([hosts[lm.host].R for lm in lms]).reshape(-1, 3, 3)
    th = np.array([hosts[lm.host].t for lm in lms]).reshape(-1, 3)
    B = np.array([lm.bearing for lm in lms]).reshape(-1, 3)
    D = np.array([lm.inv_dist for lm in lms])
    return tids, Rh, th, B, D, np.asarray(uv, dtype=float)[idx].reshape(-1, 2), np.asarray(levels)[idx]


def track_frame(window: OptimizationWindow, track_ids, uv, levels, guess: Pose,
                fix_translation: bool = False, max_iters: Optional[int] = None,
                inlier_px: Optional[float] = None) -> TrackResult:
    """Estimate one frame's pose against the fixed window landmarks.

    Starts from ``guess`` (constant-position model). A weak prior pulls the
    translation toward ``guess.t`` so frames seeing only points at infinity keep
    a well-defined translation; with ``fix_translation`` only the rotation moves.
    Landmarks still at infinity only constrain the pose while too few
    triangulated ones are visible; a not-yet-triangulated nearby point would
    otherwise bias the translation. Raises ``TrackingLost`` when too few
    observations remain inliers.
    """
    p = window.params
    max_iters = p.track_iters if max_iters is None else max_iters
    inlier_px = 3.0 * p.huber_delta if inlier_px is None else inlier_px
    tids, Rh, th, B, D, z, lev = _associate(window, track_ids, uv, levels)
    finite = D > 0
    if not fix_translation and np.count_nonzero(finite) >= p.min_finite_obs:
        tids = [t for t, f in zip(tids, finite) if f]
        Rh, th, B, D, z, lev = Rh[finite], th[finite], B[finite], D[finite], z[finite], lev[finite]
    n = len(tids)
    min_inl = p.min_inliers_rotation if fix_translation else p.min_inliers
    if n == 0:
        raise TrackingLost("no observation of a window landmark")
    info_w = level_weight(lev) / p.pixel_sigma**2
    t_prior = guess.t.copy()

    def evaluate(T: Pose, jac: bool = True):
        Rt = np.broadcast_to(T.R, (n, 3, 3))
        tt = np.broadcast_to(T.t, (n, 3))
        r, _, Jt, _, valid = project_batch(window.cam, Rh, th, Rt, tt, B, D, z, jacobians=jac)
        e = np.linalg.norm(r, axis=1)
        rho, wh = huber(e, p.huber_delta)
        dt = T.t - t_prior
        cost = float(np.sum(info_w * rho * valid)) + p.w_inf * float(dt @ dt)
        if not jac:
            return cost, None, None, e, valid
        w = info_w * wh * valid
        H = np.einsum("nai,n,naj->ij", Jt, w, Jt)
        g = np.einsum("nai,n,na->i", Jt, w, r)
        H[:3, :3] += p.w_inf * np.eye(3)
        g[:3] += p.w_inf * dt
        return cost, H, g, e, valid

    T = guess
    cost, H, g, e, valid = evaluate(T)
    lam = 1e-4
    sl = slice(3, 6) if fix_translation else slice(0, 6)
    for _ in range(max_iters):
        Hs = H[sl, sl]
        try:
            step = -np.linalg.solve(Hs + lam * np.diag(np.diag(Hs)) + 1e-12 * np.eye(Hs.shape[0]), g[sl])
        except np.linalg.LinAlgError:
            break
        xi = np.zeros(6)
        xi[sl] = step
        T_new = inc(T, xi)
        c_new, H_new, g_new, e_new, v_new = evaluate(T_new)
        if c_new < cost:
            decrease = cost - c_new
            T, cost, H, g, e, valid = T_new, c_new, H_new, g_new, e_new, v_new
            lam = max(lam * 0.1, 1e-12)
            if decrease <= 1e-10 * (cost + decrease) or np.max(np.abs(step)) < 1e-13:
                break
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    inl = valid & (e < inlier_px)
    n_inl = int(np.count_nonzero(inl))
    if n_inl < min_inl:
        raise TrackingLost(f"only {n_inl} inlier observations")
    n_finite = int(np.count_nonzero(inl & (D > 0)))
    return TrackResult(T, H, n, n_inl, n_finite, cost)


@dataclass
class KeyframePolicyState:
    threshold_ratio: float = 0.95
    entropy_sum: float = 0.0
    n_frames: int = 0
    previous: Optional[object] = None  # snapshot of the last tracked frame

    @property
    def running_avg(self) -> float:
        return self.entropy_sum / self.n_frames if self.n_frames else math.nan

    def reset(self) -> None:
        self.entropy_sum = 0.0
        self.n_frames = 0

    def add(self, entropy: float) -> None:
        if math.isfinite(entropy):
            self.entropy_sum += entropy
            self.n_frames += 1


def keyframe_decision(policy: KeyframePolicyState, entropy: float) -> Optional[str]:
    """Request a keyframe when the entropy falls clearly below its running average.

    The threshold is ``ratio * avg`` for a positive average; written as
    ``avg - (1 - ratio) * |avg|`` it keeps the meaning "a drop of the given
    fraction" when the average is negative.
    """
    if entropy == -math.inf:
        return MAKE_PREVIOUS_FRAME_KEYFRAME
    if policy.n_frames == 0:
        policy.add(entropy)
        return None
    avg = policy.running_avg
    if entropy < avg - (1.0 - policy.threshold_ratio) * abs(avg):
        return MAKE_PREVIOUS_FRAME_KEYFRAME
    policy.add(entropy)
    return None
