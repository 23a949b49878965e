"""Reprojection and scale-fix residuals with analytic Jacobians.

Pose Jacobians are taken w.r.t. the decoupled left increment ``(v, w)`` of the
world-from-frame poses. Landmarks are perturbed by a 2-dof step in the tangent
plane of their bearing plus an additive step in inverse distance.
"""
from __future__ import annotations

import numpy as np

from ..camera import MIN_DEPTH, PinholeCamera, tangent_basis
from ..geometry import Pose, hat_many


class ProjectionFailed(ValueError):
    pass


def level_weight(c) -> float:
    """Information multiplier for an observation first detected on pyramid level ``c``."""
    c = np.asarray(c)
    if np.any(c < 0):
        raise ValueError("pyramid level must be non-negative")
    return 0.5 ** c


def huber(e: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Huber cost ``rho(e)`` of residual norms (quadratic part ``e^2``) and IRLS weights."""
    e = np.asarray(e, dtype=float)
    inner = e <= delta
    rho = np.where(inner, e * e, 2.0 * delta * e - delta * delta)
    w = np.where(inner, 1.0, delta / np.maximum(e, 1e-300))
    return rho, w


def projection_jacobian(cam: PinholeCamera, p: np.ndarray) -> np.ndarray:
    """``(N, 2, 3)`` derivative of the pinhole projection at points ``p``."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * x * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * y * iz * iz
    return J


def project_batch(cam: PinholeCamera, Rh, th, Rt, tt, b, d, uv, same=None, jacobians=True):
    """Residuals ``pi(T_h^t (b, d)) - z`` for ``N`` observations.

    ``Rh, th`` / ``Rt, tt`` are the world-from-host and world-from-target poses.
    ``same`` flags observations made in the host frame itself; their pose
    Jacobians are set to exactly zero. Returns ``(r, Jh, Jt, Jl, valid)`` with
    ``Jl`` ordered (tangent_1, tangent_2, d).
    """
    d = np.asarray(d, dtype=float)
    Rhb = np.einsum("nij,nj->ni", Rh, b)
    dt = th - tt
    q = Rhb + dt * d[:, None]
    p = np.einsum("nji,nj->ni", Rt, q)
    valid = p[:, 2] > MIN_DEPTH
    ps = np.where(valid[:, None], p, np.array([0.0, 0.0, 1.0]))
    r = np.stack([cam.fx * ps[:, 0] / ps[:, 2] + cam.cx, cam.fy * ps[:, 1] / ps[:, 2] + cam.cy], axis=1) - uv
    r[~valid] = 0.0
    if not jacobians:
        return r, None, None, None, valid
    Jp = projection_jacobian(cam, ps)
    RtT = np.transpose(Rt, (0, 2, 1))
    dp_dvh = RtT * d[:, None, None]
    dp_dwh = -RtT @ hat_many(Rhb)
    dp_dwt = RtT @ hat_many(q)
    Jh = np.concatenate([Jp @ dp_dvh, Jp @ dp_dwh], axis=2)
    Jt = np.concatenate([-(Jp @ dp_dvh), Jp @ dp_dwt], axis=2)
    B = tangent_basis(b)
    dp_db = RtT @ Rh @ B
    dp_dd = np.einsum("nij,nj->ni", RtT, dt)
    Jl = np.concatenate([Jp @ dp_db, (Jp @ dp_dd[:, :, None])], axis=2)
    if same is not None:
        same = np.asarray(same, dtype=bool)
        Jh[same] = 0.0
        Jt[same] = 0.0
        Jl[same, :, 2] = 0.0
    for J in (Jh, Jt, Jl):
        J[~valid] = 0.0
    return r, Jh, Jt, Jl, valid


def reprojection_residual(cam: PinholeCamera, T_host: Pose, T_target: Pose, bearing, d: float, uv,
                          same_frame: bool = False):
    """Single-observation residual and Jacobians ``(r, J_host, J_target, J_bearing, J_d)``."""
    b = np.asarray(bearing, dtype=float)[None]
    r, Jh, Jt, Jl, valid = project_batch(
        cam, T_host.R[None], T_host.t[None], T_target.R[None], T_target.t[None],
        b, np.array([d], dtype=float), np.asarray(uv, dtype=float)[None], np.array([same_frame]))
    if not valid[0]:
        raise ProjectionFailed("landmark projects behind the target camera")
    return r[0], Jh[0], Jt[0], Jl[0, :, :2], Jl[0, :, 2]


def scale_fix_residual(T_i: Pose, T_j: Pose, t_init: float):
    """Distance between two camera centres minus its initial value, with Jacobians (1x6 each)."""
    diff = T_i.t - T_j.t
    dist = float(np.linalg.norm(diff))
    u = diff / dist if dist > 1e-12 else np.zeros(3)
    Ji = np.zeros(6)
    Jj = np.zeros(6)
    Ji[:3] = u
    Jj[:3] = -u
    return dist - t_init, Ji, Jj
