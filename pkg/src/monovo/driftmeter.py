"""Scale-drift indicator from the relative-translation information of the window.

The window is re-expressed as a kinematic chain of relative poses
``C_k = T_k^{k+1}`` between consecutive keyframes. Its Fisher information is
assembled in those coordinates, landmarks and then rotations are eliminated by
Schur complements, and the smallest eigenvalue of what is left (the information
on the relative translations) is turned into the dimensionless indicator
``Lambda = 1 / (sqrt(lambda_min) * mean |t_k|)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backend.problem import active_landmarks, linearize
from .backend.residuals import huber, level_weight, projection_jacobian
from .backend.window import BackendParams, Keyframe, MarginalizationPrior, OptimizationWindow, ScaleFix
from .camera import Landmark, PinholeCamera, tangent_basis
from .geometry import Pose, SymmetricBlockMatrix, adjoint, hat, hat_many, inverse, schur_marginalize

DEGENERATE_EIGENVALUE = 1e-12


class TooFewKeyframes(ValueError):
    pass


@dataclass
class DriftReport:
    H_t: SymmetricBlockMatrix
    lambda_min: float
    mean_rel_translation: float
    Lambda: float


class DegenerateInformation(ValueError):
    """The relative translations are unconstrained in some direction; ``report.Lambda`` is +inf."""

    def __init__(self, report: DriftReport):
        super().__init__(f"smallest eigenvalue {report.lambda_min:.3e} <= {DEGENERATE_EIGENVALUE}")
        self.report = report


@dataclass
class ChainState:
    kf_ids: list
    absolute: list  # world-from-keyframe poses
    relative: list  # T_k^{k+1}

    @property
    def n(self) -> int:
        return len(self.relative)

    def compose(self, h: int, t: int) -> Pose:
        """``T_h^t`` from the chain alone."""
        T = Pose.identity()
        if h < t:
            for k in range(h, t):
                T = self.relative[k] @ T
        else:
            for k in range(t, h):
                T = T @ inverse(self.relative[k])
        return T


def reparametrize_chain(window: OptimizationWindow) -> ChainState:
    kfs = window.keyframes
    if len(kfs) < 2:
        raise TooFewKeyframes("need at least two keyframes")
    poses = [kf.pose for kf in kfs]
    rel = [inverse(poses[k + 1]) @ poses[k] for k in range(len(poses) - 1)]
    return ChainState([kf.id for kf in kfs], poses, rel)


def _shear(t: np.ndarray, sign: float = 1.0) -> np.ndarray:
    N = np.eye(6)
    N[:3, 3:] = sign * hat(t)
    return N


def chain_jacobian_backward(T_left: Pose, T_inner: Pose) -> np.ndarray:
    """Derivative of ``T_left @ C @ ...`` w.r.t. the decoupled increment of ``C = T_inner``.

    ``T_left`` is the part of the chain between ``C`` and the target frame.
    """
    return adjoint(T_left) @ _shear(T_inner.t)


def chain_jacobian_forward(T_to_target_inv: Pose, T_inner: Pose) -> np.ndarray:
    """Derivative of ``P @ inverse(C) @ ...`` w.r.t. the decoupled increment of ``C = T_inner``.

    The first argument is ``inverse(P)``, where ``P`` maps the frame ``C``
    starts from into the target frame.
    """
    Rt = T_inner.R.T
    D = np.zeros((6, 6))
    D[:3, :3] = -Rt
    D[3:, 3:] = -Rt
    return adjoint(inverse(T_to_target_inv)) @ D


def relative_pose_jacobians(chain: ChainState, h: int, t: int) -> dict:
    """``{k: 6x6}`` left-perturbation Jacobians of ``T_h^t`` w.r.t. each chain increment."""
    out = {}
    if h < t:
        # T_h^t = C_{t-1} ... C_h
        for k in range(h, t):
            out[k] = chain_jacobian_backward(chain.compose(k + 1, t), chain.relative[k])
    elif h > t:
        # T_h^t = C_t^-1 ... C_{h-1}^-1
        for k in range(t, h):
            out[k] = chain_jacobian_forward(chain.compose(t, k), chain.relative[k])
    return out


def abs_to_chain_jacobian(chain: ChainState) -> np.ndarray:
    """Jacobian of the absolute decoupled increments w.r.t. (base pose, chain increments)."""
    K = len(chain.absolute)
    G = np.zeros((6 * K, 6 * K))
    T = chain.absolute
    base = _shear(T[0].t)
    for i in range(K):
        M = _shear(T[i].t, -1.0)
        G[6 * i:6 * i + 6, 0:6] = M @ base
        for k in range(i):
            Rt = chain.relative[k].R.T
            D = np.zeros((6, 6))
            D[:3, :3] = -Rt
            D[3:, 3:] = -Rt
            G[6 * i:6 * i + 6, 6 + 6 * k:12 + 6 * k] = M @ adjoint(T[k]) @ D
    return G


def chain_information(window: OptimizationWindow, chain: Optional[ChainState] = None,
                      lm_ids: Optional[list] = None) -> tuple[SymmetricBlockMatrix, int]:
    """Fisher information over (landmarks, chain rotations, chain translations).

    Returns the matrix with block partition ``[3]*L + [3]*n + [3]*n`` and ``L``.
    """
    chain = reparametrize_chain(window) if chain is None else chain
    p = window.params
    n = chain.n
    C6 = 6 * n
    if lm_ids is None:
        lm_ids = active_landmarks(window)
    L = len(lm_ids)
    Hcc = np.zeros((C6, C6))
    Hll = np.zeros((L, 3, 3))
    Hcl = np.zeros((L, C6, 3))

    kidx = window.kf_index()
    lidx = {tid: l for l, tid in enumerate(lm_ids)}
    groups: dict = {}
    for kf in window.keyframes:
        for tid, (uv, lev) in kf.obs.items():
            l = lidx.get(tid)
            if l is None:
                continue
            h = kidx[window.landmarks[tid].host]
            groups.setdefault((h, kidx[kf.id]), []).append((l, uv[0], uv[1], lev))

    for (h, t), rows in sorted(groups.items()):
        a = np.array(rows, dtype=float)
        li = a[:, 0].astype(int)
        uv = a[:, 1:3]
        lev = a[:, 3].astype(int)
        T = chain.compose(h, t)
        B = np.array([window.landmarks[lm_ids[l]].bearing for l in li])
        D = np.array([window.landmarks[lm_ids[l]].inv_dist for l in li])
        P = B @ T.R.T + np.outer(D, T.t)
        valid = P[:, 2] > 1e-8
        Ps = np.where(valid[:, None], P, np.array([0.0, 0.0, 1.0]))
        Jp = projection_jacobian(window.cam, Ps)
        r = np.stack([window.cam.fx * Ps[:, 0] / Ps[:, 2] + window.cam.cx,
                      window.cam.fy * Ps[:, 1] / Ps[:, 2] + window.cam.cy], axis=1) - uv
        _, wh = huber(np.linalg.norm(r, axis=1), p.huber_delta)
        w = level_weight(lev) / p.pixel_sigma**2 * wh * valid
        dp_dl = np.concatenate([T.R @ tangent_basis(B), np.broadcast_to(T.t, (len(li), 3))[:, :, None]], axis=2)
        if h == t:
            dp_dl[:, :, 2] = 0.0
        Jl = Jp @ dp_dl
        Jc = np.zeros((len(li), 2, C6))
        if h != t:
            dp_dxi = np.concatenate([D[:, None, None] * np.eye(3), -hat_many(P)], axis=2)
            Jrel = Jp @ dp_dxi
            for k, Jk in relative_pose_jacobians(chain, h, t).items():
                Jc[:, :, 6 * k:6 * k + 6] = Jrel @ Jk
        WJc = Jc * w[:, None, None]
        Hcc += np.einsum("nai,naj->ij", WJc, Jc)
        np.add.at(Hll, li, np.einsum("nai,naj->nij", Jl * w[:, None, None], Jl))
        np.add.at(Hcl, li, np.einsum("nai,naj->nij", WJc, Jl))

    # absolute-pose priors (marginalization prior, scale fix, infinity priors)
    prior = linearize(window, [], use_prior=True, use_scale_fix=True)
    G = abs_to_chain_jacobian(chain)
    Hg = G.T @ prior.Hpp @ G
    gauge = SymmetricBlockMatrix(Hg, [6] + [6] * n)
    Hprior, _ = schur_marginalize(gauge, G.T @ prior.bp, list(range(1, n + 1)))
    Hcc += Hprior.matrix

    # reorder chain variables: rotations of all edges, then translations
    rot = np.concatenate([np.arange(6 * k + 3, 6 * k + 6) for k in range(n)]) if n else np.zeros(0, int)
    tra = np.concatenate([np.arange(6 * k, 6 * k + 3) for k in range(n)]) if n else np.zeros(0, int)
    perm = np.concatenate([rot, tra])
    N = 3 * L + C6
    H = np.zeros((N, N))
    H[3 * L:, 3 * L:] = Hcc[np.ix_(perm, perm)]
    for l in range(L):
        s = 3 * l
        H[s:s + 3, s:s + 3] = Hll[l]
        H[3 * L:, s:s + 3] = Hcl[l][perm]
        H[s:s + 3, 3 * L:] = Hcl[l][perm].T
    return SymmetricBlockMatrix(H, [3] * L + [3] * n + [3] * n), L


def marginalize_to_translations(H_chain: SymmetricBlockMatrix, n_landmarks: int) -> SymmetricBlockMatrix:
    """Eliminate landmarks, then rotations; the partition must be (landmarks, rotations, translations)."""
    nb = len(H_chain.block_sizes)
    n = (nb - n_landmarks) // 2
    zero = np.zeros(H_chain.dim)
    H1, b1 = schur_marginalize(H_chain, zero, list(range(n_landmarks, nb)), diagonal_blocks=True)
    H2, _ = schur_marginalize(H1, b1, list(range(n, 2 * n)))
    return H2


def lambda_scale_drift(H_t: SymmetricBlockMatrix, chain: ChainState) -> DriftReport:
    M = 0.5 * (H_t.matrix + H_t.matrix.T)
    lam = float(np.linalg.eigvalsh(M)[0])
    mean_t = float(np.mean([np.linalg.norm(T.t) for T in chain.relative]))
    if lam <= DEGENERATE_EIGENVALUE:
        raise DegenerateInformation(DriftReport(H_t, lam, mean_t, math.inf))
    return DriftReport(H_t, lam, mean_t, 1.0 / (math.sqrt(lam) * mean_t))


def compute_drift(window: OptimizationWindow) -> DriftReport:
    """Full estimator on one window snapshot; degenerate cases return the +inf report."""
    chain = reparametrize_chain(window)
    H, L = chain_information(window, chain)
    H_t = marginalize_to_translations(H, L)
    try:
        return lambda_scale_drift(H_t, chain)
    except DegenerateInformation as e:
        return e.report


# ---------------------------------------------------------------- snapshots

def snapshot_to_dict(window: OptimizationWindow, timestamp: float) -> dict:
    cam = window.cam
    pr = window.prior
    sf = window.scale_fix
    return {
        "timestamp": timestamp,
        "camera": [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height],
        "params": {"huber_delta": window.params.huber_delta, "pixel_sigma": window.params.pixel_sigma,
                   "w_inf": window.params.w_inf},
        "keyframes": [{"id": kf.id, "timestamp": kf.timestamp, "R": kf.pose.R.tolist(), "t": kf.pose.t.tolist(),
                       "obs": [[tid, float(uv[0]), float(uv[1]), int(lev)] for tid, (uv, lev) in kf.obs.items()]}
                      for kf in window.keyframes],
        "landmarks": [[tid, lm.host, lm.bearing.tolist(), lm.inv_dist, lm.level]
                      for tid, lm in window.landmarks.items()],
        "prior": None if pr is None else {"kf_ids": pr.kf_ids, "H": pr.H.tolist(), "b": pr.b.tolist(),
                                          "R": [T.R.tolist() for T in pr.lin_poses],
                                          "t": [T.t.tolist() for T in pr.lin_poses]},
        "scale_fix": None if sf is None else [sf.i, sf.j, sf.t_init, sf.weight],
    }


def snapshot_from_dict(d: dict) -> tuple[OptimizationWindow, float]:
    fx, fy, cx, cy, wd, ht = d["camera"]
    cam = PinholeCamera(fx, fy, cx, cy, int(wd), int(ht))
    params = BackendParams(**d["params"])
    w = OptimizationWindow(cam, params)
    for k in d["keyframes"]:
        obs = {int(o[0]): (np.array(o[1:3]), int(o[3])) for o in k["obs"]}
        w.keyframes.append(Keyframe(int(k["id"]), float(k["timestamp"]), Pose(k["R"], k["t"]), obs))
    for tid, host, b, dist, lev in d["landmarks"]:
        w.landmarks[int(tid)] = Landmark(int(host), np.array(b), float(dist), int(lev))
    pr = d["prior"]
    if pr is not None:
        w.prior = MarginalizationPrior(list(pr["kf_ids"]), np.array(pr["H"]), np.array(pr["b"]),
                                       [Pose(R, t) for R, t in zip(pr["R"], pr["t"])])
    if d["scale_fix"] is not None:
        i, j, t0, wt = d["scale_fix"]
        w.scale_fix = ScaleFix(int(i), int(j), float(t0), float(wt))
    return w, float(d["timestamp"])


def write_snapshots(path, snapshots) -> None:
    with open(path, "w") as fh:
        for s in snapshots:
            fh.write(json.dumps(s) + "\n")


def read_snapshots(path) -> list:
    with open(path) as fh:
        return [snapshot_from_dict(json.loads(line)) for line in fh if line.strip()]
