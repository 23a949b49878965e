"""Normal equations and Levenberg-Marquardt over the window.

State ordering: keyframe poses (6 each, window order) followed by landmarks
(3 each: two bearing tangent coordinates, then inverse distance). Landmarks are
eliminated through their block-diagonal Schur complement inside the solver.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..camera import retract_bearing
from ..geometry import box_minus, inc
from .residuals import huber, level_weight, project_batch, scale_fix_residual
from .window import OptimizationWindow

log = logging.getLogger(__name__)


class EmptyProblem(ValueError):
    pass


class SolverDiverged(RuntimeError):
    pass


@dataclass
class Linearization:
    kf_ids: list
    lm_ids: list
    cost: float
    Hpp: np.ndarray
    bp: np.ndarray
    Hll: np.ndarray  # (L, 3, 3)
    bl: np.ndarray  # (L, 3)
    Hpl: np.ndarray  # (L, 6K, 3)
    n_obs: int

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        K6 = self.Hpp.shape[0]
        L = len(self.lm_ids)
        n = K6 + 3 * L
        H = np.zeros((n, n))
        b = np.zeros(n)
        H[:K6, :K6] = self.Hpp
        b[:K6] = self.bp
        for l in range(L):
            s = K6 + 3 * l
            H[s:s + 3, s:s + 3] = self.Hll[l]
            H[:K6, s:s + 3] = self.Hpl[l]
            H[s:s + 3, :K6] = self.Hpl[l].T
            b[s:s + 3] = self.bl[l]
        return H, b


def active_landmarks(window: OptimizationWindow) -> list:
    """Landmarks observed by at least one keyframe besides their host."""
    count = {}
    for kf in window.keyframes:
        for tid in kf.obs:
            lm = window.landmarks.get(tid)
            if lm is not None and lm.host != kf.id:
                count[tid] = count.get(tid, 0) + 1
    return sorted(count)


def infinity_pairs(window: OptimizationWindow) -> list:
    """Keyframe index pairs whose shared landmarks all sit at infinity."""
    K = len(window.keyframes)
    shared = np.zeros((K, K), dtype=int)
    finite = np.zeros((K, K), dtype=int)
    observers = {}
    for k, kf in enumerate(window.keyframes):
        for tid in kf.obs:
            if tid in window.landmarks:
                observers.setdefault(tid, []).append(k)
    for tid, ks in observers.items():
        if len(ks) < 2:
            continue
        ks = np.array(ks)
        fin = window.landmarks[tid].inv_dist > 0
        shared[np.ix_(ks, ks)] += 1
        if fin:
            finite[np.ix_(ks, ks)] += 1
    return [(i, j) for i in range(K) for j in range(i + 1, K) if shared[i, j] > 0 and finite[i, j] == 0]


def _gather(window: OptimizationWindow, lm_ids: list):
    kidx = window.kf_index()
    lidx = {tid: l for l, tid in enumerate(lm_ids)}
    rows = []
    for kf in window.keyframes:
        k = kidx[kf.id]
        for tid, (uv, lev) in kf.obs.items():
            l = lidx.get(tid)
            if l is not None:
                rows.append((l, kidx[window.landmarks[tid].host], k, uv[0], uv[1], lev))
    if not rows:
        return None
    a = np.array(rows, dtype=float)
    return (a[:, 0].astype(int), a[:, 1].astype(int), a[:, 2].astype(int), a[:, 3:5], a[:, 5].astype(int))


def linearize(window: OptimizationWindow, lm_ids: Optional[list] = None, *, jacobians: bool = True,
              use_prior: bool = True, use_scale_fix: bool = True,
              inf_pairs: Optional[Iterable] = None) -> Linearization:
    p = window.params
    kfs = window.keyframes
    K = len(kfs)
    if lm_ids is None:
        lm_ids = active_landmarks(window)
    L = len(lm_ids)
    K6 = 6 * K
    R = np.array([kf.pose.R for kf in kfs])
    t = np.array([kf.pose.t for kf in kfs])
    Hpp = np.zeros((K6, K6))
    bp = np.zeros(K6)
    Hll = np.zeros((L, 3, 3))
    bl = np.zeros((L, 3))
    Hpl = np.zeros((L, K6, 3))
    cost = 0.0
    n_obs = 0

    g = _gather(window, lm_ids) if L else None
    if g is not None:
        li, hi, ti, uv, lev = g
        n_obs = len(li)
        B = np.array([window.landmarks[tid].bearing for tid in lm_ids])
        D = np.array([window.landmarks[tid].inv_dist for tid in lm_ids])
        r, Jh, Jt, Jl, valid = project_batch(window.cam, R[hi], t[hi], R[ti], t[ti], B[li], D[li], uv,
                                             same=(hi == ti), jacobians=jacobians)
        e = np.linalg.norm(r, axis=1)
        rho, wh = huber(e, p.huber_delta)
        info = level_weight(lev) / p.pixel_sigma**2 * valid
        cost += float(np.sum(info * rho))
        if jacobians:
            w = info * wh
            Jp = np.zeros((n_obs, 2, K6))
            ar = np.arange(n_obs)
            for c in range(6):
                Jp[ar, :, 6 * hi + c] += Jh[:, :, c]
                Jp[ar, :, 6 * ti + c] += Jt[:, :, c]
            WJp = Jp * w[:, None, None]
            Hpp += np.einsum("nai,naj->ij", WJp, Jp)
            bp += np.einsum("nai,na->i", WJp, r)
            np.add.at(Hll, li, np.einsum("nai,naj->nij", Jl * w[:, None, None], Jl))
            np.add.at(bl, li, np.einsum("nai,na->ni", Jl * w[:, None, None], r))
            np.add.at(Hpl, li, np.einsum("nai,naj->nij", WJp, Jl))

    kidx = window.kf_index()
    if use_prior and window.prior is not None:
        pr = window.prior
        idx = np.concatenate([np.arange(6 * kidx[i], 6 * kidx[i] + 6) for i in pr.kf_ids])
        dx = np.concatenate([box_minus(window.keyframe(i).pose, T0) for i, T0 in zip(pr.kf_ids, pr.lin_poses)])
        cost += float(2.0 * pr.b @ dx + dx @ pr.H @ dx)
        Hpp[np.ix_(idx, idx)] += pr.H
        bp[idx] += pr.b + pr.H @ dx

    sf = window.scale_fix
    if use_scale_fix and sf is not None and sf.i in kidx and sf.j in kidx:
        i, j = kidx[sf.i], kidx[sf.j]
        res, Ji, Jj = scale_fix_residual(kfs[i].pose, kfs[j].pose, sf.t_init)
        cost += sf.weight * res * res
        J = np.zeros(K6)
        J[6 * i:6 * i + 6] += Ji
        J[6 * j:6 * j + 6] += Jj
        Hpp += sf.weight * np.outer(J, J)
        bp += sf.weight * J * res

    pairs = infinity_pairs(window) if inf_pairs is None else inf_pairs
    for i, j in pairs:
        res = t[i] - t[j]
        cost += p.w_inf * float(res @ res)
        si, sj = slice(6 * i, 6 * i + 3), slice(6 * j, 6 * j + 3)
        I3 = p.w_inf * np.eye(3)
        Hpp[si, si] += I3
        Hpp[sj, sj] += I3
        Hpp[si, sj] -= I3
        Hpp[sj, si] -= I3
        bp[si] += p.w_inf * res
        bp[sj] -= p.w_inf * res

    return Linearization([kf.id for kf in kfs], list(lm_ids), cost, Hpp, bp, Hll, bl, Hpl, n_obs)


def build_normal_equations(window: OptimizationWindow) -> tuple[np.ndarray, np.ndarray, float]:
    """Dense ``(H, b, cost)`` of the whole window problem."""
    lin = linearize(window)
    if lin.n_obs == 0 and window.prior is None and window.scale_fix is None:
        raise EmptyProblem("window has no residuals")
    H, b = lin.dense()
    return H, b, lin.cost


def solve_damped(lin: Linearization, lam: float, mu: float = 1e-6, eps: float = 1e-9,
                 fixed_d: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Levenberg step with landmarks eliminated by their block-diagonal Schur complement.

    ``fixed_d`` masks landmarks whose inverse distance is held (step 0).
    """
    K6 = lin.Hpp.shape[0]
    Hpp = lin.Hpp + lam * np.diag(np.diag(lin.Hpp)) + eps * np.eye(K6)
    L = len(lin.lm_ids)
    if L:
        Hll, Hpl, bl = lin.Hll, lin.Hpl, lin.bl
        if fixed_d is not None and np.any(fixed_d):
            Hll, Hpl, bl = Hll.copy(), Hpl.copy(), bl.copy()
            Hll[fixed_d, 2, :] = 0.0
            Hll[fixed_d, :, 2] = 0.0
            Hll[fixed_d, 2, 2] = 1.0
            Hpl[fixed_d, :, 2] = 0.0
            bl[fixed_d, 2] = 0.0
        dl = np.einsum("lii->li", Hll)
        Hll = Hll + (lam * dl + mu)[:, :, None] * np.eye(3)
        Hll_inv = np.linalg.inv(Hll)
        X = np.einsum("lpi,lij->lpj", Hpl, Hll_inv)  # Hpl Hll^-1
        S = Hpp - np.einsum("lpj,lqj->pq", X, Hpl)
        g = lin.bp - np.einsum("lpj,lj->p", X, bl)
    else:
        S, g = Hpp, lin.bp
    dxp = -np.linalg.solve(0.5 * (S + S.T), g)
    if L:
        rhs = bl + np.einsum("lpi,p->li", Hpl, dxp)
        dxl = -np.einsum("lij,lj->li", Hll_inv, rhs)
    else:
        dxl = np.zeros((0, 3))
    return dxp, dxl


def _solve_with_bounds(window: OptimizationWindow, lin: Linearization, lam: float):
    """Damped step that keeps landmarks sitting at ``d = 0`` from being pushed below it."""
    dxp, dxl = solve_damped(lin, lam)
    if not len(lin.lm_ids):
        return dxp, dxl
    d0 = np.array([window.landmarks[t].inv_dist for t in lin.lm_ids])
    blocked = (d0 <= 0.0) & (dxl[:, 2] < 0.0)
    if np.any(blocked):
        dxp, dxl = solve_damped(lin, lam, fixed_d=blocked)
    return dxp, dxl


def apply_update(window: OptimizationWindow, lin: Linearization, dxp: np.ndarray, dxl: np.ndarray) -> OptimizationWindow:
    new = window.shallow_copy()
    for k, kf in enumerate(new.keyframes):
        kf.pose = inc(kf.pose, dxp[6 * k:6 * k + 6])
    if len(lin.lm_ids):
        ids = lin.lm_ids
        B = retract_bearing(np.array([new.landmarks[t].bearing for t in ids]), dxl[:, :2])
        D = np.array([new.landmarks[t].inv_dist for t in ids]) + dxl[:, 2]
        for l, tid in enumerate(ids):
            lm = new.landmarks[tid]
            lm.bearing = B[l]
            # projection back into the valid region
            lm.inv_dist = max(0.0, float(D[l]))
    return new


@dataclass
class SolveStats:
    iterations: int
    accepted: int
    initial_cost: float
    final_cost: float


def gauss_newton_solve(window: OptimizationWindow, max_iters: int = 20, lam0: float = 1e-4,
                       rel_tol: float = 1e-8, max_rejections: int = 10) -> tuple[OptimizationWindow, SolveStats]:
    """Damped Gauss-Newton on the window; returns the optimized copy and statistics."""
    pairs = infinity_pairs(window)
    lin = linearize(window, inf_pairs=pairs)
    if lin.n_obs == 0 and window.prior is None and window.scale_fix is None:
        raise EmptyProblem("window has no residuals")
    cost0 = cost = lin.cost
    lam = lam0
    rejections = 0
    accepted = 0
    it = 0
    for it in range(1, max_iters + 1):
        try:
            dxp, dxl = _solve_with_bounds(window, lin, lam)
        except np.linalg.LinAlgError:
            lam *= 10.0
            rejections += 1
            if rejections >= max_rejections:
                break
            continue
        trial = apply_update(window, lin, dxp, dxl)
        tlin = linearize(trial, lin.lm_ids, inf_pairs=pairs)
        if tlin.cost < cost:
            decrease = cost - tlin.cost
            window, lin = trial, tlin
            cost = tlin.cost
            accepted += 1
            rejections = 0
            lam = max(lam * 0.1, 1e-12)
            if decrease <= rel_tol * abs(cost + decrease) or cost < 1e-24 * max(lin.n_obs, 1):
                break
        else:
            rejections += 1
            lam *= 10.0
            if rejections >= max_rejections:
                grad = float(np.max(np.abs(lin.bp))) if len(lin.bp) else 0.0
                if accepted == 0 and grad > 1e-6 * max(1.0, abs(cost)):
                    raise SolverDiverged(f"no decrease after {rejections} damping escalations (cost {cost:.6g})")
                break
    return window, SolveStats(it, accepted, cost0, cost)
