"""Two-view map initialization.

Homography and five-point hypotheses are sampled under RANSAC and compared
against a rotation-only fit of the same correspondences. A translational
hypothesis only wins if it explains more correspondences with a smaller error
sum, and the map is only initialized once the baseline gives enough parallax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import triangulate_many
from .geometry import Pose


class InsufficientCorrespondences(ValueError):
    pass


class Degenerate(ValueError):
    pass


class NoSolution(ValueError):
    pass


class NotTriggered(Exception):
    pass


class NoAcceptableHypothesis(Exception):
    pass


@dataclass
class CorrespondenceSet:
    """Bearings of the same tracks in keyframe ``k`` and in the current frame."""

    ids: np.ndarray
    b_key: np.ndarray
    b_cur: np.ndarray
    focal: float = 1.0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.b_key = _unit(np.asarray(self.b_key, dtype=float).reshape(-1, 3))
        self.b_cur = _unit(np.asarray(self.b_cur, dtype=float).reshape(-1, 3))
        if not len(self.ids) == len(self.b_key) == len(self.b_cur):
            raise ValueError("ids and bearings must have equal length")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MotionHypothesis:
    T_rel: Pose  # current-from-keyframe, unit or zero translation
    kind: str
    inliers: np.ndarray  # boolean mask over the correspondence set
    score: float

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inliers))

    def beats(self, other: "MotionHypothesis") -> bool:
        return (self.n_inliers, -self.score) > (other.n_inliers, -other.score)


@dataclass
class InitParams:
    min_parallax_deg: float = 5.0
    mean_distance: float = 1.0
    ransac_threshold_px: float = 1.5
    ransac_max_iters: int = 200
    ransac_confidence: float = 0.99
    use_eight_point: bool = False
    min_landmarks: int = 5
    # a five-point model fits almost any handful of noisy bearings
    min_correspondences: int = 20


@dataclass
class InitResult:
    accepted: bool
    frames: tuple
    T_rel: Optional[Pose] = None
    landmarks: dict = field(default_factory=dict)  # track id -> (bearing in keyframe, d)
    parallax_deg: float = 0.0
    baseline: float = 0.0
    hypothesis: Optional[MotionHypothesis] = None
    rotation_only: Optional[MotionHypothesis] = None


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def parallax_angle(baseline: float, mean_distance: float) -> float:
    """Approximate parallax in degrees for a baseline seen from the mean scene distance."""
    return math.degrees(2.0 * math.atan(baseline / (2.0 * mean_distance)))


# ---------------------------------------------------------------- homography

def estimate_homography(corr: CorrespondenceSet, sample: Sequence[int]) -> np.ndarray:
    """DLT homography with ``b_cur ~ H b_key``, normalized to unit Frobenius norm."""
    idx = np.asarray(sample)
    x1 = corr.b_key[idx]
    x2 = corr.b_cur[idx]
    n = len(idx)
    if n < 4:
        raise InsufficientCorrespondences("homography needs 4 correspondences")
    A = np.zeros((2 * n, 9))
    for i, (p, q) in enumerate(zip(x1, x2)):
        A[2 * i, 3:6] = -q[2] * p
        A[2 * i, 6:9] = q[1] * p
        A[2 * i + 1, 0:3] = q[2] * p
        A[2 * i + 1, 6:9] = -q[0] * p
    _, s, Vt = np.linalg.svd(A)
    if s[7] <= 0 or s[0] / s[7] > 1e10:
        raise Degenerate("homography system is rank deficient")
    H = Vt[-1].reshape(3, 3)
    return H / np.linalg.norm(H)


def decompose_homography(H: np.ndarray, x1: Optional[np.ndarray] = None,
                         x2: Optional[np.ndarray] = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Motion candidates ``(R, t_unit)`` from a calibrated homography ``R + t n^T / d``."""
    H = np.asarray(H, dtype=float)
    s = np.linalg.svd(H, compute_uv=False)
    H = H / s[1]
    if x1 is not None and x2 is not None:
        if np.sum(np.einsum("ni,ij,nj->n", x2, H, x1)) < 0:
            H = -H
    elif np.linalg.det(H) < 0:
        H = -H
    S2, V = np.linalg.eigh(H.T @ H)
    S2, V = S2[::-1], V[:, ::-1]
    if np.linalg.det(V) < 0:
        V = -V
    s1, s3 = S2[0], S2[2]
    if abs(s1 - s3) < 1e-9 * max(1.0, s1):
        # plane at infinity or no translation: H is the rotation itself
        U, _, Vt = np.linalg.svd(H)
        R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        return [(R, np.zeros(3))]
    v1, v2, v3 = V[:, 0], V[:, 1], V[:, 2]
    a = math.sqrt(max(1.0 - s3, 0.0))
    b = math.sqrt(max(s1 - 1.0, 0.0))
    c = math.sqrt(s1 - s3)
    out = []
    for u in ((a * v1 + b * v3) / c, (a * v1 - b * v3) / c):
        U = np.stack([v2, u, np.cross(v2, u)], axis=1)
        W = np.stack([H @ v2, H @ u, np.cross(H @ v2, H @ u)], axis=1)
        R = W @ U.T
        n = np.cross(v2, u)
        t = (H - R) @ n
        nt = np.linalg.norm(t)
        t = t / nt if nt > 1e-12 else np.zeros(3)
        out.append((R, t))
        out.append((R, -t))
    return out


# ---------------------------------------------------------------- five-point

# monomial order for cubic polynomials in (x, y, z)
_MONOMIALS = [(3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1), (1, 0, 2), (0, 3, 0), (0, 2, 1),
              (0, 1, 2), (0, 0, 3), (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2),
              (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MON_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}
_LIN = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_QUAD = _MONOMIALS[10:16] + _LIN


def _product_tensor(left, right) -> np.ndarray:
    T = np.zeros((len(left), len(right), len(_MONOMIALS)))
    for i, a in enumerate(left):
        for j, b in enumerate(right):
            T[i, j, _MON_INDEX[tuple(p + q for p, q in zip(a, b))]] = 1.0
    return T


_LIN_LIN = _product_tensor(_LIN, _LIN)[:, :, 10:]  # into the quadratic basis _QUAD
_QUAD_LIN = _product_tensor(_QUAD, _LIN)


def _epipolar_rows(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Rows of ``x2^T E x1 = 0`` over the row-major entries of E."""
    return np.einsum("ni,nj->nij", x2, x1).reshape(len(x1), 9)


def estimate_essential_5pt(corr: CorrespondenceSet, sample: Sequence[int]) -> list[np.ndarray]:
    """All real essential matrices through five correspondences (action-matrix solver)."""
    idx = np.asarray(sample)
    if len(idx) < 5:
        raise InsufficientCorrespondences("five-point solver needs 5 correspondences")
    Q = _epipolar_rows(corr.b_key[idx[:5]], corr.b_cur[idx[:5]])
    _, s, Vt = np.linalg.svd(Q, full_matrices=True)
    if s[4] < 1e-12 * s[0]:
        raise NoSolution("five-point sample is degenerate")
    basis = Vt[5:9]  # X, Y, Z, W
    # E entries as linear polynomials in (x, y, z, 1)
    E = basis.T.reshape(3, 3, 4)
    EEt = np.einsum("ika,jkb,abm->ijm", E, E, _LIN_LIN)  # quadratic basis, 10 coeffs
    EEtE = np.einsum("ikm,kjb,mbn->ijn", EEt, E, _QUAD_LIN)
    tr = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    trE = np.einsum("m,ijb,mbn->ijn", tr, E, _QUAD_LIN)
    cons = (2.0 * EEtE - trE).reshape(9, 20)
    cof = np.einsum("ja,kb,abm->jkm", E[1], E[2], _LIN_LIN)
    cross = np.stack([cof[1, 2] - cof[2, 1], cof[2, 0] - cof[0, 2], cof[0, 1] - cof[1, 0]])
    det = np.einsum("ma,mq,qan->n", E[0], cross, _QUAD_LIN)
    A = np.vstack([det[None], cons])
    try:
        B = np.linalg.solve(A[:, :10], A[:, 10:])
    except np.linalg.LinAlgError:
        raise NoSolution("singular elimination template") from None
    M = np.zeros((10, 10))
    M[:6] = -B[:6]
    M[6, 0] = M[7, 1] = M[8, 2] = M[9, 6] = 1.0
    evals, evecs = np.linalg.eig(M)
    sols = []
    for k in range(10):
        if abs(evals[k].imag) > 1e-8 * max(1.0, abs(evals[k].real)):
            continue
        v = evecs[:, k].real
        if abs(v[9]) < 1e-12:
            continue
        x, y, z = v[6] / v[9], v[7] / v[9], v[8] / v[9]
        Ek = (x * basis[0] + y * basis[1] + z * basis[2] + basis[3]).reshape(3, 3)
        sols.append(Ek / np.linalg.norm(Ek))
    if not sols:
        raise NoSolution("no real roots")
    return sols


def estimate_essential_8pt(corr: CorrespondenceSet, idx: Optional[Sequence[int]] = None) -> np.ndarray:
    """Linear essential matrix from eight or more correspondences."""
    idx = np.arange(len(corr)) if idx is None else np.asarray(idx)
    if len(idx) < 8:
        raise InsufficientCorrespondences("eight-point needs 8 correspondences")
    A = _epipolar_rows(corr.b_key[idx], corr.b_cur[idx])
    _, _, Vt = np.linalg.svd(A)
    U, _, Vt2 = np.linalg.svd(Vt[-1].reshape(3, 3))
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt2
    return E / np.linalg.norm(E)


def decompose_essential(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        out.append((R, t.copy()))
        out.append((R, -t))
    return out


# ---------------------------------------------------------------- scoring

# rays closer than this (sine squared of the angle) count as a point at infinity
_PARALLEL_SIN2 = 1e-10


def _plane(v: np.ndarray) -> np.ndarray:
    z = v[..., 2:3]
    return v[..., :2] / np.where(np.abs(z) > 1e-12, z, 1e-12)


def reprojection_errors(R: np.ndarray, t: np.ndarray, corr: CorrespondenceSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-correspondence two-view pixel error after midpoint triangulation.

    ``R, t`` may carry a leading candidate axis. Returns ``(error, cheiral)``
    where ``error`` is the larger of the two image errors.
    """
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    t = t.reshape(-1, 3)
    bk, bc, f = corr.b_key, corr.b_cur, corr.focal
    r1 = np.einsum("kij,nj->kni", R, bk)
    a12 = -np.einsum("kni,ni->kn", r1, bc)
    g1 = -np.einsum("kni,ki->kn", r1, t)
    g2 = np.einsum("ni,ki->kn", bc, t)
    det = 1.0 - a12**2
    has_t = (np.linalg.norm(t, axis=1) > 1e-12)[:, None]
    finite = has_t & (det > _PARALLEL_SIN2)
    dsafe = np.where(finite, det, 1.0)
    rho = (g1 - a12 * g2) / dsafe
    mu = (g2 - a12 * g1) / dsafe
    # midpoint in the current frame, then back into the keyframe
    mid_c = 0.5 * (rho[..., None] * r1 + t[:, None, :] + mu[..., None] * bc[None])
    mid_k = np.einsum("kji,knj->kni", R, mid_c - t[:, None, :])
    # points at infinity: the bisector of the two rays, so both views share the error
    inf_c = r1 + bc[None]
    inf_k = np.einsum("kji,knj->kni", R, inf_c)
    mid_c = np.where(finite[..., None], mid_c, inf_c)
    mid_k = np.where(finite[..., None], mid_k, inf_k)
    cheiral = (mid_c[..., 2] > 0) & (mid_k[..., 2] > 0)
    cheiral &= np.where(finite, (rho > 0) & (mu > 0), True)
    ek = f * np.linalg.norm(_plane(mid_k) - _plane(bk)[None], axis=-1)
    ec = f * np.linalg.norm(_plane(mid_c) - _plane(bc)[None], axis=-1)
    err = np.maximum(ek, ec)
    err = np.where(cheiral, err, np.inf)
    if single:
        return err[0], cheiral[0]
    return err, cheiral


def score_candidates(R, t, corr: CorrespondenceSet, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Truncated error sums and inlier masks for a stack of candidates."""
    err, _ = reprojection_errors(R, t, corr)
    err = np.atleast_2d(err)
    inl = err < threshold
    return np.minimum(err, threshold).sum(axis=1), inl


def _best_of(R, t, corr, threshold, kind) -> Optional[MotionHypothesis]:
    if len(R) == 0:
        return None
    R = np.asarray(R)
    t = np.asarray(t)
    scores, inl = score_candidates(R, t, corr, threshold)
    counts = inl.sum(axis=1)
    order = np.lexsort((scores, -counts))
    k = order[0]
    return MotionHypothesis(Pose(R[k], t[k]), kind, inl[k], float(scores[k]))


# ---------------------------------------------------------------- estimators

def rotation_fit(b_key: np.ndarray, b_cur: np.ndarray) -> np.ndarray:
    """Rotation minimizing ``sum |b_cur - R b_key|^2`` (orthogonal Procrustes)."""
    M = np.asarray(b_cur).T @ np.asarray(b_key)
    U, _, Vt = np.linalg.svd(M)
    return U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt


def rotation_only_estimate(corr: CorrespondenceSet, threshold_px: float,
                           rng: Optional[np.random.Generator] = None, iters: int = 30) -> MotionHypothesis:
    if len(corr) < 2:
        raise InsufficientCorrespondences("rotation fit needs 2 correspondences")
    z = np.zeros(3)

    def evaluate(R):
        s, inl = score_candidates(R[None], z[None], corr, threshold_px)
        return MotionHypothesis(Pose(R, z), "rotation_only", inl[0], float(s[0]))

    best = evaluate(rotation_fit(corr.b_key, corr.b_cur))
    if best.n_inliers < len(corr) and rng is not None:
        for _ in range(iters):
            idx = rng.choice(len(corr), size=2, replace=False)
            h = evaluate(rotation_fit(corr.b_key[idx], corr.b_cur[idx]))
            if h.beats(best):
                best = h
    # refit on the consensus set
    for _ in range(3):
        if best.n_inliers < 2:
            break
        h = evaluate(rotation_fit(corr.b_key[best.inliers], corr.b_cur[best.inliers]))
        if not h.beats(best):
            break
        best = h
    return best


def _candidates_from_sample(corr: CorrespondenceSet, sample: np.ndarray, eight_point: bool):
    Rs, ts, kinds = [], [], []
    try:
        H = estimate_homography(corr, sample[:4])
        for R, t in decompose_homography(H, corr.b_key[sample[:4]], corr.b_cur[sample[:4]]):
            Rs.append(R), ts.append(t), kinds.append("homography")
    except (Degenerate, np.linalg.LinAlgError):
        pass
    try:
        Es = [estimate_essential_8pt(corr, sample)] if eight_point else estimate_essential_5pt(corr, sample)
        for E in Es:
            for R, t in decompose_essential(E):
                Rs.append(R), ts.append(t), kinds.append("five_point")
    except (NoSolution, InsufficientCorrespondences, np.linalg.LinAlgError):
        pass
    return Rs, ts, kinds


def ransac_relative_pose(corr: CorrespondenceSet, threshold_px: float, max_iters: int,
                         rng: np.random.Generator, confidence: float = 0.99,
                         eight_point: bool = False) -> MotionHypothesis:
    n = len(corr)
    s = 8 if eight_point else 5
    if n < s:
        raise InsufficientCorrespondences(f"need at least {s} correspondences, got {n}")
    best: Optional[MotionHypothesis] = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=s, replace=False)
        Rs, ts, kinds = _candidates_from_sample(corr, sample, eight_point)
        if not Rs:
            continue
        scores, inl = score_candidates(np.array(Rs), np.array(ts), corr, threshold_px)
        counts = inl.sum(axis=1)
        k = np.lexsort((scores, -counts))[0]
        h = MotionHypothesis(Pose(Rs[k], ts[k]), kinds[k], inl[k], float(scores[k]))
        if best is None or h.beats(best):
            best = h
            w = best.n_inliers / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = math.ceil(math.log(1.0 - confidence) / math.log(max(1.0 - w**s, 1e-300)))
    if best is None:
        raise NoSolution("no hypothesis could be generated")
    # linear refit on the consensus set
    idx = np.flatnonzero(best.inliers)
    if len(idx) >= 8:
        try:
            E = estimate_essential_8pt(corr, idx)
            h = _best_of(*zip(*decompose_essential(E)), corr, threshold_px, "five_point")
            if h is not None and h.beats(best):
                best = h
        except (InsufficientCorrespondences, np.linalg.LinAlgError):
            pass
    return best


def attempt_initialization(candidates: Sequence[tuple[int, CorrespondenceSet]], current_id: int,
                           params: InitParams, rng: np.random.Generator,
                           n_finite_observations: int = 0) -> InitResult:
    """Try every keyframe in ``candidates`` against the current frame.

    ``n_finite_observations`` is the number of current-frame observations of
    landmarks with ``d > 0``; initialization only runs below five.
    """
    if n_finite_observations >= params.min_landmarks:
        raise NotTriggered(f"{n_finite_observations} finite landmarks observed")
    best: Optional[InitResult] = None
    thr = params.ransac_threshold_px
    for kf_id, corr in candidates:
        if len(corr) < max(params.min_correspondences, params.min_landmarks,
                           8 if params.use_eight_point else 5):
            continue
        rot = rotation_only_estimate(corr, thr, rng)
        if rot.n_inliers == len(corr):
            # a translational model cannot have more inliers than all of them
            continue
        try:
            hyp = ransac_relative_pose(corr, thr, params.ransac_max_iters, rng,
                                       params.ransac_confidence, params.use_eight_point)
        except (NoSolution, InsufficientCorrespondences):
            continue
        if not (hyp.n_inliers > rot.n_inliers and hyp.score < rot.score):
            continue
        if np.linalg.norm(hyp.T_rel.t) < 1e-12:
            continue
        res = _scale_and_gate(kf_id, current_id, corr, hyp, rot, params)
        if res is None:
            continue
        if best is None or res.hypothesis.beats(best.hypothesis):
            best = res
    if best is None:
        raise NoAcceptableHypothesis("rotation-only explains the correspondences or parallax too small")
    return best


def _scale_and_gate(kf_id, current_id, corr, hyp, rot, params) -> Optional[InitResult]:
    R, t = hyp.T_rel.R, hyp.T_rel.t
    idx = np.flatnonzero(hyp.inliers)
    n = len(idx)
    d = triangulate_many(corr.b_key[idx], corr.b_cur[idx], np.broadcast_to(R, (n, 3, 3)),
                         np.broadcast_to(t, (n, 3)), min_baseline=1e-9)
    finite = np.isfinite(d) & (d > 0)
    if np.count_nonzero(finite) < params.min_landmarks:
        return None
    scale = params.mean_distance / float(np.mean(1.0 / d[finite]))
    baseline = scale * float(np.linalg.norm(t))
    alpha = parallax_angle(baseline, params.mean_distance)
    if not alpha > params.min_parallax_deg:
        return None
    landmarks = {}
    for j, i in enumerate(idx):
        if np.isnan(d[j]):
            continue
        landmarks[int(corr.ids[i])] = (corr.b_key[i].copy(), float(d[j] / scale))
    return InitResult(True, (kf_id, current_id), Pose(R, t * scale), landmarks, alpha, baseline, hyp, rot)
