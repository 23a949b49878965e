"""Removing the oldest keyframe from the window into the prior."""
from __future__ import annotations

import numpy as np

from ..camera import Landmark
from ..geometry import SymmetricBlockMatrix, schur_marginalize
from .problem import infinity_pairs, linearize
from .window import MarginalizationPrior, OptimizationWindow


def transfer_host(window: OptimizationWindow, tid: int, new_host: int) -> None:
    """Re-anchor a landmark in another keyframe, keeping the represented point."""
    lm = window.landmarks[tid]
    T_old = window.keyframe(lm.host).pose
    T_new = window.keyframe(new_host).pose
    T = T_new.inverse() @ T_old
    q = T.R @ lm.bearing + T.t * lm.inv_dist
    nq = float(np.linalg.norm(q))
    window.landmarks[tid] = Landmark(new_host, q / nq, lm.inv_dist / nq, lm.level)


def _well_conditioned(Hll: np.ndarray, max_condition: float) -> np.ndarray:
    ev = np.linalg.eigvalsh(Hll)
    return (ev[:, 0] > 0) & (ev[:, -1] <= max_condition * np.maximum(ev[:, 0], 1e-300))


def marginalize_oldest(window: OptimizationWindow, live_tracks=frozenset()) -> OptimizationWindow:
    """Fold the oldest keyframe into the marginalization prior.

    Landmarks it hosts are handled by status: still-tracked ones seen elsewhere
    are re-hosted in their oldest other observer, finished ones seen elsewhere are
    marginalized together with all their observations, and the rest are dropped.
    Observations made in the removed keyframe of landmarks hosted elsewhere are
    discarded.
    """
    w = window.copy()
    m = w.keyframes[0]
    others = w.keyframes[1:]
    live = set(live_tracks)
    to_marg, to_drop, to_transfer = [], [], []
    for tid, lm in w.landmarks.items():
        if lm.host != m.id:
            continue
        observers = [kf.id for kf in others if tid in kf.obs]
        if not observers:
            to_drop.append(tid)
        elif tid in live:
            to_transfer.append((tid, observers[0]))
        else:
            to_marg.append(tid)

    to_marg = sorted(to_marg)
    if to_marg:
        probe = linearize(w, to_marg, use_prior=False, use_scale_fix=False, inf_pairs=[])
        ok = _well_conditioned(probe.Hll, w.params.marg_max_condition)
        to_drop += [t for t, good in zip(to_marg, ok) if not good]
        to_marg = [t for t, good in zip(to_marg, ok) if good]

    sf = w.scale_fix
    sf_touches = sf is not None and m.id in (sf.i, sf.j)
    pairs = [(i, j) for i, j in infinity_pairs(w) if i == 0]
    lin = linearize(w, to_marg, use_scale_fix=sf_touches, inf_pairs=pairs)
    H, b = lin.dense()
    K = len(w.keyframes)
    L = len(to_marg)
    blocks = SymmetricBlockMatrix(H, [6] * K + [3] * L)
    H1, b1 = schur_marginalize(blocks, b, list(range(K)), diagonal_blocks=True)
    H2, b2 = schur_marginalize(H1, b1, list(range(1, K)))

    for tid, new_host in to_transfer:
        transfer_host(w, tid, new_host)
    for tid in to_marg + to_drop:
        del w.landmarks[tid]
    w.keyframes = others
    if sf_touches:
        w.scale_fix = None
    w.prior = MarginalizationPrior([kf.id for kf in others], H2.matrix, b2, [kf.pose for kf in others])
    return w
