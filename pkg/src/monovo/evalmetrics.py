"""Trajectory evaluation: scale-free relative pose error, similarity alignment,
relative scale series and tracking statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .geometry import Pose, interpolate
from .simworld import OutOfRange

SKIP_EPS = 1e-9


class NoOverlap(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


@dataclass
class Trajectory:
    """World-from-camera poses at strictly increasing timestamps."""

    stamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.stamps) != len(self.poses):
            raise ValueError("stamps and poses differ in length")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.stamps)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx, dtype=int)
        return Trajectory(self.stamps[idx], [self.poses[i] for i in idx])

    def transformed(self, scale: float = 1.0, R: Optional[np.ndarray] = None,
                    t: Optional[np.ndarray] = None) -> "Trajectory":
        """Apply ``x -> scale * R x + t`` to every pose (rotations get ``R`` on the left)."""
        R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        t = np.zeros(3) if t is None else np.asarray(t, dtype=float)
        return Trajectory(self.stamps, [Pose(R @ p.R, scale * (R @ p.t) + t) for p in self.poses])


@dataclass
class RpeConfig:
    delta: float = 4.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass
class RpeStats:
    rms: float
    n_pairs: int
    n_skipped: int
    stamps: np.ndarray  # timestamps of the evaluated pairs
    scales: np.ndarray  # per-pair scale factor
    errors: np.ndarray  # per-pair translation error after rescaling


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    st = traj.stamps
    if len(st) == 0 or t < st[0] or t > st[-1]:
        raise OutOfRange(f"t={t} outside the trajectory's time range")
    k = int(np.searchsorted(st, t))
    if st[k] == t:
        return traj.poses[k]
    s = (t - st[k - 1]) / (st[k] - st[k - 1])
    return interpolate(traj.poses[k - 1], traj.poses[k], s)


def _relative_pairs(gt: Trajectory, est: Trajectory, delta: float):
    if len(gt) == 0 or len(est) == 0:
        raise NoOverlap("empty trajectory")
    t_start = est.stamps[0] + delta
    lo = max(gt.stamps[0] + delta, est.stamps[0] + delta)
    hi = gt.stamps[-1]
    out = []
    for k, t in enumerate(est.stamps):
        # tiny tolerance so "first delta seconds" is not lost to rounding of the stamps
        if t < t_start - 1e-9 or t < lo - 1e-9 or t > hi:
            continue
        t0 = max(t - delta, est.stamps[0], gt.stamps[0])
        dQ = interpolate_pose(gt, t0).inverse() @ interpolate_pose(gt, t)
        dT = interpolate_pose(est, t0).inverse() @ est.poses[k]
        out.append((t, dQ.t, dT.t))
    if not out:
        raise NoOverlap("no timestamp pair spans delta inside both trajectories")
    return out


def rpe_stats(gt: Trajectory, est: Trajectory, cfg: RpeConfig = RpeConfig()) -> RpeStats:
    """Relative pose error with the per-pair scale removed.

    Pairs whose estimated relative translation is shorter than ``SKIP_EPS`` are
    skipped and counted; the scale factor is undefined there.
    """
    stamps, scales, errors = [], [], []
    skipped = 0
    for t, q, p in _relative_pairs(gt, est, cfg.delta):
        npn = float(np.linalg.norm(p))
        if npn < SKIP_EPS:
            skipped += 1
            continue
        s = float(np.linalg.norm(q)) / npn
        stamps.append(t)
        scales.append(s)
        errors.append(float(np.linalg.norm(s * p - q)))
    e = np.asarray(errors)
    rms = float(np.sqrt(np.mean(e**2))) if len(e) else math.nan
    return RpeStats(rms, len(e), skipped, np.asarray(stamps), np.asarray(scales), e)


def rms_rpe(gt: Trajectory, est: Trajectory, cfg: RpeConfig = RpeConfig()) -> float:
    return rpe_stats(gt, est, cfg).rms


def relative_scale_series(gt: Trajectory, est: Trajectory, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair scale factors ``|dQ| / |dT|`` as ``(stamps, s)``."""
    r = rpe_stats(gt, est, RpeConfig(delta))
    return r.stamps, r.scales


def associate(gt: Trajectory, est: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth positions interpolated at the estimate's stamps, plus those estimate positions."""
    keep = [k for k, t in enumerate(est.stamps) if gt.stamps[0] <= t <= gt.stamps[-1]]
    G = np.array([interpolate_pose(gt, est.stamps[k]).t for k in keep]).reshape(-1, 3)
    P = np.array([est.poses[k].t for k in keep]).reshape(-1, 3)
    return G, P


def umeyama(P: np.ndarray, G: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity ``(s, R, t)`` minimizing ``sum |s R p + t - g|^2``."""
    P = np.asarray(P, dtype=float)
    G = np.asarray(G, dtype=float)
    if len(P) < 3:
        raise DegenerateGeometry("need at least three correspondences")
    mp, mg = P.mean(axis=0), G.mean(axis=0)
    X, Y = P - mp, G - mg
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateGeometry("estimated positions are coincident or collinear")
    U, S, Vt = np.linalg.svd(Y.T @ X / len(P))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var_p = float(np.sum(X**2)) / len(P)
    s = float(np.trace(np.diag(S) @ D)) / var_p
    return s, R, mg - s * R @ mp


def sim3_align(gt: Trajectory, est: Trajectory, window: Optional[slice] = None):
    """Align ``est`` onto ``gt`` over the estimate samples selected by ``window``."""
    sub = est if window is None else est.subset(np.arange(len(est))[window])
    G, P = associate(gt, sub)
    return umeyama(P, G)


def aligned_rms(gt: Trajectory, est: Trajectory) -> float:
    """Position RMS after a full-trajectory similarity alignment."""
    G, P = associate(gt, est)
    s, R, t = umeyama(P, G)
    res = G - (s * P @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


# ---------------------------------------------------------------- status logs

def _field(row, name):
    return row[name] if isinstance(row, dict) else getattr(row, name)


def segments(status_rows: Sequence) -> list[tuple[int, int]]:
    """Half-open row ranges of continuously tracked stretches.

    A new stretch starts at every reset, whether tracking was lost or the map
    was re-initialized; both give the trajectory a new, unrelated scale.
    """
    out = []
    start = 0
    for k, row in enumerate(status_rows):
        if k > start and str(_field(row, "reset")) != "none":
            out.append((start, k))
            start = k
    if len(status_rows):
        out.append((start, len(status_rows)))
    return out


def longest_segment(status_rows: Sequence) -> tuple[int, int]:
    segs = segments(status_rows)
    if not segs:
        return (0, 0)
    return max(segs, key=lambda s: (s[1] - s[0], -s[0]))


@dataclass
class TrackingStats:
    longest_fraction: float
    failure_count: int

    @property
    def longest_percent(self) -> int:
        return int(round(100.0 * self.longest_fraction))


def tracking_stats(status_rows: Sequence, total_frames: Optional[int] = None) -> TrackingStats:
    """Longest continuously tracked fraction and the number of tracking failures."""
    n = len(status_rows) if total_frames is None else int(total_frames)
    failures = sum(1 for r in status_rows if str(_field(r, "reset")) == "lost")
    a, b = longest_segment(status_rows)
    frac = (b - a) / n if n > 0 else 0.0
    return TrackingStats(frac, failures)


# ---------------------------------------------------------------- drift signal

def scale_drift_rate(stamps: np.ndarray, scales: np.ndarray, window: float) -> np.ndarray:
    """``|d ln s / dt|`` from a local least-squares slope over ``window`` seconds."""
    stamps = np.asarray(stamps, dtype=float)
    ls = np.log(np.asarray(scales, dtype=float))
    out = np.full(len(stamps), np.nan)
    for k, t in enumerate(stamps):
        m = np.abs(stamps - t) <= 0.5 * window
        if np.count_nonzero(m) < 3:
            continue
        tt = stamps[m] - t
        if np.ptp(tt) <= 0:
            continue
        out[k] = abs(np.polyfit(tt, ls[m], 1)[0])
    return out


def sample_series(stamps: np.ndarray, values: np.ndarray, at: Iterable[float]) -> np.ndarray:
    """Linear interpolation of a series; ``nan`` outside its range or at missing values."""
    stamps = np.asarray(stamps, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values)
    stamps, values = stamps[ok], values[ok]
    at = np.asarray(list(at), dtype=float)
    out = np.full(len(at), np.nan)
    if len(stamps) == 0:
        return out
    inside = (at >= stamps[0]) & (at <= stamps[-1])
    out[inside] = np.interp(at[inside], stamps, values)
    return out


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    if np.count_nonzero(ok) < 3:
        return math.nan
    return float(spearmanr(a[ok], b[ok]).statistic)
