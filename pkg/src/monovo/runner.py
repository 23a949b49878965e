"""Library side of the command line: simulate, run and evaluate a configured experiment."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backend.pipeline import MAPPED, Odometry
from .camera import PinholeCamera
from .config import RunConfig
from .evalmetrics import (Trajectory, interpolate_pose, longest_segment, relative_scale_series, rpe_stats,
                          RpeConfig, sample_series, scale_drift_rate, spearman, tracking_stats)
from .simworld import FrameBundle, simulate_sequence, substream


def simulate(cfg: RunConfig) -> tuple[PinholeCamera, list[FrameBundle]]:
    cam = cfg.camera.build()
    return cam, simulate_sequence(cfg.trajectory, cfg.scene, cfg.noise, cam, cfg.seed)


def run_odometry(cfg: RunConfig, cam: PinholeCamera, frames: Sequence, record_snapshots: bool = False) -> Odometry:
    odo = Odometry(cam, cfg.backend, cfg.init, rng=substream(cfg.seed, "ransac"),
                   record_snapshots=record_snapshots)
    return odo.run(frames)


def ground_truth(frames: Sequence[FrameBundle]) -> Trajectory:
    return Trajectory([f.timestamp for f in frames], [f.true_pose for f in frames])


def evaluated_part(stamps: Sequence[float], poses: Sequence, status_rows: Sequence[dict]) -> Trajectory:
    """Mapped frames of the longest continuously tracked stretch.

    Frames tracked before a map exists have no translation estimate, and
    different stretches have unrelated scales.
    """
    a, b = longest_segment(status_rows)
    idx = [k for k in range(a, b) if str(status_rows[k]["state"]) == MAPPED]
    return Trajectory([stamps[k] for k in idx], [poses[k] for k in idx])


def _num(x: float) -> Optional[float]:
    return None if x is None or not math.isfinite(x) else float(x)


def metrics(gt: Trajectory, est_stamps, est_poses, status_rows: Sequence[dict], delta: float) -> dict:
    est = evaluated_part(est_stamps, est_poses, status_rows)
    ts = tracking_stats(status_rows)
    out = {"delta": float(delta), "longest_fraction": ts.longest_fraction,
           "longest_percent": ts.longest_percent, "failure_count": ts.failure_count}
    r = rpe_stats(gt, est, RpeConfig(delta))
    out.update(rms_rpe=_num(r.rms), n_pairs=r.n_pairs, n_skipped=r.n_skipped)
    return out


@dataclass
class DriftSeries:
    """Per-sample altitude, relative scale, ``Lambda`` and ground-truth drift rate."""

    stamps: np.ndarray
    altitude: np.ndarray
    scale: np.ndarray
    Lambda: np.ndarray
    drift_rate: np.ndarray

    def rows(self) -> list[dict]:
        return [{"timestamp": float(t), "altitude": float(a), "s_t": float(s), "Lambda": float(L),
                 "drift_rate": float(r)}
                for t, a, s, L, r in zip(self.stamps, self.altitude, self.scale, self.Lambda, self.drift_rate)]


def drift_series(gt: Trajectory, est: Trajectory, drift_stamps, drift_values, delta: float,
                 scale_delta: float, drift_window: float) -> DriftSeries:
    """Everything sampled at the drift estimates that fall inside the evaluated stretch."""
    st, s = relative_scale_series(gt, est, delta)
    fst, fs = relative_scale_series(gt, est, scale_delta)
    rate = scale_drift_rate(fst, fs, drift_window)
    lt = np.asarray(drift_stamps, dtype=float)
    L = np.asarray(drift_values, dtype=float)
    keep = (lt >= est.stamps[0]) & (lt <= est.stamps[-1])
    lt, L = lt[keep], L[keep]
    alt = np.array([interpolate_pose(gt, t).t[2] for t in lt])
    return DriftSeries(lt, alt, sample_series(st, s, lt), L, sample_series(fst, rate, lt))


@dataclass
class DriftCheck:
    spearman: float
    peak_lambda: float
    low_lambda: float

    @property
    def ratio(self) -> float:
        return self.peak_lambda / self.low_lambda if self.low_lambda > 0 else math.nan


def drift_check(series: DriftSeries, band: float = 0.1) -> DriftCheck:
    """Rank correlation of ``Lambda`` with the drift rate, and ``Lambda`` near the top vs. the bottom.

    "Near" means within ``band`` of the altitude range from the extreme; the
    median of those samples is used.
    """
    ok = np.isfinite(series.Lambda)
    alt, L = series.altitude[ok], series.Lambda[ok]
    lo, hi = float(alt.min()), float(alt.max())
    span = max(hi - lo, 1e-12)
    peak = float(np.median(L[alt >= hi - band * span]))
    low = float(np.median(L[alt <= lo + band * span]))
    return DriftCheck(spearman(series.Lambda, series.drift_rate), peak, low)
