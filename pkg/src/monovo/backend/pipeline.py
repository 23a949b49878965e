"""Per-frame odometry loop: tracking, keyframes, initialization and sub-map resets."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..camera import Landmark, PinholeCamera, triangulate_many, unproject
from ..geometry import Pose, SingularBlock, inverse
from ..initializer import (CorrespondenceSet, InitParams, InitResult, NoAcceptableHypothesis,
                           attempt_initialization)
from .marginalization import marginalize_oldest
from .problem import SolverDiverged, gauss_newton_solve
from .tracking import KeyframePolicyState, TrackingLost, keyframe_decision, track_frame
from .window import BackendParams, Keyframe, OptimizationWindow, ScaleFix

log = logging.getLogger(__name__)

ROTATION_ONLY = "rotation_only"
MAPPED = "mapped"


@dataclass
class FrameStatus:
    frame_id: int
    timestamp: float
    submap: int
    state: str
    n_active_landmarks: int
    entropy: float
    keyframe: bool
    reset: str = "none"  # "lost" after a tracking failure, "reinit" for a new map

    def row(self) -> dict:
        return {"frame_id": self.frame_id, "timestamp": self.timestamp, "submap": self.submap,
                "state": self.state, "n_active_landmarks": self.n_active_landmarks,
                "entropy": self.entropy, "keyframe": int(self.keyframe), "reset": self.reset}


@dataclass
class _Snapshot:
    frame_id: int
    timestamp: float
    pose: Pose
    obs: dict
    is_keyframe: bool


def _obs_dict(frame) -> dict:
    return {int(t): (np.asarray(uv, dtype=float), int(c)) for t, uv, c in zip(frame.track_ids, frame.uv, frame.levels)}


class Odometry:
    """Monocular fixed-lag odometry over a stream of ``FrameBundle``-like frames."""

    def __init__(self, cam: PinholeCamera, params: Optional[BackendParams] = None,
                 init_params: Optional[InitParams] = None, rng: Optional[np.random.Generator] = None,
                 drift_every_frame: bool = False, record_snapshots: bool = False):
        self.cam = cam
        self.params = params or BackendParams()
        self.params.validate()
        self.init_params = init_params or InitParams()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.drift_every_frame = drift_every_frame
        self.record_snapshots = record_snapshots
        self.window: Optional[OptimizationWindow] = None
        self.policy = KeyframePolicyState(self.params.threshold_ratio)
        self.submap = 0
        self.mapped = False
        self.next_kf_id = 0
        self.last_pose = Pose.identity()
        self.prev: Optional[_Snapshot] = None
        # recent tracked frames of the current sub-map, for triangulating new landmarks
        self.history: deque = deque(maxlen=self.params.history_frames)
        self.trajectory: list = []  # (timestamp, pose)
        self.status: list = []
        self.drift: list = []  # (timestamp, DriftReport)
        self.snapshots: list = []
        self.solver_failures = 0
        self._frame_count = 0

    # ------------------------------------------------------------ helpers

    def _new_kf(self, frame_id, timestamp, pose, obs) -> Keyframe:
        kf = Keyframe(self.next_kf_id, timestamp, pose, obs, frame_id)
        self.next_kf_id += 1
        return kf

    def _start_window(self, frame_id, timestamp, obs, pose) -> None:
        w = OptimizationWindow(self.cam, self.params)
        kf = self._new_kf(frame_id, timestamp, pose, obs)
        w.keyframes.append(kf)
        for tid, (uv, lev) in obs.items():
            w.landmarks[tid] = Landmark(kf.id, unproject(self.cam, uv), 0.0, lev)
        w.anchor(kf.id)
        self.window = w
        self.history.clear()
        self.mapped = False
        self.policy.reset()

    def _solve(self, window: OptimizationWindow) -> OptimizationWindow:
        try:
            window, _ = gauss_newton_solve(window, self.params.ba_iters)
        except SolverDiverged as e:
            log.warning("bundle adjustment: %s", e)
            self.solver_failures += 1
        self._demote_without_parallax(window)
        return window

    def _demote_without_parallax(self, window: OptimizationWindow) -> None:
        """Send landmarks back to infinity when no keyframe pair gives them parallax.

        Bundle adjustment otherwise fits the inverse distance of a point seen
        from (nearly) one position to noise.
        """
        p = self.params
        poses = {kf.id: kf.pose for kf in window.keyframes}
        cos_max = math.cos(math.radians(p.min_angle_deg))
        checked, parallax = set(), set()
        for kf in window.keyframes:
            tids = [t for t in kf.obs if t in window.landmarks]
            lms = [window.landmarks[t] for t in tids]
            pick = [k for k, lm in enumerate(lms) if lm.inv_dist > 0 and lm.host != kf.id]
            if not pick:
                continue
            hosts = [poses[lms[k].host] for k in pick]
            B = np.array([lms[k].bearing for k in pick])
            bo = unproject(self.cam, np.array([kf.obs[tids[k]][0] for k in pick]))
            R = np.array([kf.pose.R.T @ h.R for h in hosts])
            base = np.array([np.linalg.norm(h.t - kf.pose.t) for h in hosts])
            cosang = np.einsum("nij,nj,ni->n", R, B, bo) / np.linalg.norm(bo, axis=1)
            ok = (base >= p.min_baseline) & (cosang <= cos_max)
            checked.update(tids[k] for k in pick)
            parallax.update(tids[k] for k, good in zip(pick, ok) if good)
        for t in checked - parallax:
            window.landmarks[t].inv_dist = 0.0

    def _track(self, obs: dict, guess: Pose, fix_translation: bool):
        ids = list(obs)
        uv = np.array([obs[t][0] for t in ids]).reshape(-1, 2)
        lev = np.array([obs[t][1] for t in ids], dtype=int)
        return track_frame(self.window, ids, uv, lev, guess, fix_translation)

    def _n_finite(self, obs: dict) -> int:
        lms = self.window.landmarks
        return sum(1 for t in obs if t in lms and lms[t].inv_dist > 0)

    def _triangulate(self, host_pose: Pose, bearings: np.ndarray, other_pose: Pose, other_uv: np.ndarray) -> np.ndarray:
        T = inverse(other_pose) @ host_pose
        n = len(bearings)
        return triangulate_many(bearings, unproject(self.cam, other_uv), np.broadcast_to(T.R, (n, 3, 3)),
                                np.broadcast_to(T.t, (n, 3)), self.params.min_baseline, self.params.min_angle_deg)

    # ------------------------------------------------------------ keyframes

    def insert_keyframe(self, snap: _Snapshot, partner: Optional[_Snapshot]) -> Keyframe:
        """Make ``snap`` a keyframe hosting every track it sees that is not yet a landmark.

        New landmarks are triangulated against the recent tracked frames (and
        ``partner``, the frame after ``snap``) that also saw them, using the one
        with the widest ray angle; without enough parallax they start at infinity.
        """
        w = self.window
        kf = self._new_kf(snap.frame_id, snap.timestamp, snap.pose, snap.obs)
        w.keyframes.append(kf)
        # a new keyframe observation is a new chance for points still at infinity
        self._retriangulate(snap.obs, snap.pose)
        new = [t for t in snap.obs if t not in w.landmarks]
        if not new:
            return kf
        bear = unproject(self.cam, np.array([snap.obs[t][0] for t in new]))
        d = np.zeros(len(new))
        best_cos = np.ones(len(new))
        others = [h for h in self.history if h.frame_id != snap.frame_id]
        if partner is not None:
            others.append(partner)
        for other in others:
            both = [k for k, t in enumerate(new) if t in other.obs]
            if not both:
                continue
            uv = np.array([other.obs[new[k]][0] for k in both])
            dd = self._triangulate(snap.pose, bear[both], other.pose, uv)
            R = other.pose.R.T @ snap.pose.R
            bo = unproject(self.cam, uv)
            cosang = np.einsum("ij,nj,ni->n", R, bear[both], bo) / np.linalg.norm(bo, axis=1)
            for k, dk, ck in zip(both, dd, cosang):
                if np.isfinite(dk) and dk > 0 and ck < best_cos[k]:
                    d[k], best_cos[k] = dk, ck
        for k, t in enumerate(new):
            w.landmarks[t] = Landmark(kf.id, bear[k], float(d[k]), snap.obs[t][1])
        return kf

    def _maintain_window(self, live: set) -> None:
        self.window = self._solve(self.window)
        while len(self.window.keyframes) > self.params.n_max:
            try:
                self.window = marginalize_oldest(self.window, live)
            except SingularBlock as e:
                log.warning("marginalization skipped a singular block: %s", e)
                w = self.window
                w.keyframes = w.keyframes[1:]
                ids = {kf.id for kf in w.keyframes}
                w.landmarks = {t: lm for t, lm in w.landmarks.items() if lm.host in ids}
                w.anchor(w.keyframes[0].id)
                if w.scale_fix is not None and not {w.scale_fix.i, w.scale_fix.j} <= ids:
                    w.scale_fix = None

    def _record_drift(self, timestamp: float) -> None:
        if not self.mapped or len(self.window.keyframes) < 2:
            return
        from ..driftmeter import compute_drift, snapshot_to_dict
        try:
            self.drift.append((timestamp, compute_drift(self.window)))
        except (SingularBlock, np.linalg.LinAlgError) as e:
            log.warning("drift estimate failed: %s", e)
            return
        if self.record_snapshots:
            self.snapshots.append(snapshot_to_dict(self.window, timestamp))

    # ------------------------------------------------------------ initialization

    def _correspondences(self, obs: dict) -> list:
        out = []
        for kf in self.window.keyframes:
            shared = [t for t in kf.obs if t in obs]
            if len(shared) < 5:
                continue
            bk = unproject(self.cam, np.array([kf.obs[t][0] for t in shared]))
            bc = unproject(self.cam, np.array([obs[t][0] for t in shared]))
            out.append((kf.id, CorrespondenceSet(shared, bk, bc, 0.5 * (self.cam.fx + self.cam.fy))))
        return out

    def _initialize(self, res: InitResult, frame_id, timestamp, obs) -> Pose:
        old = self.window
        kf_k = old.keyframe(res.frames[0])
        w = OptimizationWindow(self.cam, self.params)
        k = Keyframe(kf_k.id, kf_k.timestamp, kf_k.pose, kf_k.obs, kf_k.frame_index)
        pose = kf_k.pose @ inverse(res.T_rel)
        cur = self._new_kf(frame_id, timestamp, pose, obs)
        w.keyframes = [k, cur]
        for t, (uv, lev) in k.obs.items():
            if t in res.landmarks:
                b, d = res.landmarks[t]
                w.landmarks[t] = Landmark(k.id, b, d, lev)
            else:
                w.landmarks[t] = Landmark(k.id, unproject(self.cam, uv), 0.0, lev)
        for t, (uv, lev) in obs.items():
            if t not in w.landmarks:
                w.landmarks[t] = Landmark(cur.id, unproject(self.cam, uv), 0.0, lev)
        w.anchor(k.id)
        w.scale_fix = ScaleFix(k.id, cur.id, res.baseline, self.params.w_scalefix)
        self.window = self._solve(w)
        self.history.clear()
        self.mapped = True
        self.policy.reset()
        return self.window.keyframes[-1].pose

    def _retriangulate(self, obs: dict, pose: Pose) -> None:
        w = self.window
        cand = [t for t in obs if t in w.landmarks and w.landmarks[t].inv_dist == 0.0]
        if not cand:
            return
        hosts = {kf.id: kf.pose for kf in w.keyframes}
        for host in sorted({w.landmarks[t].host for t in cand}):
            ts = [t for t in cand if w.landmarks[t].host == host]
            bear = np.array([w.landmarks[t].bearing for t in ts])
            d = self._triangulate(hosts[host], bear, pose, np.array([obs[t][0] for t in ts]))
            for t, dd in zip(ts, d):
                if np.isfinite(dd) and dd > 0:
                    w.landmarks[t].inv_dist = float(dd)

    # ------------------------------------------------------------ main loop

    def process(self, frame) -> FrameStatus:
        fid = self._frame_count
        self._frame_count += 1
        ts = float(frame.timestamp)
        obs = _obs_dict(frame)

        if self.window is None:
            self._start_window(fid, ts, obs, self.last_pose)
            return self._finish(fid, ts, obs, self.last_pose, ROTATION_ONLY, len(obs), math.nan, True, "none")

        fix_t = self._n_finite(obs) < self.params.min_finite_obs
        try:
            tr = self._track(obs, self.last_pose, fix_t)
        except TrackingLost as e:
            log.info("frame %d: tracking lost (%s); starting a new sub-map", fid, e)
            self.submap += 1
            self._start_window(fid, ts, obs, self.last_pose)
            return self._finish(fid, ts, obs, self.last_pose, ROTATION_ONLY, 0, math.nan, True, "lost")

        pose = tr.pose
        entropy = tr.entropy
        is_kf = False
        wanted = keyframe_decision(self.policy, entropy) is not None
        # safety net for a nearly exhausted map, where ln det hardly moves any more
        if (self.mapped and not fix_t and tr.n_finite < self.params.min_active_landmarks
                and self.policy.n_frames >= self.params.min_active_gap):
            wanted = True
        if wanted:
            prev = self.prev
            cur = _Snapshot(fid, ts, pose, obs, False)
            use_prev = self.params.previous_frame_rule and prev is not None and not prev.is_keyframe
            if use_prev:
                self.insert_keyframe(prev, cur)
                self.status[-1].keyframe = True
            else:
                self.insert_keyframe(cur, None)
                is_kf = True
            self._maintain_window(set(obs))
            if is_kf:
                pose = self.window.keyframes[-1].pose
            else:
                try:
                    tr = self._track(obs, pose, self._n_finite(obs) < self.params.min_finite_obs)
                    pose = tr.pose
                    entropy = tr.entropy
                except TrackingLost:
                    pass
            self.policy.reset()
            if use_prev:
                self.policy.add(entropy)
            self._record_drift(ts)

        reset = "none"
        n_finite = self._n_finite(obs)
        state = MAPPED if self.mapped and n_finite >= self.params.min_finite_obs else ROTATION_ONLY
        if n_finite < self.params.min_finite_obs:
            try:
                res = attempt_initialization(self._correspondences(obs), -1, self.init_params, self.rng, n_finite)
            except NoAcceptableHypothesis:
                res = None
            if res is not None:
                if self.mapped:
                    self.submap += 1
                    reset = "reinit"
                pose = self._initialize(res, fid, ts, obs)
                is_kf = True
                state = MAPPED
                self._record_drift(ts)
        elif self.mapped and self.params.retriangulate_every_frame:
            self._retriangulate(obs, pose)

        if self.drift_every_frame and not is_kf:
            self._record_drift(ts)
        return self._finish(fid, ts, obs, pose, state, tr.n_active, entropy, is_kf, reset)

    def _finish(self, fid, ts, obs, pose, state, n_active, entropy, is_kf, reset) -> FrameStatus:
        self.last_pose = pose
        self.prev = _Snapshot(fid, ts, pose, obs, is_kf)
        self.history.append(self.prev)
        self.trajectory.append((ts, pose))
        st = FrameStatus(fid, ts, self.submap, state, int(n_active), float(entropy), is_kf, reset)
        self.status.append(st)
        return st

    def run(self, frames) -> "Odometry":
        for fr in frames:
            self.process(fr)
        return self
