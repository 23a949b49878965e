"""State of the fixed-lag smoother."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..camera import Landmark, PinholeCamera
from ..geometry import Pose


@dataclass
class BackendParams:
    n_max: int = 7
    threshold_ratio: float = 0.95
    huber_delta: float = 1.5
    pixel_sigma: float = 1.0
    w_scalefix: float = 1e4
    w_inf: float = 1e-4
    anchor_weight: float = 1e8
    min_baseline: float = 0.02
    min_angle_deg: float = 3.0
    track_iters: int = 10
    ba_iters: int = 20
    previous_frame_rule: bool = True
    # also triangulate points at infinity against ordinary tracked frames
    retriangulate_every_frame: bool = False
    # tracked frames remembered for triangulating the landmarks of a new keyframe
    history_frames: int = 30
    min_finite_obs: int = 5
    # also insert a keyframe once fewer triangulated landmarks are tracked
    min_active_landmarks: int = 0
    min_active_gap: int = 5  # frames since the last keyframe before that rule may fire
    min_inliers: int = 5
    min_inliers_rotation: int = 2
    # landmarks whose host block is this ill-conditioned are left out of a marginalization
    marg_max_condition: float = 1e10

    def validate(self) -> None:
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if not 0.0 < self.threshold_ratio < 1.0:
            raise ValueError("threshold_ratio must lie in (0, 1)")
        for name in ("huber_delta", "pixel_sigma", "w_scalefix", "w_inf", "anchor_weight",
                     "min_baseline"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.track_iters < 1 or self.ba_iters < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class Keyframe:
    id: int
    timestamp: float
    pose: Pose  # world-from-keyframe
    obs: dict  # track id -> (uv ndarray, level)
    frame_index: int = -1


@dataclass
class MarginalizationPrior:
    kf_ids: list
    H: np.ndarray
    b: np.ndarray
    lin_poses: list

    def copy(self) -> "MarginalizationPrior":
        return MarginalizationPrior(list(self.kf_ids), self.H.copy(), self.b.copy(), list(self.lin_poses))


@dataclass
class ScaleFix:
    i: int
    j: int
    t_init: float
    weight: float


@dataclass
class OptimizationWindow:
    cam: PinholeCamera
    params: BackendParams
    keyframes: list = field(default_factory=list)
    landmarks: dict = field(default_factory=dict)  # track id -> Landmark
    prior: Optional[MarginalizationPrior] = None
    scale_fix: Optional[ScaleFix] = None
    current_pose: Optional[Pose] = None

    def kf_index(self) -> dict:
        return {kf.id: k for k, kf in enumerate(self.keyframes)}

    def keyframe(self, kf_id: int) -> Keyframe:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(kf_id)

    @property
    def observations(self) -> dict:
        """``(landmark id, keyframe id) -> (uv, level)`` for every landmark seen by a window keyframe."""
        out = {}
        for kf in self.keyframes:
            for tid, o in kf.obs.items():
                if tid in self.landmarks:
                    out[(tid, kf.id)] = o
        return out

    def copy(self) -> "OptimizationWindow":
        return copy.deepcopy(self)

    def shallow_copy(self) -> "OptimizationWindow":
        """Copy poses and landmarks; observation dictionaries are shared."""
        kfs = [dataclasses.replace(kf) for kf in self.keyframes]
        lms = {tid: Landmark(lm.host, lm.bearing.copy(), lm.inv_dist, lm.level)
               for tid, lm in self.landmarks.items()}
        return dataclasses.replace(self, keyframes=kfs, landmarks=lms)

    def anchor(self, kf_id: int) -> None:
        """Replace the prior with a strong 6-dof anchor on one keyframe."""
        kf = self.keyframe(kf_id)
        self.prior = MarginalizationPrior([kf_id], self.params.anchor_weight * np.eye(6), np.zeros(6), [kf.pose])

    def check(self) -> None:
        ids = [kf.id for kf in self.keyframes]
        if len(set(ids)) != len(ids) or ids != sorted(ids):
            raise AssertionError("keyframe ids must be unique and increasing")
        for tid, lm in self.landmarks.items():
            if lm.host not in ids:
                raise AssertionError(f"landmark {tid} hosted by a missing keyframe")
            if lm.inv_dist < 0:
                raise AssertionError("negative inverse distance")
