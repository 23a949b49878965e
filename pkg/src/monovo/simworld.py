"""Deterministic synthetic front-end.

Stands in for an image-domain KLT tracker: a camera follows an analytic
trajectory over a random landmark cloud and every frame emits the surviving
feature tracks as noisy pixel observations, each tagged with the pyramid level
the track was born on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .camera import PinholeCamera, PixelObservation, project_many
from .geometry import Pose, exp_so3, interpolate

# named random sub-streams derived from one seed
STREAMS = {"scene": 0, "noise": 1, "ransac": 2}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))


class OutOfRange(ValueError):
    pass


@dataclass
class TrajectorySpec:
    kind: str = "spiral"
    duration: float = 60.0
    rate: float = 10.0
    # spiral
    radius: float = 10.0
    angular_rate: float = 0.1
    ascent_rate: float = 0.5
    peak_time: Optional[float] = None
    pitch_deg: float = -90.0
    # pure rotation
    axis: tuple = (0.0, 1.0, 0.0)
    total_angle: float = math.pi
    position: tuple = (0.0, 0.0, 0.0)
    # orientation at t=0 as a rotation vector; the default looks straight down
    base_rotation: tuple = (math.pi, 0.0, 0.0)
    # waypoints: list of (time, Pose)
    waypoints: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("spiral", "pure_rotation", "waypoints"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.peak_time is None:
            self.peak_time = 0.5 * self.duration
        if not 0 <= self.peak_time <= self.duration:
            raise ValueError("peak_time must lie within the duration")
        if self.kind == "waypoints":
            if len(self.waypoints) < 2:
                raise ValueError("waypoint trajectories need at least two waypoints")
            times = [w[0] for w in self.waypoints]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("waypoint times must increase")

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.rate + 1e-9)) + 1


@dataclass
class SceneSpec:
    n_landmarks: int = 10000
    volume: tuple = ((-35.0, -35.0, -7.0), (35.0, 35.0, -5.0))
    far_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_landmarks < 0:
            raise ValueError("n_landmarks must be non-negative")
        if not 0.0 <= self.far_fraction <= 1.0:
            raise ValueError("far_fraction must lie in [0, 1]")


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.0
    dropout_prob: float = 0.0
    frame_drop: list = field(default_factory=list)
    track_kill_prob: float = 0.0
    level_assignment: tuple = (1.0,)
    # tracker emulation
    max_tracks: int = 150
    drop_track_loss: float = 0.0
    border_px: float = 2.0

    def __post_init__(self):
        for name in ("dropout_prob", "track_kill_prob", "drop_track_loss"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be non-negative")
        la = np.asarray(self.level_assignment, dtype=float)
        if la.ndim != 1 or len(la) == 0 or np.any(la < 0) or abs(la.sum() - 1.0) > 1e-9:
            raise ValueError("level_assignment must be a probability vector")
        self.frame_drop = [tuple(int(v) for v in d) for d in self.frame_drop]


@dataclass
class FrameBundle:
    frame_index: int
    timestamp: float
    true_pose: Optional[Pose]
    track_ids: np.ndarray
    uv: np.ndarray
    levels: np.ndarray

    @property
    def observations(self) -> list[PixelObservation]:
        return [PixelObservation(int(i), (float(u), float(v)), int(c))
                for i, (u, v), c in zip(self.track_ids, self.uv, self.levels)]

    def __len__(self) -> int:
        return len(self.track_ids)


def _spiral_height(spec: TrajectorySpec, t: float) -> float:
    a, tp = spec.ascent_rate, spec.peak_time
    return a * t if t <= tp else a * tp - a * (t - tp)


def _look_rotation(forward: np.ndarray, down: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with optical axis ``forward`` and image-down ``down``."""
    z = forward / np.linalg.norm(forward)
    y = down - (down @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1)


def heading_pose(yaw_deg: float, pitch_deg: float, position) -> Pose:
    """Camera at ``position`` looking along compass heading ``yaw``, tilted by ``pitch`` (-90 is nadir)."""
    yaw, p = math.radians(yaw_deg), math.radians(pitch_deg)
    tangent = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    forward = math.cos(p) * tangent + math.sin(p) * up
    down = math.sin(p) * tangent - math.cos(p) * up
    return Pose(_look_rotation(forward, down), np.asarray(position, dtype=float))


def pose_at(spec: TrajectorySpec, t: float) -> Pose:
    """World-from-camera pose at time ``t``."""
    if t < -1e-12 or t > spec.duration + 1e-9:
        raise OutOfRange(f"t={t} outside [0, {spec.duration}]")
    t = min(max(t, 0.0), spec.duration)
    if spec.kind == "spiral":
        phi = spec.angular_rate * t
        pos = np.array([spec.radius * math.cos(phi), spec.radius * math.sin(phi), _spiral_height(spec, t)])
        return heading_pose(math.degrees(phi) + 90.0, spec.pitch_deg, pos)
    if spec.kind == "pure_rotation":
        axis = np.asarray(spec.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        theta = spec.total_angle * t / spec.duration
        R0 = exp_so3(np.asarray(spec.base_rotation, dtype=float))
        return Pose(exp_so3(axis * theta) @ R0, np.asarray(spec.position, dtype=float))
    wps = spec.waypoints
    if t <= wps[0][0]:
        return wps[0][1]
    for (ta, Pa), (tb, Pb) in zip(wps, wps[1:]):
        if t <= tb:
            return interpolate(Pa, Pb, (t - ta) / (tb - ta))
    return wps[-1][1]


def generate_scene(spec: SceneSpec) -> np.ndarray:
    """``(n, 3)`` world points; ``round(far_fraction * n)`` of them far outside the box."""
    rng = substream(spec.seed, "scene")
    n = int(spec.n_landmarks)
    n_far = int(round(spec.far_fraction * n))
    lo = np.asarray(spec.volume[0], dtype=float)
    hi = np.asarray(spec.volume[1], dtype=float)
    near = lo + (hi - lo) * rng.random((n - n_far, 3))
    diag = float(np.linalg.norm(hi - lo))
    dirs = rng.normal(size=(n_far, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    dist = diag * (50.0 + 50.0 * rng.random(n_far))
    far = 0.5 * (lo + hi) + dirs * dist[:, None]
    return np.concatenate([near, far]) if n else np.zeros((0, 3))


class TrackSimulator:
    """Stateful track bookkeeping; one instance per sequence."""

    def __init__(self, points: np.ndarray, cam: PinholeCamera, noise: NoiseSpec,
                 rng: np.random.Generator):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.cam = cam
        self.noise = noise
        self.rng = rng
        self.next_id = 0
        # track id -> (landmark index, level); insertion order is creation order
        self.live: dict[int, tuple[int, int]] = {}
        # every track ever created -> landmark index
        self.track_points: dict[int, int] = {}
        self.levels = np.arange(len(noise.level_assignment))

    def _visible(self, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
        pc = (self.points - pose.t) @ pose.R
        uv, ok = project_many(self.cam, pc)
        b = self.noise.border_px
        ok &= pc[:, 2] > 0.05
        ok &= ((uv[:, 0] >= b) & (uv[:, 0] <= self.cam.width - b)
               & (uv[:, 1] >= b) & (uv[:, 1] <= self.cam.height - b))
        return uv, ok

    def observe(self, pose: Pose, frame_index: int, timestamp: float, gap: int = 0) -> FrameBundle:
        """Emit one frame. ``gap`` is the number of frames dropped right before this one."""
        nz = self.noise
        rng = self.rng
        uv_all, vis = self._visible(pose)

        # track loss: out of view, random churn, tearing across dropped frames
        survive_p = (1.0 - nz.track_kill_prob) ** (gap + 1)
        if gap > 0:
            survive_p *= 1.0 - nz.drop_track_loss
        ids = list(self.live)
        draws = rng.random(len(ids))
        for tid, u in zip(ids, draws):
            lm, _ = self.live[tid]
            if not vis[lm] or u >= survive_p:
                del self.live[tid]

        # new detections fill the feature budget
        n_new = nz.max_tracks - len(self.live)
        if n_new > 0:
            tracked = np.zeros(len(self.points), dtype=bool)
            for lm, _ in self.live.values():
                tracked[lm] = True
            cand = np.flatnonzero(vis & ~tracked)
            if len(cand):
                pick = rng.choice(cand, size=min(n_new, len(cand)), replace=False)
                lv = rng.choice(self.levels, size=len(pick), p=np.asarray(nz.level_assignment))
                for lm, c in zip(np.sort(pick), lv[np.argsort(pick)]):
                    self.live[self.next_id] = (int(lm), int(c))
                    self.track_points[self.next_id] = int(lm)
                    self.next_id += 1

        tids = np.fromiter(self.live.keys(), dtype=np.int64, count=len(self.live))
        lms = np.array([self.live[t][0] for t in tids], dtype=np.int64)
        lvs = np.array([self.live[t][1] for t in tids], dtype=np.int64)
        keep = rng.random(len(tids)) >= nz.dropout_prob
        sigma = nz.pixel_sigma * np.sqrt(2.0 ** lvs)
        uv = uv_all[lms] + rng.normal(size=(len(tids), 2)) * sigma[:, None]
        keep &= self.cam.in_bounds(uv)
        return FrameBundle(frame_index, float(timestamp), pose, tids[keep], uv[keep], lvs[keep])


def frame_is_dropped(noise: NoiseSpec, k: int) -> bool:
    return any(s <= k < s + n for s, n in noise.frame_drop)


def simulate_sequence(traj: TrajectorySpec, scene: SceneSpec, noise: NoiseSpec,
                      cam: PinholeCamera, seed: int,
                      points: Optional[np.ndarray] = None) -> list[FrameBundle]:
    """Whole sequence as a pure function of the specs and the seed.

    Frames inside a ``frame_drop`` interval do not exist in the output; their
    timestamps are simply missing.
    """
    if points is None:
        points = generate_scene(scene)
    sim = TrackSimulator(points, cam, noise, substream(seed, "noise"))
    frames = []
    gap = 0
    for k in range(traj.n_frames):
        if frame_is_dropped(noise, k):
            gap += 1
            continue
        t = k / traj.rate
        frames.append(sim.observe(pose_at(traj, t), k, t, gap))
        gap = 0
    return frames


def iter_sequence(traj, scene, noise, cam, seed) -> Iterator[FrameBundle]:
    yield from simulate_sequence(traj, scene, noise, cam, seed)
