"""Pinhole projection, bearing / inverse-distance landmarks and two-view triangulation.

A landmark is stored in its host keyframe as a unit bearing ``b`` and an inverse
distance ``d >= 0``; the homogeneous point ``(b, d)`` represents ``b / d``.
``d == 0`` is a point at infinity: it only carries direction, so translations
never move its projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose

MIN_DEPTH = 1e-8


class OutOfView(ValueError):
    pass


class AtInfinity(Exception):
    """Triangulation could not resolve a finite distance; the landmark keeps ``d = 0``."""


class BehindCamera(ValueError):
    pass


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def in_bounds(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= -margin) & (uv[..., 0] <= self.width + margin)
                & (uv[..., 1] >= -margin) & (uv[..., 1] <= self.height + margin))


@dataclass
class Landmark:
    host: int
    bearing: np.ndarray
    inv_dist: float = 0.0
    level: int = 0

    def __post_init__(self):
        b = np.asarray(self.bearing, dtype=float)
        self.bearing = b / np.linalg.norm(b)
        self.inv_dist = max(0.0, float(self.inv_dist))


@dataclass(frozen=True)
class PixelObservation:
    track_id: int
    uv: tuple
    level: int = 0


def project(cam: PinholeCamera, p_homog, margin: float = 1.0) -> np.ndarray:
    """Project a homogeneous point ``(x, y, z, d)``; only the direction matters."""
    p = np.asarray(p_homog, dtype=float)
    if p[2] <= MIN_DEPTH:
        raise OutOfView(f"point has depth {p[2]:.3g}")
    uv = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    if not cam.in_bounds(uv, margin):
        raise OutOfView(f"projection {uv} outside the image")
    return uv


def project_many(cam: PinholeCamera, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without bound checks; returns ``(uv, depth_ok)``."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    uv = np.stack([cam.fx * p[..., 0] / zs + cam.cx, cam.fy * p[..., 1] / zs + cam.cy], axis=-1)
    return uv, ok


def transform_homog(T: Pose, bearing, d: float) -> np.ndarray:
    b = np.asarray(bearing, dtype=float)
    return np.concatenate([T.R @ b + T.t * d, [d]])


def unproject(cam: PinholeCamera, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    v = np.stack([(uv[..., 0] - cam.cx) / cam.fx, (uv[..., 1] - cam.cy) / cam.fy,
                  np.ones(uv.shape[:-1])], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def tangent_basis(b: np.ndarray) -> np.ndarray:
    """Orthonormal ``(..., 3, 2)`` basis of the plane orthogonal to unit vectors ``b``."""
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    b = np.atleast_2d(b)
    # pick the coordinate axis least aligned with b
    k = np.argmin(np.abs(b), axis=1)
    e = np.zeros_like(b)
    e[np.arange(len(b)), k] = 1.0
    u = np.cross(b, e)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(b, u)
    B = np.stack([u, v], axis=-1)
    return B[0] if single else B


def retract_bearing(b: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Move unit bearings along their tangent plane and renormalize."""
    B = tangent_basis(b)
    nb = b + np.einsum("...ij,...j->...i", B, delta)
    return nb / np.linalg.norm(nb, axis=-1, keepdims=True)


def triangulation_angle(bearing_host, bearing_obs, T_host_to_obs: Pose) -> float:
    """Angle (rad) between the two viewing rays, both expressed in the observer frame."""
    r1 = T_host_to_obs.R @ np.asarray(bearing_host, dtype=float)
    r2 = np.asarray(bearing_obs, dtype=float)
    c = np.clip(r1 @ r2 / (np.linalg.norm(r1) * np.linalg.norm(r2)), -1.0, 1.0)
    return float(np.arccos(c))


def triangulate(bearing_host, bearing_obs, T_host_to_obs: Pose,
                min_baseline: float = 0.02, min_angle_deg: float = 0.5) -> float:
    """Inverse distance of the landmark along ``bearing_host`` (midpoint method).

    Raises ``AtInfinity`` when the baseline or the triangulation angle is too small
    and ``BehindCamera`` when the rays meet behind either camera.
    """
    if min_baseline <= 0:
        raise ValueError("min_baseline must be positive")
    bh = np.asarray(bearing_host, dtype=float)
    bo = np.asarray(bearing_obs, dtype=float)
    if np.linalg.norm(T_host_to_obs.t) < min_baseline:
        raise AtInfinity("baseline below threshold")
    if triangulation_angle(bh, bo, T_host_to_obs) < np.deg2rad(min_angle_deg):
        raise AtInfinity("triangulation angle below threshold")
    # rho * R bh + t = mu * bo in the observer frame, least squares in (rho, mu)
    A = np.stack([T_host_to_obs.R @ bh, -bo], axis=1)
    (rho, mu), *_ = np.linalg.lstsq(A, -T_host_to_obs.t, rcond=None)
    if rho <= 0 or mu <= 0:
        raise BehindCamera(f"triangulated depths {rho:.3g}, {mu:.3g}")
    return 1.0 / rho


def triangulate_many(bh: np.ndarray, bo: np.ndarray, R: np.ndarray, t: np.ndarray,
                     min_baseline: float = 0.02, min_angle_deg: float = 0.5) -> np.ndarray:
    """Vectorized ``triangulate``. ``R, t`` map host into observer per row.

    Returns inverse distances with ``0`` for at-infinity cases and ``nan`` for
    points behind a camera.
    """
    bh = np.asarray(bh, dtype=float)
    bo = np.asarray(bo, dtype=float)
    r1 = np.einsum("nij,nj->ni", R, bh)
    n = len(bh)
    out = np.zeros(n)
    base_ok = np.linalg.norm(t, axis=1) >= min_baseline
    cosang = np.einsum("ni,ni->n", r1, bo) / (np.linalg.norm(r1, axis=1) * np.linalg.norm(bo, axis=1))
    ang_ok = np.arccos(np.clip(cosang, -1.0, 1.0)) >= np.deg2rad(min_angle_deg)
    ok = base_ok & ang_ok
    if not ok.any():
        return out
    a11 = np.einsum("ni,ni->n", r1, r1)
    a12 = -np.einsum("ni,ni->n", r1, bo)
    a22 = np.einsum("ni,ni->n", bo, bo)
    g1 = -np.einsum("ni,ni->n", r1, t)
    g2 = np.einsum("ni,ni->n", bo, t)
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) > 1e-300, det, 1e-300)
    rho = (a22 * g1 - a12 * g2) / det
    mu = (a11 * g2 - a12 * g1) / det
    behind = ok & ((rho <= 0) | (mu <= 0))
    good = ok & ~behind
    out[good] = 1.0 / rho[good]
    out[behind] = np.nan
    return out
