"""Rotation and rigid-body primitives plus Schur-complement marginalization.

Conventions used throughout the package:

* ``Pose(R, t)`` maps a point ``p`` from its own frame into the parent frame,
  ``p_parent = R @ p + t``.
* Twists are ordered ``(v, w)``: translation increment first, then the
  Rodrigues rotation increment.
* ``inc`` is the decoupled left increment: rotation is updated on the left
  through ``exp_so3`` and translation is shifted additively, independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

REORTHONORMALIZE_EVERY = 100
SMALL_ANGLE = 1e-8


class SingularBlock(np.linalg.LinAlgError):
    """Raised when a block to be marginalized cannot be inverted reliably."""


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def hat_many(w: np.ndarray) -> np.ndarray:
    """Batched ``hat`` for an ``(N, 3)`` array."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(W: np.ndarray) -> np.ndarray:
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = hat(w)
    if theta2 < SMALL_ANGLE**2:
        # second-order Taylor expansion of the Rodrigues coefficients
        return np.eye(3) + (1.0 - theta2 / 6.0) * W + (0.5 - theta2 / 24.0) * (W @ W)
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def exp_so3_many(w: np.ndarray) -> np.ndarray:
    """Batched ``exp_so3`` for an ``(N, 3)`` array of rotation vectors."""
    w = np.asarray(w, dtype=float)
    theta2 = np.einsum("ni,ni->n", w, w)
    W = hat_many(w)
    WW = W @ W
    small = theta2 < SMALL_ANGLE**2
    theta = np.sqrt(np.where(small, 1.0, theta2))
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    return np.eye(3) + a[:, None, None] * W + b[:, None, None] * WW


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``; accurate near 0 and near pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    # sin(theta) * axis
    s_axis = vee(0.5 * (R - R.T))
    if theta < 1e-6:
        return s_axis * (1.0 + theta**2 / 6.0)
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        axis /= np.linalg.norm(axis)
        # fix the sign from the (small) antisymmetric part
        if axis @ s_axis < 0:
            axis = -axis
        return axis * theta
    return s_axis * (theta / np.sin(theta))


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # number of compositions since the rotation was last re-orthonormalized
    n_ops: int = 0

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        n_ops = self.n_ops
        if n_ops >= REORTHONORMALIZE_EVERY:
            R = project_to_so3(R)
            n_ops = 0
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "n_ops", n_ops)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform points ``(3,)`` or ``(N, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def __repr__(self) -> str:
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def compose(A: Pose, B: Pose) -> Pose:
    return Pose(A.R @ B.R, A.R @ B.t + A.t, max(A.n_ops, B.n_ops) + 1)


def inverse(T: Pose) -> Pose:
    Rt = T.R.T
    return Pose(Rt, -Rt @ T.t, T.n_ops)


def adjoint(T: Pose) -> np.ndarray:
    A = np.zeros((6, 6))
    A[:3, :3] = T.R
    A[:3, 3:] = hat(T.t) @ T.R
    A[3:, 3:] = T.R
    return A


def inc(T: Pose, xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    return Pose(exp_so3(xi[3:]) @ T.R, T.t + xi[:3], T.n_ops + 1)


def box_minus(T: Pose, T0: Pose) -> np.ndarray:
    """Decoupled-increment coordinates ``xi`` with ``inc(T0, xi) == T``."""
    return np.concatenate([T.t - T0.t, log_so3(T.R @ T0.R.T)])


@dataclass
class SymmetricBlockMatrix:
    """Dense square matrix with a recorded block partition."""

    matrix: np.ndarray
    block_sizes: tuple

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        self.block_sizes = tuple(int(s) for s in self.block_sizes)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError(f"matrix must be square, got {M.shape}")
        if sum(self.block_sizes) != M.shape[0]:
            raise ValueError(f"block sizes {self.block_sizes} do not cover dimension {M.shape[0]}")
        self.matrix = 0.5 * (M + M.T)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(int)

    def indices(self, blocks: Iterable[int]) -> np.ndarray:
        off = self.offsets
        idx = [np.arange(off[i], off[i + 1]) for i in blocks]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def block(self, i: int, j: int) -> np.ndarray:
        off = self.offsets
        return self.matrix[off[i]:off[i + 1], off[j]:off[j + 1]]


def _check_condition(M: np.ndarray, max_condition: float) -> None:
    if M.size == 0:
        return
    ev = np.linalg.eigvalsh(M)
    if not np.all(np.isfinite(ev)) or ev[-1] <= 0 or ev[0] <= 0 or ev[-1] / ev[0] > max_condition:
        raise SingularBlock(f"marginalized block is ill-conditioned (eigenvalues {ev[0]:.3e} .. {ev[-1]:.3e})")


def schur_marginalize(
    H: SymmetricBlockMatrix,
    b: np.ndarray,
    keep: Sequence[int],
    reg: float = 0.0,
    max_condition: float = 1e12,
    diagonal_blocks: bool = False,
) -> tuple[SymmetricBlockMatrix, np.ndarray]:
    """Marginalize every block not in ``keep`` out of the information form ``(H, b)``.

    ``keep`` lists block indices; the result keeps them in the given order.
    ``reg * trace / dim`` is added to the diagonal of the marginalized block before
    inversion. It defaults to zero: the condition check already rejects blocks that
    cannot be inverted, and any damping biases the marginal when weights differ by
    many orders of magnitude (the anchor against pixel terms). With ``diagonal_blocks`` the marginalized blocks are assumed mutually
    uncoupled (e.g. landmarks) and inverted block by block.
    """
    keep = list(keep)
    marg = [i for i in range(len(H.block_sizes)) if i not in set(keep)]
    b = np.asarray(b, dtype=float)
    ik = H.indices(keep)
    im = H.indices(marg)
    Hkk = H.matrix[np.ix_(ik, ik)]
    bk = b[ik]
    sizes = tuple(H.block_sizes[i] for i in keep)
    if len(im) == 0:
        return SymmetricBlockMatrix(Hkk, sizes), bk.copy()
    Hkm = H.matrix[np.ix_(ik, im)]
    Hmm = H.matrix[np.ix_(im, im)]
    bm = b[im]

    if diagonal_blocks:
        msizes = [H.block_sizes[i] for i in marg]
        Hmm_inv = np.zeros_like(Hmm)
        o = 0
        for s in msizes:
            blk = Hmm[o:o + s, o:o + s]
            lam = reg * max(np.trace(blk), 0.0) / s
            blk = blk + lam * np.eye(s)
            _check_condition(blk, max_condition)
            Hmm_inv[o:o + s, o:o + s] = np.linalg.inv(blk)
            o += s
        X = Hkm @ Hmm_inv
    else:
        lam = reg * max(np.trace(Hmm), 0.0) / Hmm.shape[0]
        Hmm = Hmm + lam * np.eye(Hmm.shape[0])
        _check_condition(Hmm, max_condition)
        X = np.linalg.solve(Hmm, Hkm.T).T
    H_new = Hkk - X @ Hkm.T
    b_new = bk - X @ bm
    return SymmetricBlockMatrix(H_new, sizes), b_new


def interpolate(A: Pose, B: Pose, s: float) -> Pose:
    """Linear translation and geodesic rotation between ``A`` (s=0) and ``B`` (s=1)."""
    dR = exp_so3(s * log_so3(A.R.T @ B.R))
    return Pose(A.R @ dR, (1.0 - s) * A.t + s * B.t)
