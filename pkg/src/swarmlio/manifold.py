"""SO(3) maps and the composite state manifold used by the swarm filter.

Error-vector layout (fixed): dtheta, dp, dv, dbg, dba, dg, then for every
teammate in ``SwarmState.extrinsics`` order: dtheta_ext, dp_ext.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EGO_DIM = 18
EXT_DIM = 6

_EXP_TAYLOR = 1e-8
_LOG_SMALL = 1e-6
_ORTHO_TOL = 1e-9
# so3_log accepts slightly drifted matrices; the filter re-orthonormalizes.
_LOG_ORTHO_TOL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3,) or not np.all(np.isfinite(r)):
        raise ValueError(f"so3_exp expects a finite 3-vector, got {r!r}")
    theta2 = float(r @ r)
    K = skew(r)
    if theta2 < _EXP_TAYLOR**2:
        # second-order series: I + K + K^2/2
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_exp_batch(r: np.ndarray) -> np.ndarray:
    """Vectorized Rodrigues over an (n, 3) array; returns (n, 3, 3)."""
    r = np.asarray(r, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ij,ij->i", r, r)
    theta = np.sqrt(theta2)
    small = theta < _EXP_TAYLOR
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    K = np.zeros((r.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -r[:, 2], r[:, 1]
    K[:, 1, 0], K[:, 1, 2] = r[:, 2], -r[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -r[:, 1], r[:, 0]
    KK = K @ K
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK


def check_rotation(R: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation within tolerance")


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    check_rotation(R, _LOG_ORTHO_TOL)
    cos_t = 0.5 * (np.trace(R) - 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 keeps full precision at both ends, unlike acos near +-1
    theta = math.atan2(0.5 * math.sqrt(float(w @ w)), cos_t)
    if theta < _LOG_SMALL:
        # theta/sin(theta) ~ 1 + theta^2/6
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    if theta > math.pi - _LOG_SMALL:
        # symmetric part: (R + R^T)/2 = cos(t) I + (1 - cos(t)) a a^T
        S = 0.5 * (R + R.T)
        B = (S - cos_t * np.eye(3)) / (1.0 - cos_t)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(B[k, k])
        axis /= np.linalg.norm(axis)
        if axis @ w < 0.0:
            axis = -axis
        return theta * axis
    return (0.5 * theta / math.sin(theta)) * w


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of R in radians."""
    return float(np.linalg.norm(so3_log(R)))


@dataclass
class Extrinsic:
    teammate_id: int
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    initialized: bool = False

    def copy(self) -> Extrinsic:
        return Extrinsic(self.teammate_id, self.rot.copy(), self.pos.copy(), self.initialized)


@dataclass
class SwarmState:
    ego_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    ego_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ego_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    extrinsics: list[Extrinsic] = field(default_factory=list)

    @classmethod
    def for_swarm(cls, teammate_ids, **kwargs) -> SwarmState:
        ids = list(teammate_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("teammate ids must be unique")
        return cls(extrinsics=[Extrinsic(j) for j in ids], **kwargs)

    @property
    def dim(self) -> int:
        return error_dim(len(self.extrinsics) + 1)

    def teammate_ids(self) -> list[int]:
        return [e.teammate_id for e in self.extrinsics]

    def ext_index(self, teammate_id: int) -> int:
        for k, e in enumerate(self.extrinsics):
            if e.teammate_id == teammate_id:
                return k
        raise KeyError(teammate_id)

    def extrinsic(self, teammate_id: int) -> Extrinsic:
        return self.extrinsics[self.ext_index(teammate_id)]

    def copy(self) -> SwarmState:
        return SwarmState(
            self.ego_rot.copy(),
            self.ego_pos.copy(),
            self.ego_vel.copy(),
            self.bias_gyro.copy(),
            self.bias_acc.copy(),
            self.gravity.copy(),
            [e.copy() for e in self.extrinsics],
        )


def error_dim(n_drones: int) -> int:
    if n_drones < 1:
        raise ValueError("swarm needs at least one drone")
    return EGO_DIM + EXT_DIM * (n_drones - 1)


def ext_slice(k: int) -> slice:
    """Error-vector slice of the k-th extrinsic block (rotation then translation)."""
    start = EGO_DIM + EXT_DIM * k
    return slice(start, start + EXT_DIM)


def boxplus(x: SwarmState, delta) -> SwarmState:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (x.dim,):
        raise ValueError(f"error vector has length {delta.shape}, state needs {x.dim}")
    out = x.copy()
    if np.any(delta[0:3]):
        out.ego_rot = x.ego_rot @ so3_exp(delta[0:3])
    out.ego_pos = x.ego_pos + delta[3:6]
    out.ego_vel = x.ego_vel + delta[6:9]
    out.bias_gyro = x.bias_gyro + delta[9:12]
    out.bias_acc = x.bias_acc + delta[12:15]
    out.gravity = x.gravity + delta[15:18]
    for k, e in enumerate(out.extrinsics):
        s = EGO_DIM + EXT_DIM * k
        d_rot = delta[s : s + 3]
        if np.any(d_rot):
            e.rot = e.rot @ so3_exp(d_rot)
        e.pos = e.pos + delta[s + 3 : s + 6]
    return out


def boxminus(x1: SwarmState, x2: SwarmState) -> np.ndarray:
    if x1.teammate_ids() != x2.teammate_ids():
        raise ValueError("states have different teammate layouts")
    d = np.empty(x1.dim)
    d[0:3] = so3_log(x2.ego_rot.T @ x1.ego_rot)
    d[3:6] = x1.ego_pos - x2.ego_pos
    d[6:9] = x1.ego_vel - x2.ego_vel
    d[9:12] = x1.bias_gyro - x2.bias_gyro
    d[12:15] = x1.bias_acc - x2.bias_acc
    d[15:18] = x1.gravity - x2.gravity
    for k, (e1, e2) in enumerate(zip(x1.extrinsics, x2.extrinsics)):
        s = EGO_DIM + EXT_DIM * k
        d[s : s + 3] = so3_log(e2.rot.T @ e1.rot)
        d[s + 3 : s + 6] = e1.pos - e2.pos
    return d
