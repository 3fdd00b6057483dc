"""Accuracy metrics against simulation ground truth."""

from __future__ import annotations

import math

import numpy as np

from ..manifold import rotation_angle


def compute_rmse(times, est_positions, gt) -> float:
    """Root-mean-square position error, ground truth evaluated at the estimate times.

    ``gt`` is a TrueTrajectory (compared in its own start frame) or any
    callable mapping an array of times to (n, 3) positions. No alignment is
    applied: estimate and truth share the drone's start frame by construction.
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    if len(t) == 0:
        raise ValueError("compute_rmse needs at least one estimate")
    if len(t) != len(est):
        raise ValueError(f"{len(t)} times but {len(est)} positions")
    if hasattr(gt, "pose_in_own_frame"):
        ref = gt.pose_in_own_frame(t)[1]
    else:
        ref = np.asarray(gt(t), dtype=float).reshape(-1, 3)
    return float(math.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


def compute_extrinsic_error(est, gt_T) -> tuple[float, float]:
    """(rotation error in degrees, translation error in metres) of an extrinsic estimate.

    ``est`` has ``rot``/``pos`` attributes or is an (R, p) pair; so is ``gt_T``.
    """
    R_e, p_e = (est.rot, est.pos) if hasattr(est, "rot") else est
    R_g, p_g = (gt_T.rot, gt_T.pos) if hasattr(gt_T, "rot") else gt_T
    R_e, R_g = np.asarray(R_e, float), np.asarray(R_g, float)
    ang = rotation_angle(R_g.T @ R_e)
    return math.degrees(ang), float(np.linalg.norm(np.asarray(p_g, float) - np.asarray(p_e, float)))
