"""Trajectory excitation, timestamp association and closed-form trajectory matching.

A tracker's trajectory (positions of an unknown object in G_i) is registered
against each teammate's self-reported trajectory (in G_j). If the rigid fit
is tight the object is that teammate, and the fit is an initial ^{G_i}T_{G_j}.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .manifold import check_rotation


class NotEnoughData(ValueError):
    pass


class DegenerateGeometry(ValueError):
    pass


@dataclass
class TrajWindow:
    """Sliding window of the most recent ``capacity`` (timestamp, position) pairs."""

    capacity: int = 100
    _t: deque = field(default_factory=deque, repr=False)
    _p: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self._t = deque(self._t, maxlen=self.capacity)
        self._p = deque(self._p, maxlen=self.capacity)

    @classmethod
    def from_arrays(cls, t, positions, capacity=None) -> TrajWindow:
        t = np.asarray(t, dtype=float)
        w = cls(capacity or max(len(t), 1))
        for tk, pk in zip(t, np.asarray(positions, dtype=float)):
            w.push(tk, pk)
        return w

    def push(self, t: float, p) -> None:
        if self._t and t <= self._t[-1]:
            raise ValueError(f"timestamp {t} does not increase past {self._t[-1]}")
        self._t.append(float(t))
        self._p.append(np.array(p, dtype=float))

    def __len__(self) -> int:
        return len(self._t)

    @property
    def times(self) -> np.ndarray:
        return np.fromiter(self._t, float, len(self._t))

    @property
    def positions(self) -> np.ndarray:
        if not self._p:
            return np.zeros((0, 3))
        return np.stack(self._p)

    @property
    def last_time(self) -> float | None:
        return self._t[-1] if self._t else None

    def copy(self) -> TrajWindow:
        return TrajWindow(self.capacity, deque(self._t), deque(p.copy() for p in self._p))


@dataclass(frozen=True)
class ExtrinsicEstimate:
    """Rigid map taking points of frame b (teammate's G_j) into frame a (own G_i)."""

    rot: np.ndarray
    pos: np.ndarray
    residual_rms: float = 0.0

    def __post_init__(self):
        check_rotation(self.rot, tol=1e-6)

    def apply(self, pts):
        return np.asarray(pts) @ self.rot.T + self.pos

    def inverse(self) -> ExtrinsicEstimate:
        return ExtrinsicEstimate(self.rot.T, -self.rot.T @ self.pos, self.residual_rms)


def associate_by_time(a: TrajWindow, b: TrajWindow, tol: float) -> list[tuple[int, int]]:
    """Greedy monotone pairing of entries whose timestamps differ by at most ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    ta, tb = a.times, b.times
    i = j = 0
    out = []
    while i < len(ta) and j < len(tb):
        d = tb[j] - ta[i]
        if abs(d) <= tol:
            out.append((i, j))
            i += 1
            j += 1
        elif d > 0:
            i += 1
        else:
            j += 1
    return out


def _scatter_singular_values(P: np.ndarray) -> np.ndarray:
    d = P - P.mean(axis=0)
    return np.linalg.svd(d.T @ d, compute_uv=False)


def traj_excited(w, sigma2_min: float = 0.05):
    """Excitation test on the centred scatter matrix H; True iff sigma_2 > sigma2_min.

    ``w`` is a TrajWindow or an (n, 3) array of positions.
    """
    P = w.positions if isinstance(w, TrajWindow) else np.asarray(w, dtype=float)
    if len(P) < 3:
        raise NotEnoughData(f"need >= 3 positions, have {len(P)}")
    s = _scatter_singular_values(P)
    return bool(s[1] > sigma2_min), s


def fit_rigid(A: np.ndarray, B: np.ndarray):
    """Least-squares (R, t) with A ~ R B + t (Kabsch with reflection guard).

    Returns (R, t, rms).
    """
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    U, S, Vt = np.linalg.svd(B0.T @ A0)
    s = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, s]) @ U.T
    t = ca - R @ cb
    r = A - (B @ R.T + t)
    return R, t, float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def traj_match(a: TrajWindow, b: TrajWindow, tol: float, pairs=None):
    """Fit T with a ~ T b over time-associated pairs; returns (residual_rms, ExtrinsicEstimate)."""
    if pairs is None:
        pairs = associate_by_time(a, b, tol)
    if len(pairs) < 3:
        raise NotEnoughData(f"only {len(pairs)} associated pairs")
    ia, ib = np.array(pairs).T
    A, B = a.positions[ia], b.positions[ib]
    s = _scatter_singular_values(B)
    if s[1] <= 1e-10 * max(s[0], 1e-300):
        raise DegenerateGeometry("associated trajectory is collinear or a single point")
    R, t, rms = fit_rigid(A, B)
    return rms, ExtrinsicEstimate(R, t, rms)


@dataclass(frozen=True)
class Identification:
    tracker: object
    teammate_id: int
    estimate: ExtrinsicEstimate
    pairs: int


def identify(trackers, received: dict, thr: float = 0.1, tol: float = 0.025,
             sigma2_min: float = 0.05, min_pairs: int = 3, skip_ids=()) -> list[Identification]:
    """Match excited tracker trajectories against teammates' reported trajectories.

    ``trackers`` expose ``.trajectory`` (TrajWindow); ``received`` maps
    teammate id to its TrajWindow. A tracker is labelled only when exactly
    one teammate fits below ``thr``; two fits mean the window cannot tell them
    apart yet (e.g. congruent loops), so the decision waits. Each teammate id
    is assigned at most once, and ids in ``skip_ids`` are never reassigned.
    """
    taken = set(skip_ids)
    out = []
    for tr in trackers:
        win = tr.trajectory
        if len(win) < 3 or not traj_excited(win, sigma2_min)[0]:
            continue
        hits = []
        for j in sorted(received):
            if j in taken:
                continue
            pairs = associate_by_time(win, received[j], tol)
            if len(pairs) < max(min_pairs, 3):
                continue
            ia = [p[0] for p in pairs]
            if not traj_excited(win.positions[ia], sigma2_min)[0]:
                continue
            try:
                rms, est = traj_match(win, received[j], tol, pairs)
            except DegenerateGeometry:
                continue
            if rms < thr:
                hits.append(Identification(tr, j, est, len(pairs)))
        if len(hits) == 1:
            out.append(hits[0])
            taken.add(hits[0].teammate_id)
    return out
