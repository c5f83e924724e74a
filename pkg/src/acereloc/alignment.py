"""Rigid point-set alignment (Kabsch) and its RANSAC wrapper for trajectories."""
from dataclasses import dataclass

import numpy as np

from ._validation import check_points, check_random_state
from .errors import Degenerate, TooFewFrames
from .geometry import Pose, rotation_angle_deg


def _collinear(p, tol=1e-9):
    c = p - p.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    scale = max(s[0], 1e-300)
    return s[0] < 1e-12 or s[1] / scale < tol


def kabsch(src, dst, check=True):
    """Least-squares rigid transform with ``dst ≈ R @ src + t`` (no scale).

    Returned as a :class:`Pose`; reflections are corrected so det(R) = +1.
    """
    src = check_points(src, 3, "src")
    dst = check_points(dst, 3, "dst")
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same length")
    if check and (len(src) < 3 or _collinear(src) or _collinear(dst)):
        raise Degenerate("need at least 3 non-collinear correspondences")
    ca, cb = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ca).T @ (dst - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    return Pose(R, cb - R @ ca)


@dataclass
class AlignConfig:
    triplets: int = 1000
    inlier_threshold: float = 0.10   # meters
    seed: int = 0


@dataclass
class AlignResult:
    transform: Pose
    inliers: np.ndarray              # bool mask
    position_residuals: np.ndarray   # meters, all correspondences
    rotation_residuals: np.ndarray   # degrees, if rotations were given (diagnostic only)

    @property
    def inlier_count(self):
        return int(self.inliers.sum())

    @property
    def inlier_ratio(self):
        return float(self.inliers.mean()) if len(self.inliers) else 0.0

    def stats(self, which="position", only_inliers=False):
        r = self.position_residuals if which == "position" else self.rotation_residuals
        if r is None or len(r) == 0:
            return None
        if only_inliers:
            r = r[self.inliers]
        return dict(mean=float(np.mean(r)), median=float(np.median(r)), max=float(np.max(r)))


def residuals(transform, traj_a, traj_b, rot_a=None, rot_b=None):
    """Position residuals (m) of ``transform`` mapping a onto b, plus rotation residuals (deg)."""
    a = check_points(traj_a, 3)
    b = check_points(traj_b, 3)
    pos = np.linalg.norm(transform.apply(a) - b, axis=1)
    rot = None
    if rot_a is not None and rot_b is not None:
        rot = np.array([rotation_angle_deg((transform.rotation @ Ra).T @ Rb) for Ra, Rb in zip(rot_a, rot_b)])
    return pos, rot


def ransac_align(traj_a, traj_b, cfg=AlignConfig(), rot_a=None, rot_b=None):
    """Register camera positions ``traj_a`` onto ``traj_b``.

    Hypotheses come from random position triplets, ranked by inlier count at
    ``cfg.inlier_threshold``; the winner is re-fit to all its inliers.
    Rotations, if given, only feed the residual diagnostics.
    """
    a = check_points(traj_a, 3, "traj_a")
    b = check_points(traj_b, 3, "traj_b")
    if len(a) != len(b):
        raise ValueError("trajectories must have equal length")
    if len(a) < 3:
        raise TooFewFrames("need at least 3 corresponding positions")
    rng = check_random_state(cfg.seed)
    best, best_count = None, -1
    for _ in range(cfg.triplets):
        idx = rng.choice(len(a), 3, replace=False)
        try:
            T = kabsch(a[idx], b[idx])
        except Degenerate:
            continue
        count = int(np.sum(np.linalg.norm(T.apply(a) - b, axis=1) < cfg.inlier_threshold))
        if count > best_count:
            best, best_count = T, count
    if best is None:
        raise Degenerate("all sampled triplets were degenerate")
    inl = np.linalg.norm(best.apply(a) - b, axis=1) < cfg.inlier_threshold
    if inl.sum() >= 3:
        try:
            best = kabsch(a[inl], b[inl])
        except Degenerate:
            pass
    pos, rot = residuals(best, a, b, rot_a, rot_b)
    return AlignResult(best, pos < cfg.inlier_threshold, pos, rot)
