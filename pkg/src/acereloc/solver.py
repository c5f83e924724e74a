"""Robust camera pose from 2D-3D correspondences: P3P in RANSAC plus LM refinement."""
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import check_points, check_random_state
from .alignment import kabsch
from .errors import Degenerate, InsufficientInliers, NoRealSolution, TooFewCorrespondences
from .geometry import Pose, skew


@dataclass(frozen=True)
class SolverConfig:
    hypotheses: int = 64
    inlier_threshold: float = 10.0
    refine_rounds: int = 8
    lm_max_iters: int = 100
    lm_tolerance: float = 1e-10     # stop once the squared-error objective is below this
    lm_step_tolerance: float = 1e-6
    min_inliers: int = 6
    seed: int = 0
    max_sample_attempts: int = 10   # per hypothesis, for degenerate draws

    def __post_init__(self):
        if self.hypotheses < 1:
            raise ValueError("hypotheses must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass
class PoseEstimate:
    pose: Pose
    inlier_count: int
    success: bool
    solve_time: float = 0.0          # milliseconds
    info: dict = field(default_factory=dict, repr=False)


def bearings(pixels, k):
    px = check_points(pixels, 2, "pixels")
    r = np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(px))], axis=1)
    return r / np.linalg.norm(r, axis=1, keepdims=True)


def _polish_depths(s, j, d2, iters=3):
    """Newton iterations on the three law-of-cosines equations."""
    pairs = ((1, 2), (0, 2), (0, 1))
    cos = np.array([j[a] @ j[b] for a, b in pairs])
    for _ in range(iters):
        F = np.array([s[a] ** 2 + s[b] ** 2 - 2 * s[a] * s[b] * c - d for (a, b), c, d in zip(pairs, cos, d2)])
        Jm = np.zeros((3, 3))
        for r, ((a, b), c) in enumerate(zip(pairs, cos)):
            Jm[r, a] = 2 * s[a] - 2 * s[b] * c
            Jm[r, b] = 2 * s[b] - 2 * s[a] * c
        try:
            s = s - np.linalg.solve(Jm, F)
        except np.linalg.LinAlgError:
            break
    return s


def p3p_solve(pixels, points, k):
    """Up to four camera-to-world poses consistent with three correspondences.

    Grunert's quartic in the depth ratio, followed by Newton polishing of the
    three depths and an exact rigid fit of the recovered camera-frame points.
    """
    px = check_points(pixels, 2, "pixels")
    P = check_points(points, 3, "points")
    if len(px) != 3 or len(P) != 3:
        raise ValueError("p3p needs exactly three correspondences")
    cross = np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0]))
    scale = max(np.linalg.norm(P[1] - P[0]), np.linalg.norm(P[2] - P[0]), np.linalg.norm(P[2] - P[1]))
    if scale < 1e-9 or cross < 1e-9 * scale * scale:
        raise Degenerate("scene points are collinear or coincident")
    j = bearings(px, k)
    a2 = np.sum((P[1] - P[2]) ** 2)
    b2 = np.sum((P[0] - P[2]) ** 2)
    c2 = np.sum((P[0] - P[1]) ** 2)
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca ** 2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
    A2 = 2 * (amc ** 2 - 1 + 2 * amc ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg ** 2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if np.all(np.abs(coeffs) < 1e-15):
        raise Degenerate("vanishing quartic")
    roots = np.roots(np.trim_zeros(coeffs, "f"))
    d2 = (a2, b2, c2)
    poses = []
    for r in roots:
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = r.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((-1 + amc) * v ** 2 - 2 * amc * cb * v + 1 + amc) / den
        q = 1 + v * v - 2 * v * cb
        if q <= 0:
            continue
        s1 = np.sqrt(b2 / q)
        s = _polish_depths(np.array([s1, u * s1, v * s1]), j, d2)
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            continue
        e = s[:, None] * j
        try:
            pose = kabsch(e, P, check=False)
        except np.linalg.LinAlgError:
            continue
        if any(np.allclose(pose.as_matrix(), p.as_matrix(), atol=1e-9) for p in poses):
            continue
        poses.append(pose)
    if not poses:
        raise NoRealSolution("no real P3P solution")
    return poses


def _world_to_camera(pose):
    Rt = pose.rotation.T
    return Rt, -Rt @ pose.translation


def _reproj(R, t, pixels, points, k):
    e = points @ R.T + t
    z = e[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = k.fx * e[:, 0] / z + k.cx - pixels[:, 0]
        dv = k.fy * e[:, 1] / z + k.cy - pixels[:, 1]
        err = np.sqrt(du * du + dv * dv)
    err[~(z > 0)] = np.inf
    return err


def count_inliers(pose, pixels, points, k, threshold=10.0):
    """Number of correspondences reprojecting strictly below ``threshold`` px."""
    px = check_points(pixels, 2, "pixels") if len(pixels) else np.zeros((0, 2))
    P = check_points(points, 3, "points") if len(points) else np.zeros((0, 3))
    if len(px) == 0:
        return 0
    R, t = _world_to_camera(pose)
    return int(np.sum(_reproj(R, t, px, P, k) < threshold))


def _lm(R, t, pixels, points, k, cfg, history):
    """Levenberg-Marquardt on sum of squared reprojection errors (world-to-camera R, t)."""
    def residual(R, t):
        e = points @ R.T + t
        z = e[:, 2]
        if np.any(z <= 0):
            return None, e
        r = np.empty(2 * len(points))
        r[0::2] = k.fx * e[:, 0] / z + k.cx - pixels[:, 0]
        r[1::2] = k.fy * e[:, 1] / z + k.cy - pixels[:, 1]
        return r, e

    r, e = residual(R, t)
    if r is None:
        return R, t
    cost = float(r @ r)
    history.append(cost)
    lam = 1e-3
    for _ in range(cfg.lm_max_iters):
        if cost <= cfg.lm_tolerance:
            break
        x, y, z = e[:, 0], e[:, 1], e[:, 2]
        iz = 1.0 / z
        # d pixel / d e
        Jp = np.zeros((len(e), 2, 3))
        Jp[:, 0, 0] = k.fx * iz
        Jp[:, 0, 2] = -k.fx * x * iz * iz
        Jp[:, 1, 1] = k.fy * iz
        Jp[:, 1, 2] = -k.fy * y * iz * iz
        # d e / d (omega, tau) for e' = exp(omega) e + tau
        De = np.zeros((len(e), 3, 6))
        De[:, :, :3] = -np.stack([np.stack([np.zeros_like(x), -z, y], -1),
                                  np.stack([z, np.zeros_like(x), -x], -1),
                                  np.stack([-y, x, np.zeros_like(x)], -1)], axis=1)
        De[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk->nik", Jp, De).reshape(-1, 6)
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = Rotation.from_rotvec(delta[:3]).as_matrix()
            R_new, t_new = dR @ R, dR @ t + delta[3:]
            r_new, e_new = residual(R_new, t_new)
            if r_new is not None and float(r_new @ r_new) < cost:
                R, t, r, e = R_new, t_new, r_new, e_new
                cost = float(r @ r)
                history.append(cost)
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
            if np.linalg.norm(delta) < cfg.lm_step_tolerance:
                break
        if not improved or np.linalg.norm(delta) < cfg.lm_step_tolerance:
            break
    return R, t


def refine_lm(pose, pixels, points, k, threshold=10.0, cfg=SolverConfig(), return_info=False):
    """Refine ``pose`` on its inliers, alternating refit and inlier re-selection.

    Each Levenberg-Marquardt run only accepts steps that lower the objective;
    the per-round objective traces are returned in ``info["objectives"]``.
    """
    px = check_points(pixels, 2, "pixels")
    P = check_points(points, 3, "points")
    R, t = _world_to_camera(pose)
    traces = []
    prev = None
    for rnd in range(cfg.refine_rounds):
        inl = _reproj(R, t, px, P, k) < threshold
        if inl.sum() < 4:
            if rnd == 0:
                raise InsufficientInliers(f"{int(inl.sum())} inliers, need 4")
            break
        if prev is not None and np.array_equal(inl, prev):
            break
        prev = inl
        hist = []
        R, t = _lm(R, t, px[inl], P[inl], k, cfg, hist)
        traces.append(hist)
    out = Pose(R.T, -R.T @ t)
    if return_info:
        return out, dict(objectives=traces)
    return out


def ransac(pixels, points, k, cfg=SolverConfig(), rng=None):
    """Best-inlier P3P hypothesis (4th point disambiguates), refined by LM."""
    t0 = time.perf_counter()
    px = check_points(pixels, 2, "pixels")
    P = check_points(points, 3, "points")
    n = len(px)
    if n < 4:
        raise TooFewCorrespondences(f"{n} correspondences, need at least 4")
    rng = check_random_state(cfg.seed if rng is None else rng)
    best_pose, best_count = None, -1
    for _ in range(cfg.hypotheses):
        hyp = None
        for _attempt in range(cfg.max_sample_attempts):
            idx = rng.choice(n, 4, replace=False)
            try:
                cands = p3p_solve(px[idx[:3]], P[idx[:3]], k)
            except (Degenerate, NoRealSolution):
                continue
            errs = [_reproj(*_world_to_camera(c), px[idx[3:]], P[idx[3:]], k)[0] for c in cands]
            hyp = cands[int(np.argmin(errs))]
            break
        if hyp is None:
            continue
        count = int(np.sum(_reproj(*_world_to_camera(hyp), px, P, k) < cfg.inlier_threshold))
        if count > best_count:
            best_pose, best_count = hyp, count
    info = {}
    if best_pose is None:
        return PoseEstimate(Pose(), 0, False, 1000 * (time.perf_counter() - t0), info)
    info["hypothesis_inliers"] = best_count
    pose = best_pose
    try:
        pose, rinfo = refine_lm(best_pose, px, P, k, cfg.inlier_threshold, cfg, return_info=True)
        info.update(rinfo)
    except InsufficientInliers:
        pass
    count = count_inliers(pose, px, P, k, cfg.inlier_threshold)
    return PoseEstimate(pose, count, count >= cfg.min_inliers, 1000 * (time.perf_counter() - t0), info)


def localize_frame(feature_map, head, cfg=SolverConfig(), wclip=None):
    """Predict a scene coordinate for every valid cell and solve for the camera pose."""
    from .losses import WClipConfig
    from .training import predict_scene_coordinates

    t0 = time.perf_counter()
    X, pix = feature_map.flat(only_valid=True)
    if X.shape[1] != head.in_dim:
        from .errors import DimensionMismatch
        raise DimensionMismatch(f"feature map has {X.shape[1]} channels, head expects {head.in_dim}")
    if len(X) < 4:
        return PoseEstimate(Pose(), 0, False, 1000 * (time.perf_counter() - t0))
    coords = predict_scene_coordinates(head, X, wclip or WClipConfig())
    est = ransac(pix, coords, feature_map.intrinsics, cfg)
    est.solve_time = 1000 * (time.perf_counter() - t0)
    return est
