"""Curriculum reprojection loss and homogeneous-coordinate decoding."""
from dataclasses import dataclass

import numpy as np

from ._validation import check_fraction

SCHEDULES = ("circular", "linear", "fixed")
LOSSES = ("tanh", "dsacstar")


@dataclass(frozen=True)
class CurriculumConfig:
    tau_min: float = 1.0
    tau_max: float = 50.0
    schedule: str = "circular"
    loss: str = "tanh"
    # threshold of the piecewise L1 -> sqrt loss
    dsacstar_threshold: float = 100.0
    # literal sqrt(e) beyond the threshold (discontinuous) instead of sqrt(threshold * e)
    dsacstar_literal: bool = False

    def __post_init__(self):
        if not 0 < self.tau_min <= self.tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


@dataclass(frozen=True)
class ValidityConfig:
    depth_min: float = 0.1
    depth_max: float = 1000.0
    reproj_max: float = 1000.0
    dummy_depth: float = 10.0
    invalid_norm: str = "l2"

    def __post_init__(self):
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.invalid_norm not in ("l1", "l2"):
            raise ValueError("invalid_norm must be 'l1' or 'l2'")


@dataclass(frozen=True)
class WClipConfig:
    s_min: float = 0.01
    s_max: float = 4.0

    def __post_init__(self):
        if not 0 < self.s_min < 1 < self.s_max:
            raise ValueError("need 0 < s_min < 1 < s_max")

    @property
    def beta(self):
        return np.log(2.0) / (1.0 - 1.0 / self.s_max)


def tau(t, cfg=CurriculumConfig()):
    """Inlier threshold (pixels) at relative training progress ``t``."""
    t = check_fraction(t)
    if cfg.schedule == "circular":
        w = np.sqrt(1.0 - t * t)
    elif cfg.schedule == "linear":
        w = 1.0 - t
    else:
        return float(cfg.tau_max)
    return float(w * cfg.tau_max + cfg.tau_min)


def robust_reproj(e, tau_px, cfg=CurriculumConfig(), return_grad=False):
    """Robust reprojection loss of error(s) ``e``; optionally also ``d loss / d e``."""
    e = np.asarray(e, dtype=np.float64)
    if cfg.loss == "tanh":
        th = np.tanh(e / tau_px)
        loss = tau_px * th
        grad = 1.0 - th * th
    else:
        thr = cfg.dsacstar_threshold
        safe = np.maximum(e, thr)
        if cfg.dsacstar_literal:
            loss = np.where(e <= thr, e, np.sqrt(safe))
            grad = np.where(e <= thr, 1.0, 0.5 / np.sqrt(safe))
        else:
            loss = np.where(e <= thr, e, np.sqrt(thr * safe))
            grad = np.where(e <= thr, 1.0, 0.5 * np.sqrt(thr / safe))
    if return_grad:
        return loss, grad
    return loss if loss.ndim else float(loss)


def softplus_w(w_hat, cfg=WClipConfig()):
    """Biased, clipped softplus: the positive homogeneous divisor ``w``."""
    beta = cfg.beta
    w_hat = np.asarray(w_hat, dtype=np.float64)
    w = np.logaddexp(0.0, beta * w_hat) / beta + 1.0 / cfg.s_max
    return np.minimum(1.0 / cfg.s_min, w)


def dehomogenize(raw, cfg=WClipConfig(), return_cache=False):
    """Decode ``(..., 4)`` network outputs to ``(..., 3)`` scene coordinates (mean not restored)."""
    raw = np.asarray(raw, dtype=np.float64)
    w = softplus_w(raw[..., 3], cfg)
    y = raw[..., :3] / w[..., None]
    if return_cache:
        return y, (raw, w)
    return y


def dehomogenize_backward(grad_y, cache, cfg=WClipConfig()):
    raw, w = cache
    beta = cfg.beta
    gy = np.asarray(grad_y, dtype=np.float64)
    g = np.empty_like(raw)
    g[..., :3] = gy / w[..., None]
    g_w = -np.sum(gy * raw[..., :3], axis=-1) / (w * w)
    sig = 0.5 * (1.0 + np.tanh(0.5 * beta * raw[..., 3]))
    clipped = w >= 1.0 / cfg.s_min
    g[..., 3] = np.where(clipped, 0.0, g_w * sig)
    return g


def decode_output(raw, mean_translation, homogeneous, wclip=WClipConfig(), return_cache=False):
    """Network output -> absolute scene coordinates (mean translation restored)."""
    if homogeneous:
        y, cache = dehomogenize(raw, wclip, return_cache=True)
    else:
        y, cache = np.asarray(raw, dtype=np.float64)[..., :3].copy(), None
    y += np.asarray(mean_translation, dtype=np.float64)
    if return_cache:
        return y, cache
    return y


def decode_backward(grad_y, cache, homogeneous, wclip=WClipConfig()):
    if homogeneous:
        return dehomogenize_backward(grad_y, cache, wclip)
    return np.asarray(grad_y, dtype=np.float64)


def dummy_targets(pixels, intrinsics, R_wc, t_wc, depth):
    """Scene points at a fixed camera depth along each pixel ray (ground-truth pose)."""
    fx, fy, cx, cy = intrinsics.T
    e = np.stack([(pixels[:, 0] - cx) / fx * depth, (pixels[:, 1] - cy) / fy * depth,
                  np.full(len(pixels), depth)], axis=1)
    return np.einsum("bij,bj->bi", R_wc, e) + t_wc


def batch_loss(pred, pixels, intrinsics, R_wc, t_wc, tau_px, curriculum=CurriculumConfig(),
               validity=ValidityConfig()):
    """Per-sample losses and gradients w.r.t. predicted scene coordinates.

    ``pred``: (B, 3) scene coordinates; ``pixels``: (B, 2); ``intrinsics``:
    (B, 4) as fx, fy, cx, cy; ``R_wc``/``t_wc``: ground-truth camera-to-world
    rotations (B, 3, 3) and translations (B, 3).  Returns
    ``(loss (B,), grad (B, 3), valid (B,))``.  ``tau_px`` and the branch
    selection are treated as constants.
    """
    pred = np.asarray(pred, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    R_wc = np.asarray(R_wc, dtype=np.float64)
    t_wc = np.asarray(t_wc, dtype=np.float64)
    fx, fy, cx, cy = intrinsics.T

    # camera-frame coordinates: e = R^T (y - t)
    e = np.einsum("bji,bj->bi", R_wc, pred - t_wc)
    z = e[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = 1.0 / z
        du = fx * e[:, 0] * inv_z + cx - pixels[:, 0]
        dv = fy * e[:, 1] * inv_z + cy - pixels[:, 1]
        err = np.sqrt(du * du + dv * dv)
    valid = (z >= validity.depth_min) & (z <= validity.depth_max) & (err < validity.reproj_max)

    loss = np.empty(len(pred))
    grad = np.zeros_like(pred)

    if np.any(valid):
        v = valid
        l_v, dl = robust_reproj(err[v], tau_px, curriculum, return_grad=True)
        loss[v] = l_v
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(err[v] > 0, dl / err[v], 0.0)
        gu = scale * du[v]
        gv = scale * dv[v]
        iz = inv_z[v]
        ge = np.stack([gu * fx[v] * iz, gv * fy[v] * iz,
                       -(gu * fx[v] * e[v, 0] + gv * fy[v] * e[v, 1]) * iz * iz], axis=1)
        grad[v] = np.einsum("bij,bj->bi", R_wc[v], ge)

    inv = ~valid
    if np.any(inv):
        target = dummy_targets(pixels[inv], intrinsics[inv], R_wc[inv], t_wc[inv], validity.dummy_depth)
        diff = pred[inv] - target
        if validity.invalid_norm == "l2":
            dist = np.linalg.norm(diff, axis=1)
            loss[inv] = dist
            with np.errstate(divide="ignore", invalid="ignore"):
                grad[inv] = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
        else:
            loss[inv] = np.abs(diff).sum(axis=1)
            grad[inv] = np.sign(diff)
    return loss, grad, valid


def sample_loss(entry, prediction, t, curriculum=CurriculumConfig(), validity=ValidityConfig()):
    """Loss of one buffer sample and its gradient w.r.t. the (absolute) predicted scene coordinate.

    ``entry`` needs ``pixel``, ``intrinsics`` (an ``Intrinsics`` or fx, fy, cx, cy)
    and ``pose`` (camera-to-world ``Pose``).
    """
    k = entry.intrinsics
    kk = k.as_array() if hasattr(k, "as_array") else np.asarray(k, dtype=np.float64)
    loss, grad, _ = batch_loss(np.asarray(prediction, dtype=np.float64)[None], np.asarray(entry.pixel)[None],
                               kk[None], entry.pose.rotation[None], entry.pose.translation[None],
                               tau(t, curriculum), curriculum, validity)
    return float(loss[0]), grad[0]
