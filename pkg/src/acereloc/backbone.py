"""Dense feature extraction at 1/8 resolution.

Three interchangeable backbones emit the same :class:`FeatureMap` layout:

* :class:`OracleBackbone` reads per-landmark descriptors from a synthetic world;
* :class:`HandcraftedBackbone` computes gradient-orientation histograms;
* :class:`LearnedBackbone` runs a :class:`~acereloc.neural.BackboneNet`.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_random_state
from .errors import EmptyScene, UnsupportedSize
from .features import DEFAULT_SUBSAMPLING, FeatureMap, View, grid_shape
from .geometry import Intrinsics, Pose, compose
from .losses import CurriculumConfig, ValidityConfig, WClipConfig, batch_loss, decode_backward, decode_output, tau
from .neural import BackboneNet, OptimState, RegressionHead, adamw_step, one_cycle_lr

log = logging.getLogger(__name__)

IMAGE_MEAN = 0.45
IMAGE_STD = 0.25


def _check_size(k, subsampling):
    if k.width < subsampling or k.height < subsampling:
        raise UnsupportedSize(f"image {k.width}x{k.height} smaller than subsampling {subsampling}")


def _cell_mask(view, rows, cols, subsampling):
    """Cells whose center pixel lies on real image content."""
    k = view.intrinsics
    r = ((np.arange(rows) + 0.5) * subsampling).astype(int)
    c = ((np.arange(cols) + 0.5) * subsampling).astype(int)
    inside = (r[:, None] < k.height) & (c[None, :] < k.width)
    if view.mask is None:
        return inside
    rr = np.minimum(r, k.height - 1)
    cc = np.minimum(c, k.width - 1)
    return inside & view.mask[np.ix_(rr, cc)]


class OracleBackbone:
    """Synthetic backbone: each cell carries the descriptor of the landmark it observes."""

    def __init__(self, world, subsampling=DEFAULT_SUBSAMPLING):
        self.world = world
        self.subsampling = subsampling

    @property
    def out_dim(self):
        return self.world.descriptor_dim

    def extract(self, view):
        from .synth import render_observations

        _check_size(view.intrinsics, self.subsampling)
        fm, _ = render_observations(self.world, view.pose, view.intrinsics, self.subsampling)
        return fm


# --- handcrafted ----------------------------------------------------------

def _orientation_channels(img, sigma, n_bins=8):
    gx = ndimage.gaussian_filter(img, sigma, order=(0, 1))
    gy = ndimage.gaussian_filter(img, sigma, order=(1, 0))
    mag = np.hypot(gx, gy)
    pos = (np.arctan2(gy, gx) % (2 * np.pi)) / (2 * np.pi / n_bins)
    b0 = np.floor(pos).astype(int) % n_bins
    frac = pos - np.floor(pos)
    ch = np.zeros((n_bins,) + img.shape)
    rr, cc = np.indices(img.shape)
    np.add.at(ch, (b0, rr, cc), mag * (1 - frac))
    np.add.at(ch, ((b0 + 1) % n_bins, rr, cc), mag * frac)
    return ch


def _block_sums(channels, centers_r, centers_c, half):
    """Sums of each channel over the 2x2 sub-blocks of a (2*half)^2 window at every center."""
    n, H, W = channels.shape
    S = np.zeros((n, H + 1, W + 1))
    S[:, 1:, 1:] = channels.cumsum(1).cumsum(2)

    def box(r0, r1, c0, c1):
        r0, r1 = np.clip(r0, 0, H), np.clip(r1, 0, H)
        c0, c1 = np.clip(c0, 0, W), np.clip(c1, 0, W)
        return (S[:, r1[:, None], c1[None, :]] - S[:, r0[:, None], c1[None, :]]
                - S[:, r1[:, None], c0[None, :]] + S[:, r0[:, None], c0[None, :]])

    out = []
    for dr in (-half, 0):
        for dc in (-half, 0):
            out.append(box(centers_r + dr, centers_r + dr + half, centers_c + dc, centers_c + dc + half))
    # (blocks, bins, rows, cols) -> (rows, cols, blocks * bins)
    return np.stack(out).transpose(2, 3, 0, 1).reshape(len(centers_r), len(centers_c), -1)


class HandcraftedBackbone(BaseEstimator, TransformerMixin):
    """Dense gradient-orientation histogram descriptors.

    Per cell: 8 orientation bins x 2x2 sub-blocks over a 32x32 window, at two
    derivative scales (64 dims), L2-normalised.  With ``out_dim > 64`` the
    descriptor is lifted by a fixed seeded orthonormal projection (norm kept).
    """

    NATIVE_DIM = 64

    def __init__(self, out_dim=None, subsampling=DEFAULT_SUBSAMPLING, window=32, sigmas=(1.0, 2.0),
                 random_state=0):
        self.out_dim = out_dim
        self.subsampling = subsampling
        self.window = window
        self.sigmas = sigmas
        self.random_state = random_state

    def fit(self, X=None, y=None):
        dim = self.NATIVE_DIM if self.out_dim is None else int(self.out_dim)
        if dim < self.NATIVE_DIM:
            raise ValueError(f"out_dim must be >= {self.NATIVE_DIM}")
        if dim == self.NATIVE_DIM:
            self.projection_ = None
        else:
            g = np.random.default_rng(self.random_state).standard_normal((dim, self.NATIVE_DIM))
            q, _ = np.linalg.qr(g)
            self.projection_ = q.T.astype(np.float32)
        return self

    def transform(self, X):
        return [self.extract(v) for v in X]

    def extract(self, view):
        if not hasattr(self, "projection_"):
            self.fit()
        k = view.intrinsics
        _check_size(k, self.subsampling)
        img = np.asarray(view.image, dtype=np.float64)
        s = self.subsampling
        rows, cols = grid_shape(img.shape[0], img.shape[1], s)
        cr = ((np.arange(rows) + 0.5) * s).astype(int)
        cc = ((np.arange(cols) + 0.5) * s).astype(int)
        parts = [_block_sums(_orientation_channels(img, sg), cr, cc, self.window // 2) for sg in self.sigmas]
        d = np.concatenate(parts, axis=-1)
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        d = np.where(norm > 1e-8, d / np.maximum(norm, 1e-12), 1.0 / np.sqrt(d.shape[-1]))
        d = d.astype(np.float32)
        if self.projection_ is not None:
            d = d @ self.projection_
        valid = _cell_mask(view, rows, cols, s)
        return FeatureMap(d, k, s, valid)


# --- learned --------------------------------------------------------------

def normalize_image(img):
    return ((np.asarray(img, dtype=np.float32) - IMAGE_MEAN) / IMAGE_STD)


class LearnedBackbone(BaseEstimator, TransformerMixin):
    """Feature extraction with a trained (or random) :class:`BackboneNet`."""

    def __init__(self, net=None, subsampling=DEFAULT_SUBSAMPLING):
        self.net = net
        self.subsampling = subsampling

    @property
    def out_dim(self):
        return self.net.out_channels

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [self.extract(v) for v in X]

    def extract(self, view):
        k = view.intrinsics
        _check_size(k, self.subsampling)
        out = self.net.forward(normalize_image(view.image)[None, None])[0]
        data = np.ascontiguousarray(out.transpose(1, 2, 0))
        valid = _cell_mask(view, data.shape[0], data.shape[1], self.subsampling)
        return FeatureMap(data, k, self.subsampling, valid)


def save_backbone(net, path):
    np.savez(path, out_channels=net.out_channels, *net.params())


def load_backbone(path):
    with np.load(path) as z:
        n = len([k for k in z.files if k.startswith("arr_")])
        return BackboneNet([z[f"arr_{i}"] for i in range(n)], int(z["out_channels"]))


def extract_features(view, backbone):
    """Dense feature map of ``view``; deterministic for fixed inputs and weights."""
    return backbone.extract(view)


# --- augmentation ---------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    min_height: float = None       # rescale target heights (pixels); None disables scaling
    max_height: float = None
    max_rotation_deg: float = 0.0
    rotation_3d: bool = False      # random 3D camera rotation instead of in-plane roll
    brightness: float = 0.0        # relative jitter
    contrast: float = 0.0
    subsampling: int = DEFAULT_SUBSAMPLING


HEAD_AUGMENT = AugmentConfig(320, 720, 15.0, False, 0.1, 0.1)
BACKBONE_AUGMENT = AugmentConfig(240, 960, 40.0, True, 0.4, 0.4)


def _warp_image(img, mask, k_src, k_dst, Q):
    """Resample ``img`` into the camera rotated by ``Q`` with intrinsics ``k_dst``."""
    H, W = k_dst.height, k_dst.width
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    rays = np.stack([(jj - k_dst.cx) / k_dst.fx, (ii - k_dst.cy) / k_dst.fy, np.ones_like(jj)])
    src = np.tensordot(Q.T, rays, axes=1)
    front = src[2] > 1e-9
    z = np.where(front, src[2], 1.0)
    u = k_src.fx * src[0] / z + k_src.cx - 0.5
    v = k_src.fy * src[1] / z + k_src.cy - 0.5
    out = ndimage.map_coordinates(img, [v, u], order=1, mode="constant", cval=0.0)
    inside = front & (u >= -0.5) & (u <= k_src.width - 0.5) & (v >= -0.5) & (v <= k_src.height - 0.5)
    if mask is not None:
        m = ndimage.map_coordinates(mask.astype(np.float32), [v, u], order=0, mode="constant", cval=0.0)
        inside &= m > 0.5
    return out.astype(np.float32), inside


def augment_view(view, rng, cfg=HEAD_AUGMENT):
    """Randomly rescale / rotate / photometrically jitter a view with consistent geometry.

    Returns a new view whose intrinsics and camera-to-world pose are adjusted so
    that every scene point projects onto its transformed pixel.
    """
    if cfg is None:
        return view
    rng = check_random_state(rng)
    k = view.intrinsics
    s = cfg.subsampling
    k_new = k
    if cfg.min_height is not None and cfg.max_height is not None:
        # inverse-scale sampling: rescale by 1/s with s uniform
        inv = rng.uniform(k.height / cfg.max_height, k.height / cfg.min_height)
        alpha = 1.0 / inv
        h = max(s, int(round(k.height * alpha / s)) * s)
        w = max(s, int(round(k.width * alpha / s)) * s)
        ax, ay = w / k.width, h / k.height
        k_new = Intrinsics(k.fx * ax, k.fy * ay, k.cx * ax, k.cy * ay, w, h)
    Q = np.eye(3)
    if cfg.max_rotation_deg:
        if cfg.rotation_3d:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = np.radians(rng.uniform(0.0, cfg.max_rotation_deg))
        else:
            axis = np.array([0.0, 0.0, 1.0])
            angle = np.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        Q = Rotation.from_rotvec(axis * angle).as_matrix()
    pose = compose(view.pose, Pose(Q.T))
    if view.image is None:
        return view.replace(pose=pose, intrinsics=k_new)
    img, mask = view.image, view.mask
    if k_new != k or not np.allclose(Q, np.eye(3)):
        img, mask = _warp_image(np.asarray(img, dtype=np.float32), view.mask, k, k_new, Q)
    if cfg.brightness or cfg.contrast:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = float(img.mean())
        img = np.clip(((img - mean) * c + mean) * b, 0.0, 1.0).astype(np.float32)
    return view.replace(pose=pose, intrinsics=k_new, image=img, mask=mask)


# --- multi-scene backbone training ----------------------------------------

@dataclass
class BackboneTrainingConfig:
    steps: int = 200
    images_per_head: int = 6
    out_channels: int = 128
    head_width: int = 512
    head_layers: int = 6
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    weight_decay: float = 1e-2
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    validity: ValidityConfig = field(default_factory=ValidityConfig)
    augment: AugmentConfig = BACKBONE_AUGMENT
    seed: int = 0


def train_backbone(scenes, config=BackboneTrainingConfig(), net=None, callback=None):
    """Train one shared backbone with a throwaway regression head per scene.

    ``scenes`` is a list of lists of image views with known poses.  Each step
    samples ``images_per_head`` images per scene, accumulates gradients over all
    heads, then applies a single AdamW update.  Returns ``(net, heads, losses)``.
    """
    scenes = [list(s) for s in scenes]
    if not scenes or any(len(s) == 0 for s in scenes):
        raise EmptyScene("every scene needs at least one posed image")
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    net = BackboneNet.init(cfg.out_channels, rng) if net is None else net
    wclip = WClipConfig()
    heads = []
    for views in scenes:
        h = RegressionHead.init(net.out_channels, cfg.head_width, cfg.head_layers, True, rng=rng)
        h.mean_translation = np.mean([v.pose.center for v in views], axis=0).astype(np.float32)
        heads.append(h)
    net_state = OptimState.for_params(net.params(), weight_decay=cfg.weight_decay)
    head_states = [OptimState.for_params(h.params(), weight_decay=cfg.weight_decay) for h in heads]
    losses = np.zeros(cfg.steps)
    for step in range(cfg.steps):
        t = step / cfg.steps
        th = tau(t, cfg.curriculum)
        lr = one_cycle_lr(t, cfg.lr_min, cfg.lr_max)
        net_grads = [np.zeros_like(p) for p in net.params()]
        step_loss = 0.0
        head_grads = []
        for head, views in zip(heads, scenes):
            pick = rng.choice(len(views), size=cfg.images_per_head, replace=len(views) < cfg.images_per_head)
            feats, pix, intr, Rs, ts, caches, shapes, masks = [], [], [], [], [], [], [], []
            for vi in pick:
                v = augment_view(views[vi], rng, cfg.augment)
                out, cache = net.forward(normalize_image(v.image)[None, None], return_cache=True)
                fm = out[0].transpose(1, 2, 0)
                rows, cols = fm.shape[:2]
                m = _cell_mask(v, rows, cols, DEFAULT_SUBSAMPLING).reshape(-1)
                f = fm.reshape(-1, fm.shape[-1])[m]
                p = FeatureMap(np.zeros((rows, cols, 1)), v.intrinsics).pixels().reshape(-1, 2)[m]
                k = v.intrinsics
                feats.append(f)
                pix.append(p)
                intr.append(np.tile([k.fx, k.fy, k.cx, k.cy], (len(f), 1)))
                Rs.append(np.broadcast_to(v.pose.rotation, (len(f), 3, 3)))
                ts.append(np.broadcast_to(v.pose.translation, (len(f), 3)))
                caches.append(cache)
                shapes.append(out.shape)
                masks.append(m)
            X = np.concatenate(feats)
            if len(X) == 0:
                head_grads.append([np.zeros_like(p) for p in head.params()])
                continue
            raw, hcache = head.forward(X, return_cache=True)
            y, dcache = decode_output(raw, head.mean_translation, True, wclip, return_cache=True)
            loss, gy, _ = batch_loss(y, np.concatenate(pix), np.concatenate(intr), np.concatenate(Rs),
                                     np.concatenate(ts), th, cfg.curriculum, cfg.validity)
            step_loss += loss.mean()
            gout = decode_backward(gy / len(X), dcache, True, wclip).astype(X.dtype)
            hg, gX = head.backward(hcache, gout, need_input_grad=True)
            head_grads.append(hg)
            off = 0
            for cache, shape, m in zip(caches, shapes, masks):
                n = int(m.sum())
                g_full = np.zeros((m.size, shape[1]), dtype=gX.dtype)
                g_full[m] = gX[off:off + n]
                off += n
                gmap = g_full.reshape(shape[2], shape[3], shape[1]).transpose(2, 0, 1)[None]
                for acc, g in zip(net_grads, net.backward(cache, np.ascontiguousarray(gmap))):
                    acc += g
        adamw_step(net.params(), net_grads, net_state, lr)
        for head, hg, st in zip(heads, head_grads, head_states):
            adamw_step(head.params(), hg, st, lr)
        losses[step] = step_loss / len(heads)
        if callback is not None:
            callback(step, losses[step])
    return net, heads, losses
