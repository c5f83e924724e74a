"""Feature buffer construction and regression-head training."""
import io
import logging
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_matrix, check_random_state
from .errors import BadMagic, ChecksumMismatch, DimensionMismatch, EmptyDataset, VersionMismatch
from .geometry import Intrinsics, Pose
from .losses import (CurriculumConfig, ValidityConfig, WClipConfig, batch_loss, decode_backward,
                     decode_output, tau)
from .neural import OptimState, RegressionHead, adamw_step, head_forward, one_cycle_lr

log = logging.getLogger(__name__)

SHUFFLE_MODES = ("feature", "image")


@dataclass
class FeatureBufferEntry:
    feature: np.ndarray
    pixel: np.ndarray
    intrinsics: np.ndarray   # fx, fy, cx, cy
    pose: Pose
    pose_index: int


@dataclass
class TrainingBuffer:
    features: np.ndarray      # (n, C) float16
    pixels: np.ndarray        # (n, 2) float32
    intrinsics: np.ndarray    # (n, 4) float32
    pose_index: np.ndarray    # (n,) int32, into ``poses``
    poses: np.ndarray         # (P, 4, 4) float64 camera-to-world, one per image pass
    seed: int = 0

    def __len__(self):
        return len(self.features)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def entry(self, i):
        p = int(self.pose_index[i])
        return FeatureBufferEntry(self.features[i].astype(np.float32), self.pixels[i].astype(np.float64),
                                  self.intrinsics[i].astype(np.float64), Pose.from_matrix(self.poses[p]), p)

    def camera_centers(self):
        return self.poses[:, :3, 3]

    def mean_translation(self):
        return self.camera_centers().mean(axis=0)

    def subset(self, idx):
        return TrainingBuffer(self.features[idx], self.pixels[idx], self.intrinsics[idx],
                              self.pose_index[idx], self.poses, self.seed)


def fill_buffer(views, backbone, capacity, samples_per_image=1024, rng=None, augment=None):
    """Sample ``capacity`` backbone features over repeated passes of the shuffled views.

    Every image pass draws a fresh augmentation; up to ``samples_per_image`` valid
    cells are drawn without replacement.  Each pass records its (augmented)
    pose, so ``buffer.poses`` has one row per pass.
    """
    from .backbone import augment_view, extract_features

    views = list(views)
    if not views:
        raise EmptyDataset("no mapping views")
    if capacity < 1:
        raise ValueError("capacity must be positive")
    seed = rng if isinstance(rng, (int, np.integer)) else 0
    rng = check_random_state(rng)
    chunks, poses = [], []
    filled = 0
    stalled = 0
    while filled < capacity:
        order = rng.permutation(len(views))
        progress = filled
        for vi in order:
            if filled >= capacity:
                break
            view = augment_view(views[vi], rng, augment) if augment is not None else views[vi]
            fm = extract_features(view, backbone)
            feats, pix = fm.flat(only_valid=True)
            if len(feats) == 0:
                continue
            take = min(samples_per_image, len(feats), capacity - filled)
            sel = np.sort(rng.choice(len(feats), size=take, replace=False))
            k = fm.intrinsics
            chunks.append((feats[sel].astype(np.float16), pix[sel].astype(np.float32),
                           np.tile(np.array([k.fx, k.fy, k.cx, k.cy], dtype=np.float32), (take, 1)),
                           np.full(take, len(poses), dtype=np.int32)))
            poses.append(view.pose.as_matrix())
            filled += take
        if filled == progress:
            stalled += 1
            if stalled > 1:
                raise EmptyDataset("mapping views produced no valid features")
    f, p, k, i = (np.concatenate(c) for c in zip(*chunks))
    return TrainingBuffer(f, p, k, i, np.stack(poses), int(seed))


def _batch_order(buffer, rng, mode):
    n = len(buffer)
    if mode == "feature":
        return rng.permutation(n)
    # image-wise: keep each image pass contiguous, shuffle passes
    groups = np.argsort(buffer.pose_index, kind="stable")
    bounds = np.searchsorted(buffer.pose_index[groups], np.arange(len(buffer.poses) + 1))
    order = rng.permutation(len(buffer.poses))
    return np.concatenate([groups[bounds[g]:bounds[g + 1]] for g in order])


def train_head(buffer, head, epochs=16, batch_size=5120, lr_min=5e-4, lr_max=5e-3,
               curriculum=CurriculumConfig(), validity=ValidityConfig(), wclip=WClipConfig(),
               rng=None, shuffle="feature", weight_decay=1e-2, callback=None):
    """Train ``head`` in place on ``buffer``; returns ``(head, per-step mean losses)``.

    Training progress ``t`` (fraction of steps completed) drives both the
    threshold curriculum and the one-cycle learning rate.
    """
    if shuffle not in SHUFFLE_MODES:
        raise ValueError(f"shuffle must be one of {SHUFFLE_MODES}")
    if buffer.feature_dim != head.in_dim:
        raise DimensionMismatch(f"buffer features have {buffer.feature_dim} dims, head expects {head.in_dim}")
    rng = check_random_state(rng)
    n = len(buffer)
    steps_per_epoch = -(-n // batch_size)
    total = epochs * steps_per_epoch
    losses = np.zeros(total)
    if total == 0:
        return head, losses
    head.mean_translation = buffer.mean_translation().astype(np.float32)
    R_all = buffer.poses[:, :3, :3]
    t_all = buffer.poses[:, :3, 3]
    params = head.params()
    state = OptimState.for_params(params, weight_decay=weight_decay)
    dtype = head.dtype
    step = 0
    for epoch in range(epochs):
        order = _batch_order(buffer, rng, shuffle)
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            t = step / total
            X = buffer.features[idx].astype(dtype)
            pi = buffer.pose_index[idx]
            out, cache = head_forward(head, X, return_cache=True)
            y, dcache = decode_output(out, head.mean_translation, head.homogeneous, wclip, return_cache=True)
            loss, gy, _ = batch_loss(y, buffer.pixels[idx], buffer.intrinsics[idx], R_all[pi], t_all[pi],
                                     tau(t, curriculum), curriculum, validity)
            losses[step] = loss.mean()
            gout = decode_backward(gy / len(idx), dcache, head.homogeneous, wclip).astype(dtype)
            grads, _ = head.backward(cache, gout)
            adamw_step(params, grads, state, one_cycle_lr(t, lr_min, lr_max))
            if callback is not None:
                callback(step, t, losses[step])
            step += 1
        log.info("epoch %d/%d loss %.4f", epoch + 1, epochs, losses[step - steps_per_epoch:step].mean())
    return head, losses


def predict_scene_coordinates(head, features, wclip=WClipConfig(), chunk=8192):
    """Absolute scene coordinates for a ``(n, C)`` feature matrix."""
    X = check_matrix(features, head.in_dim, "features")
    out = np.empty((len(X), 3))
    for s in range(0, len(X), chunk):
        raw = head_forward(head, X[s:s + chunk])
        out[s:s + chunk] = decode_output(raw, head.mean_translation, head.homogeneous, wclip)
    return out


def evaluate_buffer_loss(head, buffer, t=1.0, curriculum=CurriculumConfig(), validity=ValidityConfig(),
                         wclip=WClipConfig(), chunk=8192):
    """Mean loss of ``head`` over the whole buffer at a fixed progress ``t``."""
    total = 0.0
    R_all = buffer.poses[:, :3, :3]
    t_all = buffer.poses[:, :3, 3]
    for s in range(0, len(buffer), chunk):
        sl = slice(s, s + chunk)
        y = predict_scene_coordinates(head, buffer.features[sl].astype(head.dtype), wclip)
        pi = buffer.pose_index[sl]
        loss, _, _ = batch_loss(y, buffer.pixels[sl], buffer.intrinsics[sl], R_all[pi], t_all[pi],
                                tau(t, curriculum), curriculum, validity)
        total += loss.sum()
    return total / len(buffer)


class SceneCoordinateRegressor(BaseEstimator):
    """Scene-specific coordinate regression head trained from a feature buffer.

    ``fit`` takes a :class:`TrainingBuffer`; ``predict`` maps a feature matrix
    ``(n, C)`` to absolute scene coordinates ``(n, 3)``.
    """

    def __init__(self, width=512, n_hidden=8, homogeneous=True, epochs=8, batch_size=1024,
                 lr_min=5e-4, lr_max=5e-3, tau_min=1.0, tau_max=50.0, schedule="circular",
                 loss="tanh", shuffle="feature", weight_decay=1e-2, random_state=None):
        self.width = width
        self.n_hidden = n_hidden
        self.homogeneous = homogeneous
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.schedule = schedule
        self.loss = loss
        self.shuffle = shuffle
        self.weight_decay = weight_decay
        self.random_state = random_state

    def curriculum(self):
        return CurriculumConfig(self.tau_min, self.tau_max, self.schedule, self.loss)

    def fit(self, X, y=None):
        if not isinstance(X, TrainingBuffer):
            raise TypeError("fit expects a TrainingBuffer")
        rng = check_random_state(self.random_state)
        head = RegressionHead.init(X.feature_dim, self.width, self.n_hidden, self.homogeneous, rng=rng)
        head.mean_translation = X.mean_translation().astype(np.float32)
        self.head_, self.loss_curve_ = train_head(
            X, head, self.epochs, self.batch_size, self.lr_min, self.lr_max, self.curriculum(),
            rng=rng, shuffle=self.shuffle, weight_decay=self.weight_decay)
        self.n_features_in_ = X.feature_dim
        return self

    def predict(self, X):
        if not hasattr(self, "head_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("SceneCoordinateRegressor is not fitted")
        return predict_scene_coordinates(self.head_, X)

    @classmethod
    def from_head(cls, head, **params):
        est = cls(width=head.width, n_hidden=head.n_hidden, homogeneous=head.homogeneous, **params)
        est.head_ = head
        est.n_features_in_ = head.in_dim
        return est


# --- buffer files ---------------------------------------------------------

BUFFER_MAGIC = b"ACEB"
BUFFER_VERSION = 1
_BUFFER_HEADER = struct.Struct("<4sHIIIQ")


def buffer_bytes(buf):
    out = io.BytesIO()
    out.write(_BUFFER_HEADER.pack(BUFFER_MAGIC, BUFFER_VERSION, len(buf), buf.feature_dim,
                                  len(buf.poses), int(buf.seed) & 0xFFFFFFFFFFFFFFFF))
    out.write(np.ascontiguousarray(buf.poses, dtype="<f8").tobytes())
    out.write(np.ascontiguousarray(buf.features, dtype="<f2").tobytes())
    out.write(np.ascontiguousarray(buf.pixels, dtype="<f4").tobytes())
    out.write(np.ascontiguousarray(buf.intrinsics, dtype="<f4").tobytes())
    out.write(np.ascontiguousarray(buf.pose_index, dtype="<u4").tobytes())
    data = out.getvalue()
    return data + struct.pack("<I", zlib.crc32(data))


def save_buffer(buf, path):
    with open(path, "wb") as f:
        f.write(buffer_bytes(buf))


def load_buffer(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != BUFFER_MAGIC:
        raise BadMagic("not a buffer file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("buffer checksum mismatch")
    _, version, n, C, P, seed = _BUFFER_HEADER.unpack_from(body)
    if version != BUFFER_VERSION:
        raise VersionMismatch(f"buffer version {version}")
    off = _BUFFER_HEADER.size

    def take(dtype, count, shape):
        nonlocal off
        a = np.frombuffer(body, dtype, count, off).reshape(shape)
        off += a.nbytes
        return a.astype(a.dtype.newbyteorder("="))

    poses = take("<f8", P * 16, (P, 4, 4))
    feats = take("<f2", n * C, (n, C))
    pix = take("<f4", n * 2, (n, 2))
    intr = take("<f4", n * 4, (n, 4))
    pidx = take("<u4", n, (n,)).astype(np.int32)
    return TrainingBuffer(feats, pix, intr, pidx, poses, seed)
