"""Dense-layer machinery with hand-written backward passes.

Everything here works on plain numpy arrays.  Linear layers store weights as
``(in, out)`` so a batch ``X`` of shape ``(B, in)`` maps to ``X @ W + b``.
"""
import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_random_state
from .errors import BadMagic, ChecksumMismatch, DimensionMismatch, VersionMismatch

F16_MAX = 65504.0


def default_skips(n_hidden):
    """Residual additions after every third hidden layer, excluding the last."""
    return tuple(range(3, n_hidden, 3))


class RegressionHead:
    """MLP mapping ``C_f``-dim features to 3 (direct) or 4 (homogeneous) outputs.

    ``n_hidden`` ReLU layers of equal ``width`` followed by a linear output
    layer.  A skip after hidden layer ``k`` adds the activation of the previous
    anchor (the output of hidden layer 1, or of the previous skip) to layer
    ``k``'s ReLU output.
    """

    def __init__(self, weights, biases, homogeneous=True, skips=None, mean_translation=None):
        self.weights = list(weights)
        self.biases = list(biases)
        self.homogeneous = bool(homogeneous)
        n_hidden = len(self.weights) - 1
        self.skips = tuple(default_skips(n_hidden) if skips is None else skips)
        self.mean_translation = (
            np.zeros(3, dtype=np.float32) if mean_translation is None
            else np.asarray(mean_translation, dtype=np.float32).reshape(3)
        )
        self._check()

    @classmethod
    def init(cls, in_dim, width=512, n_hidden=8, homogeneous=True, skips=None, rng=None,
             dtype=np.float32, output_scale=1e-3):
        rng = check_random_state(rng)
        dims = [in_dim] + [width] * n_hidden + [4 if homogeneous else 3]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            std = np.sqrt(2.0 / a) if i < n_hidden else output_scale
            weights.append((rng.standard_normal((a, b)) * std).astype(dtype))
            biases.append(np.zeros(b, dtype=dtype))
        return cls(weights, biases, homogeneous, skips)

    def _check(self):
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionMismatch(f"layer {i}: weight {W.shape} / bias {b.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise DimensionMismatch(f"layer {i} input {W.shape[0]} != previous output")
        if self.weights[-1].shape[1] != (4 if self.homogeneous else 3):
            raise DimensionMismatch("output width must be 4 (homogeneous) or 3 (direct)")
        for k in self.skips:
            if not 1 < k <= self.n_hidden:
                raise DimensionMismatch(f"skip after layer {k} outside hidden range")
            if self.weights[k - 1].shape[1] != self.weights[0].shape[1]:
                raise DimensionMismatch("skip connections must join equal-width activations")

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def width(self):
        return self.weights[0].shape[1]

    @property
    def n_hidden(self):
        return len(self.weights) - 1

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self, dtype=None):
        cast = (lambda a: a.copy()) if dtype is None else (lambda a: a.astype(dtype))
        return RegressionHead([cast(w) for w in self.weights], [cast(b) for b in self.biases],
                              self.homogeneous, self.skips, self.mean_translation.copy())

    def quantized(self):
        """Copy with weights and biases rounded through float16 (what a saved map holds)."""
        q = self.copy()
        q.weights = [f16_roundtrip(w).astype(self.dtype) for w in q.weights]
        q.biases = [f16_roundtrip(b).astype(self.dtype) for b in q.biases]
        return q

    def forward(self, X, return_cache=False):
        return head_forward(self, X, return_cache)

    def backward(self, cache, grad_out, need_input_grad=False):
        return head_backward(self, cache, grad_out, need_input_grad)


def head_forward(head, X, return_cache=False):
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != head.in_dim:
        raise DimensionMismatch(f"expected batch of width {head.in_dim}, got shape {X.shape}")
    X = X.astype(head.dtype, copy=False)
    acts = [X]
    masks = []
    anchor = None
    h = X
    for i in range(head.n_hidden):
        z = h @ head.weights[i]
        z += head.biases[i]
        mask = z > 0
        np.maximum(z, 0, out=z)
        layer = i + 1
        if layer in head.skips:
            z += acts[anchor]
        if layer == 1 or layer in head.skips:
            anchor = layer
        acts.append(z)
        masks.append(mask)
        h = z
    out = h @ head.weights[-1]
    out += head.biases[-1]
    if return_cache:
        return out, (acts, masks)
    return out


def _anchor_of(head):
    """For each skip layer, the activation index it adds."""
    anchors, anchor = {}, None
    for layer in range(1, head.n_hidden + 1):
        if layer in head.skips:
            anchors[layer] = anchor
        if layer == 1 or layer in head.skips:
            anchor = layer
    return anchors


def head_backward(head, cache, grad_out, need_input_grad=False):
    """Gradients for every weight and bias (same order as ``head.params()``).

    Returns ``(param_grads, input_grad)``; ``input_grad`` is ``None`` unless
    requested.
    """
    acts, masks = cache
    g = np.asarray(grad_out, dtype=head.dtype)
    if g.shape != (acts[0].shape[0], head.out_dim):
        raise DimensionMismatch(f"output gradient shape {g.shape} does not match forward")
    n = head.n_hidden
    anchors = _anchor_of(head)
    gW = [None] * (n + 1)
    gb = [None] * (n + 1)
    gW[n] = acts[n].T @ g
    gb[n] = g.sum(axis=0)
    pending = {n: g @ head.weights[n].T}
    input_grad = None
    for layer in range(n, 0, -1):
        ga = pending.pop(layer)
        if layer in head.skips:
            a = anchors[layer]
            pending[a] = pending[a] + ga if a in pending else ga.copy()
        ga *= masks[layer - 1]
        gW[layer - 1] = acts[layer - 1].T @ ga
        gb[layer - 1] = ga.sum(axis=0)
        if layer > 1 or need_input_grad:
            gin = ga @ head.weights[layer - 1].T
            if layer - 1 in pending:
                pending[layer - 1] += gin
            else:
                pending[layer - 1] = gin
    if need_input_grad:
        input_grad = pending.pop(0)
    grads = []
    for w, b in zip(gW, gb):
        grads += [w, b]
    return grads, input_grad


# --- convolutions ---------------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, Ho, Wo, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d_forward(x, w, b, stride=1, pad=0):
    """``x``: (B, C, H, W); ``w``: (O, C, kh, kw).  Returns output and a cache."""
    O, C, kh, kw = w.shape
    if x.shape[1] != C:
        raise DimensionMismatch(f"conv expects {C} channels, got {x.shape[1]}")
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(O, -1).T
    out += b
    out = out.reshape(x.shape[0], Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, stride, pad, Ho, Wo)


def conv2d_backward(w, cache, gout, need_input_grad=True):
    cols, xshape, stride, pad, Ho, Wo = cache
    O, C, kh, kw = w.shape
    B, _, H, W = xshape
    g = gout.transpose(0, 2, 3, 1).reshape(-1, O)
    gw = (g.T @ cols).reshape(w.shape)
    gb = g.sum(axis=0)
    if not need_input_grad:
        return gw, gb, None
    gcols = (g @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    gx = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gw, gb, gx


class BackboneNet:
    """Small fully convolutional feature extractor with total stride 8.

    Grayscale input -> conv3x3 c16 s1 -> c32 s2 -> c64 s2 -> c128 s2 -> two
    residual blocks of two 3x3 convs -> 1x1 projection to ``out_channels``.
    ReLU after every conv except the projection.
    """

    STRIDES = (1, 2, 2, 2)

    def __init__(self, params, out_channels):
        self.params_ = list(params)
        self.out_channels = out_channels

    @classmethod
    def init(cls, out_channels=128, rng=None, dtype=np.float32, widths=(16, 32, 64, 128)):
        rng = check_random_state(rng)
        params = []

        def conv(o, c, k):
            params.append((rng.standard_normal((o, c, k, k)) * np.sqrt(2.0 / (c * k * k))).astype(dtype))
            params.append(np.zeros(o, dtype=dtype))

        prev = 1
        for wd in widths:
            conv(wd, prev, 3)
            prev = wd
        for _ in range(4):
            conv(prev, prev, 3)
        conv(out_channels, prev, 1)
        return cls(params, out_channels)

    def params(self):
        return self.params_

    def n_params(self):
        return sum(p.size for p in self.params_)

    def copy(self):
        return BackboneNet([p.copy() for p in self.params_], self.out_channels)

    def forward(self, x, return_cache=False):
        """``x``: (B, 1, H, W) float array -> (B, C_f, ceil(H/8), ceil(W/8))."""
        x = np.asarray(x, dtype=self.params_[0].dtype)
        caches = []
        h = x
        p = self.params_
        for i, s in enumerate(self.STRIDES):
            h, c = conv2d_forward(h, p[2 * i], p[2 * i + 1], stride=s, pad=1)
            mask = h > 0
            h *= mask
            caches.append((c, mask))
        for blk in range(2):
            i0 = 4 + 2 * blk
            res = h
            t, c1 = conv2d_forward(h, p[2 * i0], p[2 * i0 + 1], stride=1, pad=1)
            m1 = t > 0
            t *= m1
            t, c2 = conv2d_forward(t, p[2 * i0 + 2], p[2 * i0 + 3], stride=1, pad=1)
            t += res
            m2 = t > 0
            t *= m2
            caches.append((c1, m1, c2, m2))
            h = t
        out, c = conv2d_forward(h, p[16], p[17], stride=1, pad=0)
        caches.append(c)
        if return_cache:
            return out, caches
        return out

    def backward(self, caches, gout):
        p = self.params_
        grads = [None] * len(p)
        gw, gb, g = conv2d_backward(p[16], caches[-1], gout)
        grads[16], grads[17] = gw, gb
        for blk in (1, 0):
            i0 = 4 + 2 * blk
            c1, m1, c2, m2 = caches[4 + blk]
            g = g * m2
            gres = g
            gw, gb, g = conv2d_backward(p[2 * i0 + 2], c2, g)
            grads[2 * i0 + 2], grads[2 * i0 + 3] = gw, gb
            g *= m1
            gw, gb, g = conv2d_backward(p[2 * i0], c1, g)
            grads[2 * i0], grads[2 * i0 + 1] = gw, gb
            g += gres
        for i in (3, 2, 1, 0):
            c, mask = caches[i]
            g = g * mask
            gw, gb, g = conv2d_backward(p[2 * i], c, g, need_input_grad=i > 0)
            grads[2 * i], grads[2 * i + 1] = gw, gb
        return grads


# --- optimisation ---------------------------------------------------------

@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adamw_step(params, grads, state, lr):
    """In-place AdamW update with decoupled weight decay; returns ``(params, state)``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step_size = lr / c1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p -= step_size * (m / denom)
    return params, state


def one_cycle_lr(t, lr_min, lr_max):
    """Linear warm-up to ``lr_max`` at mid-training, cosine decay back to ``lr_min``."""
    t = min(max(float(t), 0.0), 1.0)
    if t <= 0.5:
        return lr_min + (lr_max - lr_min) * (t / 0.5)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * (t - 0.5) / 0.5))


def f16_roundtrip(x):
    """Round float32 values through IEEE binary16 (round-to-nearest-even), clamping to the finite range."""
    x = np.asarray(x, dtype=np.float32)
    return np.clip(x, -F16_MAX, F16_MAX).astype(np.float16).astype(np.float32)


# --- map files ------------------------------------------------------------

MAP_MAGIC = b"ACEM"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHBIII3f")


def map_bytes(head):
    """Serialize ``head`` into the little-endian map format (float16 weights, CRC32 trailer)."""
    if tuple(head.skips) != default_skips(head.n_hidden):
        raise ValueError("map files only store heads with the default skip layout")
    buf = io.BytesIO()
    buf.write(_MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, int(head.homogeneous), head.in_dim,
                               head.width, head.n_hidden, *map(float, head.mean_translation)))
    for W, b in zip(head.weights, head.biases):
        # row-major (out, in) layout
        buf.write(np.ascontiguousarray(f16_roundtrip(W).T).astype("<f2").tobytes())
        buf.write(f16_roundtrip(b).astype("<f2").tobytes())
    data = buf.getvalue()
    return data + struct.pack("<I", zlib.crc32(data))


def save_map(head, path):
    with open(path, "wb") as f:
        f.write(map_bytes(head))


def map_from_bytes(data):
    if len(data) < 4 or data[:4] != MAP_MAGIC:
        raise BadMagic("not a map file")
    if len(data) < _MAP_HEADER.size + 4:
        raise ChecksumMismatch("map file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("map checksum mismatch")
    magic, version, homog, in_dim, width, n_hidden, mx, my, mz = _MAP_HEADER.unpack_from(body)
    if version != MAP_VERSION:
        raise VersionMismatch(f"map version {version}, expected {MAP_VERSION}")
    dims = [in_dim] + [width] * n_hidden + [4 if homog else 3]
    off = _MAP_HEADER.size
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(body, "<f2", a * b, off).reshape(b, a).T.astype(np.float32)
        off += 2 * a * b
        bias = np.frombuffer(body, "<f2", b, off).astype(np.float32)
        off += 2 * b
        weights.append(np.ascontiguousarray(W))
        biases.append(bias)
    if off != len(body):
        raise ChecksumMismatch("map payload length mismatch")
    return RegressionHead(weights, biases, bool(homog), None, np.array([mx, my, mz], dtype=np.float32))


def load_map(path):
    with open(path, "rb") as f:
        return map_from_bytes(f.read())
