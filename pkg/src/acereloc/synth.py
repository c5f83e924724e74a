"""Seeded synthetic scenes with exact ground truth.

A world is a cloud of landmarks, each carrying a fixed unit descriptor (used by
the oracle backbone) and a gray value (used when rendering images for the
handcrafted and learned backbones).
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import check_random_state
from .errors import InfeasibleSpec
from .features import DEFAULT_SUBSAMPLING, FeatureMap, View, grid_shape
from .geometry import Intrinsics, Pose, compose, look_at

MIN_DESCRIPTOR_DISTANCE = 0.1
DEFAULT_INTRINSICS = Intrinsics(525.0, 525.0, 320.0, 240.0, 640, 480)


@dataclass
class SyntheticWorld:
    seed: int
    landmarks: np.ndarray        # (n, 3)
    descriptors: np.ndarray      # (n, C) float32, unit norm
    extent: np.ndarray           # (2, 3) lower / upper corner
    albedo: np.ndarray = None    # (n,) gray values in [0, 1]
    splat_size: float = 0.04     # landmark diameter in meters for image rendering
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    params: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return len(self.landmarks)

    @property
    def descriptor_dim(self):
        return self.descriptors.shape[1]

    @property
    def centroid(self):
        return self.extent.mean(axis=0)

    def to_json(self):
        """Generation recipe; the world is regenerated from it deterministically."""
        return dict(self.params, noise_sigma=self.noise_sigma, outlier_fraction=self.outlier_fraction)

    @classmethod
    def from_json(cls, d):
        parts = d.get("parts")
        if parts:
            worlds = [generate_world(**p) for p in parts]
            w = merge_worlds(worlds, seed=d.get("seed", 0))
        else:
            w = generate_world(d["seed"], d["n_points"], d["extent"], d.get("descriptor_dim", 128),
                               d.get("coherence", 0.0), d.get("length_scale", 1.0))
        w.noise_sigma = float(d.get("noise_sigma", 0.0))
        w.outlier_fraction = float(d.get("outlier_fraction", 0.0))
        return w


def _box(extent):
    ext = np.asarray(extent, dtype=np.float64)
    if ext.ndim == 0:
        return np.stack([-0.5 * ext * np.ones(3), 0.5 * ext * np.ones(3)])
    if ext.shape == (3,):
        return np.stack([-0.5 * ext, 0.5 * ext])
    return ext.reshape(2, 3)


def _fix_descriptor_collisions(desc, fresh, min_dist=MIN_DESCRIPTOR_DISTANCE, chunk=2048):
    n = len(desc)
    # ||a-b|| > d  <=>  a.b < 1 - d^2 / 2 for unit vectors
    max_dot = 1.0 - 0.5 * min_dist ** 2
    for _ in range(10):
        bad = []
        for s in range(0, n, chunk):
            dots = desc[s:s + chunk] @ desc.T
            idx = np.arange(s, min(s + chunk, n))
            dots[np.arange(len(idx)), idx] = -np.inf
            # only flag the later index of each offending pair
            hits = np.nonzero(dots >= max_dot)
            for a, b in zip(idx[hits[0]], hits[1]):
                if a > b:
                    bad.append(a)
        if not bad:
            return desc
        bad = np.unique(bad)
        desc[bad] = fresh(bad)
    raise InfeasibleSpec("could not generate distinct descriptors")


def _unit(x):
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def generate_world(seed, n_points, extent=5.0, descriptor_dim=128, coherence=0.5, length_scale=1.0):
    """Uniform landmarks in a box plus seeded unit descriptors.

    With ``coherence > 0`` that share of each descriptor's energy is a smooth
    random-Fourier function of the landmark position (correlation length
    ``length_scale`` m), the rest an independent random direction. Nearby
    landmarks then look alike, as patches of one surface do for a real
    backbone; 0 gives fully independent descriptors.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not 0.0 <= coherence < 1.0:
        raise ValueError("coherence must be in [0, 1)")
    rng = np.random.default_rng(seed)
    box = _box(extent)
    pts = rng.uniform(box[0], box[1], size=(n_points, 3))
    freq = rng.standard_normal((descriptor_dim, 3)) / length_scale
    phase = rng.uniform(0.0, 2 * np.pi, descriptor_dim)

    def fresh(idx):
        noise = _unit(rng.standard_normal((len(idx), descriptor_dim)))
        if coherence == 0.0:
            return noise
        smooth = _unit(np.cos(pts[idx] @ freq.T + phase))
        return _unit(np.sqrt(coherence) * smooth + np.sqrt(1.0 - coherence) * noise)

    desc = fresh(np.arange(n_points))
    if n_points <= 50_000 and descriptor_dim >= 2:
        desc = _fix_descriptor_collisions(desc, fresh)
    albedo = rng.uniform(0.0, 1.0, n_points)
    params = dict(seed=int(seed), n_points=int(n_points), extent=box.tolist(),
                  descriptor_dim=int(descriptor_dim), coherence=float(coherence),
                  length_scale=float(length_scale))
    return SyntheticWorld(int(seed), pts, desc, box, albedo, params=params)


def merge_worlds(worlds, seed=0):
    """Union of several worlds (e.g. rooms) in one scene frame."""
    if len({w.descriptor_dim for w in worlds}) != 1:
        raise ValueError("worlds must share a descriptor dimension")
    box = np.stack([np.min([w.extent[0] for w in worlds], axis=0),
                    np.max([w.extent[1] for w in worlds], axis=0)])
    params = dict(seed=int(seed), parts=[w.params for w in worlds])
    return SyntheticWorld(int(seed), np.concatenate([w.landmarks for w in worlds]),
                          np.concatenate([w.descriptors for w in worlds]), box,
                          np.concatenate([w.albedo for w in worlds]), params=params)


# --- trajectories ---------------------------------------------------------

@dataclass
class TrajectorySpec:
    kind: str = "orbit"              # orbit | arc | grid
    n_frames: int = 100
    radius: float = 6.0
    target: Optional[tuple] = None   # defaults to the world centroid
    elevation_deg: tuple = (10.0, 35.0)
    arc_deg: float = 360.0           # azimuth span (arc kind)
    azimuth_offset_deg: float = 0.0
    grid_shape: tuple = (10, 10)     # grid kind: frames laid out on a plane
    grid_spacing: float = 0.5
    jitter: float = 0.0              # random target offset (m), for non-uniform viewing
    pose_noise: float = 0.0          # std of recorded-position noise (m)
    rotation_noise_deg: float = 0.0  # std of recorded-rotation noise (deg)
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    min_visible: float = 0.3
    random_azimuth: bool = False

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.kind not in ("orbit", "arc", "grid"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class Frame:
    frame_id: str
    pose: Pose              # true camera-to-world pose
    intrinsics: Intrinsics
    recorded_pose: Pose     # what a mapping system would report (noisy)


def visible_fraction(world, pose, k):
    e = pose.inverse().apply(world.landmarks)
    z = e[:, 2]
    ok = z > 1e-6
    u = np.where(ok, k.fx * e[:, 0] / np.where(ok, z, 1) + k.cx, -1)
    v = np.where(ok, k.fy * e[:, 1] / np.where(ok, z, 1) + k.cy, -1)
    inside = ok & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return inside.mean()


def _analytic_center(spec, target, i, rng):
    n = spec.n_frames
    frac = (i + 0.5) / n
    if spec.kind in ("orbit", "arc"):
        span = 360.0 if spec.kind == "orbit" else spec.arc_deg
        if spec.random_azimuth:
            az = spec.azimuth_offset_deg + rng.uniform(0, span)
            el = rng.uniform(*spec.elevation_deg)
        else:
            az = spec.azimuth_offset_deg + span * (i / n if spec.kind == "orbit" else frac)
            lo, hi = spec.elevation_deg
            el = lo + (hi - lo) * 0.5 * (1 - np.cos(2 * np.pi * 3 * frac))
        a, b = np.radians(az), np.radians(el)
        d = np.array([np.cos(b) * np.cos(a), np.cos(b) * np.sin(a), np.sin(b)])
        return target + spec.radius * d
    gr, gc = spec.grid_shape
    r, c = divmod(i % (gr * gc), gc)
    offset = np.array([(c - (gc - 1) / 2) * spec.grid_spacing, 0.0, (r - (gr - 1) / 2) * spec.grid_spacing])
    return target + np.array([0.0, -spec.radius, 0.0]) + offset


def generate_trajectory(spec, world, rng=None, prefix="frame", max_retries=50):
    """Camera frames looking at the target; every frame sees >= ``spec.min_visible`` of the landmarks."""
    rng = check_random_state(rng)
    target = world.centroid if spec.target is None else np.asarray(spec.target, dtype=np.float64)
    k = spec.intrinsics
    frames = []
    for i in range(spec.n_frames):
        for attempt in range(max_retries):
            center = _analytic_center(spec, target, i, rng)
            aim = target if spec.kind != "grid" else center + np.array([0.0, 1.0, 0.0])
            if spec.jitter and (attempt or spec.kind != "grid"):
                aim = aim + rng.normal(0, spec.jitter, 3)
            elif attempt:
                aim = aim + rng.normal(0, 0.2 * attempt, 3)
            pose = look_at(center, aim)
            if visible_fraction(world, pose, k) >= spec.min_visible:
                break
        else:
            raise InfeasibleSpec(f"frame {i}: could not satisfy visibility after {max_retries} tries")
        recorded = pose
        if spec.pose_noise or spec.rotation_noise_deg:
            dR = Rotation.from_rotvec(np.radians(rng.normal(0, spec.rotation_noise_deg, 3))).as_matrix()
            recorded = Pose(pose.rotation @ dR, pose.translation + rng.normal(0, spec.pose_noise, 3))
        frames.append(Frame(f"{prefix}-{i:05d}", pose, k, recorded))
    return frames


# --- oracle observations --------------------------------------------------

def _view_rng(seed, pose, k):
    key = np.concatenate([pose.rotation.ravel(), pose.translation, k.as_array()]).tobytes()
    digest = np.frombuffer(hashlib.sha256(key).digest()[:16], dtype=np.uint32)
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *map(int, digest)])


def render_observations(world, pose, k, subsampling=DEFAULT_SUBSAMPLING, noise_sigma=None,
                        outlier_fraction=None, rng=None):
    """Oracle feature map and the ground-truth scene coordinate of every cell.

    Each cell holds the descriptor of the nearest-depth landmark projecting into
    it (so within ``subsampling/sqrt(2)`` px of the cell center).  Empty cells
    get a zero feature, ``valid=False`` and a NaN coordinate.
    """
    noise_sigma = world.noise_sigma if noise_sigma is None else noise_sigma
    outlier_fraction = world.outlier_fraction if outlier_fraction is None else outlier_fraction
    rows, cols = grid_shape(k.height, k.width, subsampling)
    C = world.descriptor_dim
    e = pose.inverse().apply(world.landmarks)
    z = e[:, 2]
    front = np.nonzero(z > 1e-6)[0]
    u = k.fx * e[front, 0] / z[front] + k.cx
    v = k.fy * e[front, 1] / z[front] + k.cy
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    idx = front[inside]
    col = (u[inside] // subsampling).astype(np.int64)
    row = (v[inside] // subsampling).astype(np.int64)
    cell = row * cols + col
    order = np.lexsort((idx, z[idx], cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    winners = idx[order][first]
    win_cells = cell_sorted[first]

    data = np.zeros((rows * cols, C), dtype=np.float32)
    gt = np.full((rows * cols, 3), np.nan)
    valid = np.zeros(rows * cols, dtype=bool)
    feats = world.descriptors[winners].copy()
    if noise_sigma or outlier_fraction:
        rng = _view_rng(world.seed, pose, k) if rng is None else check_random_state(rng)
        if noise_sigma:
            feats = feats + rng.normal(0.0, noise_sigma, feats.shape).astype(np.float32)
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        if outlier_fraction:
            swap = rng.random(len(feats)) < outlier_fraction
            rnd = rng.standard_normal((int(swap.sum()), C)).astype(np.float32)
            feats[swap] = rnd / np.linalg.norm(rnd, axis=1, keepdims=True)
    data[win_cells] = feats
    gt[win_cells] = world.landmarks[winners]
    valid[win_cells] = True
    fm = FeatureMap(data.reshape(rows, cols, C), k, subsampling, valid.reshape(rows, cols))
    return fm, gt.reshape(rows, cols, 3)


# --- image rendering ------------------------------------------------------

def render_image(world, pose, k, background=0.5, max_radius=6):
    """Grayscale image of depth-sorted landmark discs (float32 in [0, 1])."""
    e = pose.inverse().apply(world.landmarks)
    z = e[:, 2]
    ok = z > 0.05
    e, z, alb = e[ok], z[ok], world.albedo[ok]
    u = k.fx * e[:, 0] / z + k.cx
    v = k.fy * e[:, 1] / z + k.cy
    rad = np.clip(0.5 * world.splat_size * 0.5 * (k.fx + k.fy) / z, 0.7, max_radius)
    keep = (u > -max_radius) & (u < k.width + max_radius) & (v > -max_radius) & (v < k.height + max_radius)
    u, v, z, alb, rad = u[keep], v[keep], z[keep], alb[keep], rad[keep]
    R = int(np.ceil(rad.max())) if len(rad) else 0
    pix, dep, val = [], [], []
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            px = np.floor(u).astype(np.int64) + dx
            py = np.floor(v).astype(np.int64) + dy
            d2 = (px + 0.5 - u) ** 2 + (py + 0.5 - v) ** 2
            m = (d2 <= rad ** 2) & (px >= 0) & (px < k.width) & (py >= 0) & (py < k.height)
            pix.append(py[m] * k.width + px[m])
            dep.append(z[m])
            val.append(alb[m])
    img = np.full(k.height * k.width, background, dtype=np.float32)
    if pix:
        pix, dep, val = np.concatenate(pix), np.concatenate(dep), np.concatenate(val)
        order = np.lexsort((dep, pix))
        p_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = p_sorted[1:] != p_sorted[:-1]
        img[p_sorted[first]] = val[order][first]
    return img.reshape(k.height, k.width)


def frames_to_views(frames, world=None, with_images=False, recorded=False):
    views = []
    for f in frames:
        pose = f.recorded_pose if recorded else f.pose
        img = render_image(world, f.pose, f.intrinsics) if with_images else None
        views.append(View(f.frame_id, pose, f.intrinsics, img))
    return views


# --- dataset output -------------------------------------------------------

def _write_pose(path, pose):
    m = pose.as_matrix()
    path.write_text("\n".join(" ".join(f"{x:.9g}" for x in row) for row in m) + "\n")


def _write_pgm(path, img):
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def write_dataset(root, frames, split, world=None, write_features=True, write_images=False,
                  subsampling=DEFAULT_SUBSAMPLING):
    """Write ``frames`` under ``root/split`` in the dataset directory layout.

    Poses written are the recorded ones.  Oracle features are rendered from the
    true poses, so noisy-pose datasets always get a ``features/`` directory.
    """
    from .features import save_feature_map

    root = Path(root)
    base = root / split
    (base / "poses").mkdir(parents=True, exist_ok=True)
    (base / "calibration").mkdir(parents=True, exist_ok=True)
    noisy = any(not np.array_equal(f.pose.as_matrix(), f.recorded_pose.as_matrix()) for f in frames)
    if world is not None:
        (root / "world.json").write_text(json.dumps(world.to_json(), indent=1))
        write_features = write_features or noisy
    if write_features and world is not None:
        (base / "features").mkdir(exist_ok=True)
    if write_images and world is not None:
        (base / "rgb").mkdir(exist_ok=True)
    for f in frames:
        _write_pose(base / "poses" / f"{f.frame_id}.txt", f.recorded_pose)
        k = f.intrinsics
        (base / "calibration" / f"{f.frame_id}.txt").write_text(
            f"{k.fx:.9g} {k.fy:.9g} {k.cx:.9g} {k.cy:.9g} {k.width} {k.height}\n")
        if write_features and world is not None:
            fm, _ = render_observations(world, f.pose, k, subsampling)
            save_feature_map(fm, base / "features" / f"{f.frame_id}.acef")
        if write_images and world is not None:
            _write_pgm(base / "rgb" / f"{f.frame_id}.pgm", render_image(world, f.pose, k))
    return base
