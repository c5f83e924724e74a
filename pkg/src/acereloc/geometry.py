"""Rigid transforms, pinhole projection and pose-error metrics.

Poses are camera-to-world: a camera-space point ``e`` maps to the scene point
``y = R @ e + t``.  The translation is therefore the camera center.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import check_points
from .errors import BehindCamera, NonPositiveDepth

#: Reprojection error reported for points at or behind the image plane.
INVALID_REPROJECTION = np.inf


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    @classmethod
    def from_quaternion(cls, wxyz, translation):
        w, x, y, z = wxyz
        return cls(Rotation.from_quat([x, y, z, w]).as_matrix(), translation)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_quaternion(self):
        """Rotation as a ``(w, x, y, z)`` unit quaternion with ``w >= 0``."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        return -q if w < 0 else q

    @property
    def center(self):
        return self.translation

    def apply(self, points):
        """Map camera-space points into the scene frame. Accepts ``(3,)`` or ``(n, 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, alpha, width=None, height=None):
        """Intrinsics of the image resized by ``alpha``."""
        w = int(round(self.width * alpha)) if width is None else int(width)
        h = int(round(self.height * alpha)) if height is None else int(height)
        return Intrinsics(self.fx * alpha, self.fy * alpha, self.cx * alpha, self.cy * alpha, w, h)

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


def compose(a, b):
    """Pose ``a∘b``: applying the result equals ``a.apply(b.apply(e))``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p):
    return p.inverse()


def rot_x(deg):
    return Pose(Rotation.from_euler("x", deg, degrees=True).as_matrix())


def rot_y(deg):
    return Pose(Rotation.from_euler("y", deg, degrees=True).as_matrix())


def rot_z(deg):
    return Pose(Rotation.from_euler("z", deg, degrees=True).as_matrix())


def random_pose(rng, translation_scale=1.0):
    R = Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()
    return Pose(R, rng.uniform(-translation_scale, translation_scale, 3))


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose at ``center`` with the optical axis (+z) towards ``target``.

    Uses the usual vision convention: +x right, +y down in the image.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), center)


def project(k, e):
    """Pinhole projection of camera-space point(s).

    Raises ``BehindCamera`` if any point has non-positive depth; use
    :func:`project_points` for the non-raising vectorized variant.
    """
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    pts = check_points(e, 3, "camera points")
    if np.any(pts[:, 2] <= 0):
        raise BehindCamera("point at or behind the image plane")
    uv = project_points(k, pts)
    return uv[0] if single else uv


def project_points(k, e):
    """Vectorized projection; entries with ``z <= 0`` come back as NaN."""
    e = np.asarray(e, dtype=np.float64)
    z = e[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * e[:, 0] / z + k.cx
        v = k.fy * e[:, 1] / z + k.cy
    uv = np.stack([u, v], axis=1)
    uv[z <= 0] = np.nan
    return uv


def unproject(k, x, depth):
    """Camera-space point at ``depth`` along the ray through pixel(s) ``x``."""
    x = np.asarray(x, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    single = x.ndim == 1
    px = check_points(x, 2, "pixels")
    d = np.broadcast_to(depth, (px.shape[0],)) if depth.ndim == 0 else depth.reshape(-1)
    e = np.stack([(px[:, 0] - k.cx) / k.fx * d, (px[:, 1] - k.cy) / k.fy * d, d], axis=1)
    return e[0] if single else e


def reprojection_error(x, y, h, k):
    """Pixel distance between observed pixel(s) ``x`` and the projection of scene point(s) ``y``.

    ``h`` is the camera-to-world pose.  Points at or behind the image plane get
    ``INVALID_REPROJECTION`` (``+inf``).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    px = check_points(x, 2, "pixels")
    ys = check_points(y, 3, "scene points")
    inv = h.inverse()
    e = inv.apply(ys)
    uv = project_points(k, e)
    err = np.linalg.norm(uv - px, axis=1)
    err[~(e[:, 2] > 0)] = INVALID_REPROJECTION
    return float(err[0]) if single else err


def rotation_angle_deg(R):
    return float(np.degrees(Rotation.from_matrix(R).magnitude()))


def pose_error(est, gt):
    """``(translation_cm, rotation_deg)`` between two camera-to-world poses.

    Translation is the distance between camera centers.
    """
    t_cm = 100.0 * float(np.linalg.norm(est.center - gt.center))
    r_deg = rotation_angle_deg(est.rotation.T @ gt.rotation)
    return t_cm, r_deg


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
