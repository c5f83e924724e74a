"""Small seeded fixtures reused by unit and acceptance tests."""
import numpy as np

from acereloc.geometry import Pose, random_pose


def trajectory_pair(seed, n=200, outliers=0.1, noise=0.02):
    """A smooth trajectory, and its rigidly moved copy with noise and gross outliers.

    Noise is bounded per axis so every inlier moves at most ``noise`` metres.
    Returns ``(a, b, transform, outlier_mask)`` with ``b ~ transform(a)``.
    """
    rng = np.random.default_rng(seed)
    s = np.linspace(0, 4 * np.pi, n)
    a = np.column_stack([3 * np.cos(s), 2 * np.sin(1.3 * s), 0.3 * s]) + rng.normal(scale=0.05, size=(n, 3))
    T = random_pose(rng, 5.0)
    b = T.apply(a) + rng.uniform(-1, 1, (n, 3)) * noise / np.sqrt(3)
    bad = np.zeros(n, dtype=bool)
    bad[rng.permutation(n)[:int(round(outliers * n))]] = True
    direction = rng.normal(size=(int(bad.sum()), 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    b[bad] += direction * rng.uniform(1.0, 3.0, (int(bad.sum()), 1))
    return a, b, T, bad
