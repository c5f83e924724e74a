"""Position-clustered mapping subsets and multi-head localization."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_points, check_random_state
from .errors import DegeneratePositions, NoHeads, ParseError, TooFewFrames
from .solver import SolverConfig, localize_frame

MAX_LLOYD_ITERS = 100


@dataclass
class ClusterAssignment:
    n_clusters: int
    labels: np.ndarray

    def members(self, c):
        return np.flatnonzero(self.labels == c)

    def sizes(self):
        return np.bincount(self.labels, minlength=self.n_clusters)


def _kmeanspp_seeds(x, rng):
    first = int(rng.integers(len(x)))
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    second = int(rng.choice(len(x), p=d2 / d2.sum()))
    return x[[first, second]].copy()


def kmeans2(positions, rng=None):
    """Split positions into two non-empty groups: kmeans++ seeding, then Lloyd to a fixed point.

    Returns a boolean array, True for members of the second cluster.
    """
    x = check_points(positions, 3, "positions")
    if len(x) < 2 or np.all(np.ptp(x, axis=0) == 0):
        raise DegeneratePositions("need at least two distinct positions")
    rng = check_random_state(rng)
    centers = _kmeanspp_seeds(x, rng)
    labels = None
    for _ in range(MAX_LLOYD_ITERS):
        d = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
        new = d[:, 1] < d[:, 0]
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in (0, 1):
            sel = labels == c
            if sel.any():
                centers[c] = x[sel].mean(axis=0)
    if labels.all() or not labels.any():
        # an emptied cluster takes the point farthest from the mean
        far = int(np.argmax(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))
        labels[far] = not labels[far]
    return labels


def hierarchical_cluster(positions, n_clusters, rng=None):
    """Repeatedly split the largest cluster in two until there are ``n_clusters``.

    Ties on size go to the lowest cluster index; the split-off half gets the
    next free index.
    """
    x = check_points(positions, 3, "positions")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if len(x) < n_clusters:
        raise TooFewFrames(f"{len(x)} frames cannot form {n_clusters} clusters")
    rng = check_random_state(rng)
    labels = np.zeros(len(x), dtype=np.int64)
    for new in range(1, n_clusters):
        sizes = np.bincount(labels, minlength=new)
        # only clusters with distinct positions can be split
        order = sorted(range(new), key=lambda c: (-sizes[c], c))
        for c in order:
            idx = np.flatnonzero(labels == c)
            if len(idx) < 2:
                continue
            try:
                second = kmeans2(x[idx], rng)
            except DegeneratePositions:
                # identical positions: split by index so the count still comes out exact
                second = np.arange(len(idx)) >= len(idx) // 2
            labels[idx[second]] = new
            break
    return ClusterAssignment(n_clusters, labels)


def ensemble_localize(feature_map, heads, cfg=SolverConfig(), wclip=None):
    """Localize with every head; keep the estimate with most inliers (lowest index on ties)."""
    if not heads:
        raise NoHeads("ensemble needs at least one head")
    best = None
    for i, head in enumerate(heads):
        est = localize_frame(feature_map, head, cfg, wclip)
        est.info["head"] = i
        if best is None or est.inlier_count > best.inlier_count:
            best = est
    best.success = best.inlier_count >= cfg.min_inliers and best.success
    return best


def write_clusters(path, frame_ids, assignment):
    lines = [f"{fid}\t{int(c)}\n" for fid, c in zip(frame_ids, assignment.labels)]
    Path(path).write_text("".join(lines))


def read_clusters(path):
    """Parse a ``frame_id<TAB>cluster`` file into (frame_ids, ClusterAssignment)."""
    ids, labels = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(path, n, "expected frame_id<TAB>cluster")
        try:
            labels.append(int(parts[1]))
        except ValueError:
            raise ParseError(path, n, f"bad cluster index {parts[1]!r}") from None
        ids.append(parts[0])
    lab = np.asarray(labels, dtype=np.int64)
    k = int(lab.max()) + 1 if len(lab) else 0
    if len(lab) and (lab.min() < 0 or len(np.unique(lab)) != k):
        raise ParseError(path, 0, "cluster indices must cover 0..N-1")
    return ids, ClusterAssignment(k, lab)
