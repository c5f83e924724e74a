"""ASCII PLY export of accumulated scene-coordinate predictions."""
from pathlib import Path

import numpy as np

from .losses import WClipConfig
from .training import predict_scene_coordinates

MAX_DEPTH = 10.0
FRUSTUM_EVERY = 25
FRUSTUM_DEPTH = 0.3
GRAY = 128
FRUSTUM_COLOR = (255, 0, 0)


def frustum_geometry(pose, k, depth=FRUSTUM_DEPTH):
    """Five world-space vertices (center, four image corners at ``depth``) and eight edges."""
    corners = np.array([[0, 0], [k.width, 0], [k.width, k.height], [0, k.height]], dtype=np.float64)
    rays = np.stack([(corners[:, 0] - k.cx) / k.fx, (corners[:, 1] - k.cy) / k.fy, np.ones(4)], axis=1)
    verts = np.vstack([np.zeros(3), rays * depth])
    edges = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (2, 3), (3, 4), (4, 1)]
    return pose.apply(verts), edges


def frame_points(feature_map, pose, head, image=None, max_depth=MAX_DEPTH, wclip=WClipConfig()):
    """Predicted world points of one frame that lie at most ``max_depth`` in front of the image plane."""
    X, pix = feature_map.flat(only_valid=True)
    if len(X) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    y = predict_scene_coordinates(head, X, wclip).astype(np.float64)
    z = pose.inverse().apply(y)[:, 2]
    keep = z <= max_depth
    if image is None:
        col = np.full((int(keep.sum()), 3), GRAY, dtype=np.uint8)
    else:
        h, w = image.shape
        c = np.clip(pix[keep, 0].astype(int), 0, w - 1)
        r = np.clip(pix[keep, 1].astype(int), 0, h - 1)
        g = np.clip(np.rint(image[r, c] * 255), 0, 255).astype(np.uint8)
        col = np.repeat(g[:, None], 3, axis=1)
    return y[keep], col


def write_ply(path, points, colors, edges_vertices=(), edges=()):
    """Points first, then frustum vertices; edges index the combined vertex list."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    extra = np.asarray(edges_vertices, dtype=np.float64).reshape(-1, 3)
    n = len(points) + len(extra)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if len(edges):
        lines += [f"element edge {len(edges)}", "property int vertex1", "property int vertex2"]
    lines.append("end_header")
    body = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(points, colors)]
    fr, fg, fb = FRUSTUM_COLOR
    body += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {fr} {fg} {fb}" for p in extra]
    body += [f"{a} {b}" for a, b in edges]
    Path(path).write_text("\n".join(lines + body) + "\n")


def export_pointcloud(frames, head, out_path, max_depth=MAX_DEPTH, frustum_every=FRUSTUM_EVERY,
                      wclip=WClipConfig()):
    """Write all frames' predictions to a PLY file.

    ``frames`` yields ``(feature_map, pose, image_or_None)``; every
    ``frustum_every``-th frame (counting from the first) also gets a camera
    frustum drawn as edges.  Returns ``(n_points, n_frusta)``.
    """
    pts, cols, fverts, edges = [], [], [], []
    n_pts = 0
    for i, (fm, pose, image) in enumerate(frames):
        p, c = frame_points(fm, pose, head, image, max_depth, wclip)
        pts.append(p)
        cols.append(c)
        n_pts += len(p)
        if frustum_every and i % frustum_every == 0:
            v, e = frustum_geometry(pose, fm.intrinsics)
            fverts.append((v, e))
    # frustum vertex indices follow all points
    flat_v = []
    for v, e in fverts:
        base = n_pts + sum(len(x) for x in flat_v)
        edges += [(base + a, base + b) for a, b in e]
        flat_v.append(v)
    write_ply(out_path, np.concatenate(pts) if pts else np.zeros((0, 3)),
              np.concatenate(cols) if cols else np.zeros((0, 3)),
              np.concatenate(flat_v) if flat_v else np.zeros((0, 3)), edges)
    return n_pts, len(fverts)


def read_ply(path):
    """Strict reader for the ASCII files written here: returns (vertices (n,6) array, edges (m,2))."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply" or lines[1] != "format ascii 1.0":
        raise ValueError("not an ASCII PLY file")
    counts, i = {}, 2
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
        elif parts[0] not in ("property", "comment"):
            raise ValueError(f"bad header line {lines[i]!r}")
        i += 1
    body = lines[i + 1:]
    nv, ne = counts.get("vertex", 0), counts.get("edge", 0)
    if len(body) != nv + ne:
        raise ValueError(f"expected {nv + ne} body lines, found {len(body)}")
    verts = np.array([[float(x) for x in ln.split()] for ln in body[:nv]]).reshape(nv, 6)
    edges = np.array([[int(x) for x in ln.split()] for ln in body[nv:]], dtype=np.int64).reshape(ne, 2)
    if ne and (edges.min() < 0 or edges.max() >= nv):
        raise ValueError("edge index out of range")
    return verts, edges
