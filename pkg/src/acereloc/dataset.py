"""Dataset directory layout and the pose CSV format.

A split directory holds ``poses/<id>.txt`` (4x4 camera-to-world, row-major),
``calibration/<id>.txt`` (``fx fy cx cy width height``) and optionally
``features/<id>.acef`` or ``rgb/<id>.pgm|png``.  An oracle scene keeps its
``world.json`` in the split directory or its parent.
"""
import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, MissingPose, ParseError
from .features import View, load_feature_map
from .geometry import Intrinsics, Pose

CSV_FIELDS = ["frame_id", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "inliers", "success", "time_ms"]


@dataclass
class DatasetFrame:
    frame_id: str
    pose: Pose
    intrinsics: Intrinsics
    feature_path: Optional[Path] = None
    image_path: Optional[Path] = None

    def load_image(self):
        return None if self.image_path is None else read_image(self.image_path)

    def view(self, with_image=True):
        return View(self.frame_id, self.pose, self.intrinsics,
                    self.load_image() if with_image else None)


def _floats(path, text, line_no):
    try:
        return [float(v) for v in text.split()]
    except ValueError:
        raise ParseError(path, line_no, f"non-numeric value in {text.strip()!r}") from None


def read_pose_file(path):
    rows = [(n, ln) for n, ln in enumerate(Path(path).read_text().splitlines(), 1) if ln.strip()]
    if len(rows) != 4:
        raise ParseError(path, len(rows) or None, f"expected 4 rows, found {len(rows)}")
    m = []
    for n, ln in rows:
        vals = _floats(path, ln, n)
        if len(vals) != 4:
            raise ParseError(path, n, f"expected 4 values, found {len(vals)}")
        m.append(vals)
    m = np.array(m)
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-6):
        raise ParseError(path, rows[3][0], "last row must be 0 0 0 1")
    R = m[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-4):
        raise ParseError(path, rows[0][0], "rotation block is not orthonormal")
    # re-orthonormalize text-rounded rotations
    U, _, Vt = np.linalg.svd(R)
    return Pose(U @ Vt, m[:3, 3])


def read_calibration_file(path):
    text = Path(path).read_text()
    vals = _floats(path, text, 1)
    if len(vals) != 6:
        raise ParseError(path, 1, f"expected 'fx fy cx cy width height', found {len(vals)} values")
    try:
        return Intrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
    except ValueError as e:
        raise ParseError(path, 1, str(e)) from None


def read_image(path):
    """Gray image in [0, 1] from a binary PGM (P5) or, via Pillow if installed, PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        data = path.read_bytes()
        parts, pos = [], 0
        while len(parts) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            end = pos
            while not data[end:end + 1].isspace():
                end += 1
            parts.append(data[pos:end])
            pos = end
        if parts[0] != b"P5":
            raise ParseError(path, 1, "only binary PGM (P5) is supported")
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        img = np.frombuffer(data[pos + 1:], dtype=dtype, count=w * h).reshape(h, w)
        return img.astype(np.float32) / maxval
    try:
        from PIL import Image
    except ImportError:
        raise DataError(f"{path}: reading {path.suffix} images needs Pillow") from None
    return np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0


def load_dataset(path):
    """Frames of one split directory, sorted by frame id."""
    base = Path(path)
    if not base.is_dir():
        raise DataError(f"{base}: not a directory")
    poses_dir = base / "poses"
    if not poses_dir.is_dir():
        if any(base.iterdir()):
            raise DataError(f"{base}: missing poses/ directory")
        return []
    calib_dir, feat_dir, rgb_dir = base / "calibration", base / "features", base / "rgb"
    pose_ids = {p.stem for p in poses_dir.glob("*.txt")}
    for d, pattern in ((calib_dir, "*.txt"), (feat_dir, "*.acef"), (rgb_dir, "*")):
        if d.is_dir():
            orphans = sorted({p.stem for p in d.glob(pattern)} - pose_ids)
            if orphans:
                raise MissingPose(f"{d}: no pose for frame {orphans[0]!r}")
    frames = []
    for fid in sorted(pose_ids):
        pose = read_pose_file(poses_dir / f"{fid}.txt")
        cpath = calib_dir / f"{fid}.txt"
        if not cpath.is_file():
            raise ParseError(cpath, None, "missing calibration file")
        k = read_calibration_file(cpath)
        fpath = feat_dir / f"{fid}.acef"
        image = None
        for ext in (".pgm", ".png"):
            if (rgb_dir / f"{fid}{ext}").is_file():
                image = rgb_dir / f"{fid}{ext}"
                break
        frames.append(DatasetFrame(fid, pose, k, fpath if fpath.is_file() else None, image))
    return frames


def find_world(path):
    """The oracle world stored next to (or one level above) a split directory, if any."""
    from .synth import SyntheticWorld

    for d in (Path(path), Path(path).parent):
        f = d / "world.json"
        if f.is_file():
            try:
                return SyntheticWorld.from_json(json.loads(f.read_text()))
            except (ValueError, KeyError) as e:
                raise ParseError(f, None, f"invalid world description: {e}") from None
    return None


# --- pose CSV ---------------------------------------------------------------

def write_pose_csv(path, estimates, timing=True):
    """``estimates``: iterable of ``(frame_id, PoseEstimate)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for fid, est in estimates:
            q = est.pose.as_quaternion()
            t = est.pose.translation
            w.writerow([fid, *(f"{v:.9g}" for v in q), *(f"{v:.9g}" for v in t),
                        int(est.inlier_count), int(bool(est.success)),
                        f"{est.solve_time:.3f}" if timing else "0"])


@dataclass
class CsvRow:
    pose: Pose
    inlier_count: int
    success: bool
    solve_time: float


def read_pose_csv(path):
    """Rows keyed by frame id, in file order."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_FIELDS:
            raise ParseError(path, 1, "unexpected header")
        for n, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(CSV_FIELDS):
                raise ParseError(path, n, f"expected {len(CSV_FIELDS)} fields, found {len(row)}")
            try:
                vals = [float(v) for v in row[1:8]]
                q, t = np.array(vals[:4]), np.array(vals[4:])
                if np.linalg.norm(q) == 0:
                    raise ValueError("zero quaternion")
                out[row[0]] = CsvRow(Pose.from_quaternion(q, t), int(row[8]), row[9] == "1", float(row[10]))
            except ValueError as e:
                raise ParseError(path, n, str(e)) from None
    return out


class StoredFeatures:
    """Backbone stand-in that serves the feature maps stored with a dataset.

    Stored maps are fixed, so views passed to :meth:`extract` must not be augmented.
    """

    def __init__(self, frames):
        self.paths = {f.frame_id: f.feature_path for f in frames if f.feature_path is not None}

    def extract(self, view):
        try:
            return load_feature_map(self.paths[view.frame_id])
        except KeyError:
            raise DataError(f"frame {view.frame_id}: no stored feature map") from None
