"""Dense feature maps, views and the feature-map file format."""
import io
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import BadMagic, ChecksumMismatch, VersionMismatch
from .geometry import Intrinsics, Pose

DEFAULT_SUBSAMPLING = 8


def pixel_of_cell(row, col, subsampling=DEFAULT_SUBSAMPLING):
    """Pixel position (u, v) attached to a feature cell: the cell center."""
    return np.array([(col + 0.5) * subsampling, (row + 0.5) * subsampling], dtype=np.float64)


def grid_shape(height, width, subsampling=DEFAULT_SUBSAMPLING):
    return -(-height // subsampling), -(-width // subsampling)


def cell_pixels(rows, cols, subsampling=DEFAULT_SUBSAMPLING):
    """``(rows, cols, 2)`` grid of cell-center pixels."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([(c + 0.5) * subsampling, (r + 0.5) * subsampling], axis=-1)


@dataclass
class View:
    """One camera observation: pose, intrinsics and an optional grayscale image.

    Synthetic oracle views carry no image; the oracle backbone renders them from
    the world directly.
    """
    frame_id: str
    pose: Pose
    intrinsics: Intrinsics
    image: Optional[np.ndarray] = None
    # pixels of ``image`` holding real content (False where augmentation padded)
    mask: Optional[np.ndarray] = None

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class FeatureMap:
    data: np.ndarray            # (rows, cols, C) float32
    intrinsics: Intrinsics
    subsampling: int = DEFAULT_SUBSAMPLING
    valid: Optional[np.ndarray] = None   # (rows, cols) bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.valid is None:
            self.valid = np.ones(self.data.shape[:2], dtype=bool)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def pixels(self):
        return cell_pixels(self.rows, self.cols, self.subsampling)

    def flat(self, only_valid=False):
        """``(features (n, C), pixels (n, 2))`` in row-major cell order."""
        f = self.data.reshape(-1, self.channels)
        p = self.pixels().reshape(-1, 2)
        if only_valid:
            m = self.valid.reshape(-1)
            return f[m], p[m]
        return f, p


FEATURE_MAGIC = b"ACEF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHIIII4fII")


def feature_map_bytes(fm):
    k = fm.intrinsics
    buf = io.BytesIO()
    buf.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.rows, fm.cols, fm.channels,
                                   fm.subsampling, k.fx, k.fy, k.cx, k.cy, k.width, k.height))
    buf.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())
    buf.write(np.packbits(fm.valid.reshape(-1)).tobytes())
    data = buf.getvalue()
    return data + struct.pack("<I", zlib.crc32(data))


def feature_map_from_bytes(data):
    if data[:4] != FEATURE_MAGIC:
        raise BadMagic("not a feature-map file")
    if len(data) < _FEATURE_HEADER.size + 4:
        raise ChecksumMismatch("feature-map file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("feature-map checksum mismatch")
    (_, version, rows, cols, ch, sub, fx, fy, cx, cy, w, h) = _FEATURE_HEADER.unpack_from(body)
    if version != FEATURE_VERSION:
        raise VersionMismatch(f"feature-map version {version}, expected {FEATURE_VERSION}")
    off = _FEATURE_HEADER.size
    n = rows * cols * ch
    arr = np.frombuffer(body, "<f4", n, off).reshape(rows, cols, ch).astype(np.float32)
    off += 4 * n
    valid = np.unpackbits(np.frombuffer(body, np.uint8, offset=off))[: rows * cols].astype(bool)
    return FeatureMap(arr, Intrinsics(float(fx), float(fy), float(cx), float(cy), w, h), sub,
                      valid.reshape(rows, cols))


def save_feature_map(fm, path):
    with open(path, "wb") as f:
        f.write(feature_map_bytes(fm))


def load_feature_map(path):
    with open(path, "rb") as f:
        return feature_map_from_bytes(f.read())
