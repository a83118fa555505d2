import struct
import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from src.errors import DimensionError, InfeasibleError, ParseError

logger = logging.getLogger(__name__)

QIMG_MAGIC = b"QIMG"
QIMG_VERSION = 1
_QIMG_HEADER = struct.Struct("<4sIIII")

# one stream per worker; derive_rng gives each its own
RngStream = np.random.Generator


@dataclass
class Image:
    """A C x H x W image stored as a flat float64 vector (channel, row, column order)."""
    data: np.ndarray
    shape: Tuple[int, int, int]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3:
            raise DimensionError(f"image shape must be (C, H, W), got {self.shape}")
        c, h, w = self.shape
        if c * h * w != self.data.size:
            raise DimensionError(
                f"shape {self.shape} needs {c * h * w} values, got {self.data.size}"
            )
        if not np.all(np.isfinite(self.data)):
            raise DimensionError("image contains non-finite values")

    @property
    def m(self) -> int:
        return self.data.size

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, self.shape)

    def clipped(self) -> "Image":
        return Image(clip(self.data), self.shape)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise DimensionError(f"expected a 2-D or 3-D array, got {arr.ndim} dims")
        return cls(arr.reshape(-1), arr.shape)

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int]) -> "Image":
        return cls(np.zeros(int(np.prod(shape))), shape)


VectorLike = Union[Image, np.ndarray]


def as_vector(x: VectorLike) -> np.ndarray:
    """Flat float64 view of an Image or array."""
    if isinstance(x, Image):
        return x.data
    return np.asarray(x, dtype=np.float64).reshape(-1)


def mse(a: VectorLike, b: VectorLike) -> float:
    """Mean of squared coordinate differences."""
    if isinstance(a, Image) and isinstance(b, Image) and a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise DimensionError(f"shape mismatch: {va.shape} vs {vb.shape}")
    diff = va - vb
    return float(np.dot(diff, diff) / diff.size)


def l2(a: VectorLike) -> float:
    return float(np.linalg.norm(as_vector(a)))


def clip(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def make_rng(seed: int) -> RngStream:
    return np.random.default_rng(int(seed))


def derive_rng(root_seed: int, offset: int) -> RngStream:
    """Stream `offset` of the family rooted at `root_seed`; fixed for a given pair."""
    return np.random.default_rng([int(root_seed), int(offset)])


def gram_schmidt(rows: np.ndarray) -> np.ndarray:
    """
    Orthonormalizes the rows of `rows` (B x n, B <= n) by classical
    Gram-Schmidt with one re-orthogonalization pass.
    """
    rows = np.array(rows, dtype=np.float64)
    count, n = rows.shape
    if count > n:
        raise InfeasibleError(f"cannot orthogonalize {count} vectors in dimension {n}")
    out = np.empty_like(rows)
    for i in range(count):
        v = rows[i]
        for _ in range(2):
            if i:
                basis = out[:i]
                v = v - basis.T @ (basis @ v)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise InfeasibleError(f"vector {i} is linearly dependent on the previous ones")
        out[i] = v / norm
    return out


def sample_unit_directions(n: int, count: int, rng: RngStream,
                           orthogonalize: bool = False) -> np.ndarray:
    """
    Draws `count` directions uniformly on the unit sphere of R^n (Gaussian,
    then normalized). Returns a (count, n) array; rows are mutually
    orthogonal when `orthogonalize` is set.
    """
    if count < 1:
        raise InfeasibleError(f"need at least one direction, got {count}")
    if orthogonalize and count > n:
        raise InfeasibleError(f"cannot draw {count} orthogonal directions in dimension {n}")
    raw = rng.standard_normal((count, n))
    if orthogonalize:
        return gram_schmidt(raw)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def image_to_bytes(image: Image) -> bytes:
    c, h, w = image.shape
    header = _QIMG_HEADER.pack(QIMG_MAGIC, QIMG_VERSION, c, h, w)
    return header + image.data.astype("<f8").tobytes()


def image_from_bytes(buf: bytes) -> Image:
    if len(buf) < _QIMG_HEADER.size:
        raise ParseError("truncated QIMG header", offset=len(buf))
    magic, version, c, h, w = _QIMG_HEADER.unpack_from(buf, 0)
    if magic != QIMG_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {QIMG_MAGIC!r}", offset=0)
    if version != QIMG_VERSION:
        raise ParseError(f"unsupported QIMG version {version}", offset=4)
    m = c * h * w
    expected = _QIMG_HEADER.size + 8 * m
    if len(buf) < expected:
        raise ParseError(f"truncated QIMG payload, expected {expected} bytes", offset=len(buf))
    data = np.frombuffer(buf, dtype="<f8", count=m, offset=_QIMG_HEADER.size)
    return Image(data.astype(np.float64), (c, h, w))
