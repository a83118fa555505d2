"""
Representative subspaces for perturbation sampling.

Every basis is a linear map from coefficients (dim n) to images (dim m)
with an exact adjoint. Spatial and frequency bases act per channel; the
intrinsic-component basis is a dense m x n matrix fitted on stored
reference gradients.
"""
import os
import json
import glob
import struct
import logging
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import linalg

from config.settings import settings
from src.core import RngStream, VectorLike, as_vector, make_rng
from src.errors import (
    ContractError, DegenerateBasisError, DimensionError, DomainError,
    InfeasibleError, ParseError, UnsupportedShapeError,
)

logger = logging.getLogger(__name__)

BASIS_MAGIC = b"QEBA"
BASIS_VERSION = 1
KIND_CODES = {"full": 0, "spatial": 1, "dct": 2, "pca": 3, "explicit": 4}
_KIND_NAMES = {code: kind for kind, code in KIND_CODES.items()}
_BASIS_HEADER = struct.Struct("<4sIQQIB")
_SHAPE_BLOCK = struct.Struct("<IIII")


def _as_batch(values: np.ndarray, dim: int, what: str) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(values, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(1, -1) if single else arr
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"{what} must have length {dim}, got shape {np.shape(values)}")
    return arr, single


class SubspaceBasis:
    """Linear map R^n -> R^m. Subclasses implement the batched maps."""
    kind = "explicit"

    def __init__(self, m: int, n: int, orthonormal: bool):
        if n > m:
            raise DimensionError(f"subspace dimension {n} exceeds ambient dimension {m}")
        self.m = m
        self.n = n
        self.orthonormal = orthonormal

    def forward(self, v: np.ndarray) -> np.ndarray:
        batch, single = _as_batch(v, self.n, "coefficient vector")
        out = self._forward(batch)
        return out[0] if single else out

    def adjoint(self, x: VectorLike) -> np.ndarray:
        values = x.data if hasattr(x, "data") else x
        batch, single = _as_batch(values, self.m, "image vector")
        out = self._adjoint(batch)
        return out[0] if single else out

    def matrix(self) -> np.ndarray:
        """Explicit m x n representation (columns are the basis images)."""
        return self._forward(np.eye(self.n)).T.copy()

    def _forward(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(m={self.m}, n={self.n}, orthonormal={self.orthonormal})"


class FullBasis(SubspaceBasis):
    kind = "full"

    def __init__(self, m: int):
        super().__init__(m, m, orthonormal=True)

    def _forward(self, batch):
        return batch.copy()

    def _adjoint(self, batch):
        return batch.copy()

    def matrix(self):
        return np.eye(self.m)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """
    1-D linear interpolation weights (n_out x n_in) with align-corners
    placement: output sample i reads input coordinate i * (n_in - 1) / (n_out - 1).
    """
    weights = np.zeros((n_out, n_in))
    if n_out == 1:
        weights[0, 0] = 1.0
        return weights
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        pos = i * scale
        lo = min(int(np.floor(pos)), n_in - 1)
        frac = pos - lo
        if lo + 1 < n_in and frac > 0.0:
            weights[i, lo] += 1.0 - frac
            weights[i, lo + 1] += frac
        else:
            weights[i, lo] = 1.0
    return weights


class SpatialBasis(SubspaceBasis):
    """Per-channel bilinear upsampling from (H//r, W//r) to (H, W). Not orthonormal."""
    kind = "spatial"

    def __init__(self, channels: int, height: int, width: int, ratio: int):
        if ratio < 1:
            raise DomainError(f"reduction ratio must be >= 1, got {ratio}")
        low_h, low_w = height // ratio, width // ratio
        if low_h < 2 or low_w < 2:
            raise DegenerateBasisError(
                f"low-resolution grid {low_h}x{low_w} is too small (need at least 2x2)"
            )
        self.shape = (channels, height, width)
        self.ratio = ratio
        self.low_shape = (channels, low_h, low_w)
        self._rows = bilinear_matrix(height, low_h)
        self._cols = bilinear_matrix(width, low_w)
        super().__init__(channels * height * width, channels * low_h * low_w,
                         orthonormal=(ratio == 1))

    def _forward(self, batch):
        low = batch.reshape((-1,) + self.low_shape)
        up = np.einsum("Hh,kchw,Ww->kcHW", self._rows, low, self._cols, optimize=True)
        return up.reshape(len(batch), self.m)

    def _adjoint(self, batch):
        img = batch.reshape((-1,) + self.shape)
        low = np.einsum("Hh,kcHW,Ww->kchw", self._rows, img, self._cols, optimize=True)
        return low.reshape(len(batch), self.n)


class DctBasis(SubspaceBasis):
    """
    Per-channel inverse orthonormal 2-D DCT of the lowest (N//r) x (N//r)
    frequency block, zero-padded to N x N. Orthonormal.
    """
    kind = "dct"

    def __init__(self, channels: int, height: int, width: int, ratio: int):
        if height != width:
            raise UnsupportedShapeError(f"DCT subspace needs square images, got {height}x{width}")
        if ratio < 1:
            raise DomainError(f"reduction ratio must be >= 1, got {ratio}")
        block = height // ratio
        if block < 1:
            raise DegenerateBasisError(f"frequency block is empty for N={height}, r={ratio}")
        self.shape = (channels, height, width)
        self.ratio = ratio
        self.block = block
        super().__init__(channels * height * width, channels * block * block, orthonormal=True)

    def _forward(self, batch):
        c, size, _ = self.shape
        coeffs = np.zeros((len(batch), c, size, size))
        coeffs[:, :, :self.block, :self.block] = batch.reshape(len(batch), c, self.block, self.block)
        img = sfft.idctn(coeffs, axes=(-2, -1), norm="ortho")
        return img.reshape(len(batch), self.m)

    def _adjoint(self, batch):
        img = batch.reshape((-1,) + self.shape)
        coeffs = sfft.dctn(img, axes=(-2, -1), norm="ortho")
        return coeffs[:, :, :self.block, :self.block].reshape(len(batch), self.n)


class MatrixBasis(SubspaceBasis):
    """A dense m x n basis matrix (explicit or fitted by PCA)."""

    def __init__(self, matrix: np.ndarray, kind: str = "explicit",
                 orthonormal: Optional[bool] = None):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionError(f"basis matrix must be 2-D, got {matrix.ndim} dims")
        if kind not in ("explicit", "pca"):
            raise DomainError(f"matrix bases are 'explicit' or 'pca', got '{kind}'")
        if orthonormal is None:
            gram = matrix.T @ matrix
            orthonormal = bool(np.max(np.abs(gram - np.eye(matrix.shape[1]))) < 1e-8)
        self.kind = kind
        self._matrix = matrix
        super().__init__(matrix.shape[0], matrix.shape[1], orthonormal)

    def _forward(self, batch):
        return batch @ self._matrix.T

    def _adjoint(self, batch):
        return batch @ self._matrix

    def matrix(self):
        return self._matrix.copy()


def full_basis(m: int) -> SubspaceBasis:
    if m < 1:
        raise DomainError(f"dimension must be >= 1, got {m}")
    return FullBasis(m)


def orthonormalize_columns(matrix: np.ndarray) -> np.ndarray:
    q, r = linalg.qr(matrix, mode="economic")
    # keep column orientation: positive diagonal of R
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def orthonormalized(basis: SubspaceBasis) -> MatrixBasis:
    """QR post-pass: same span, W^T W = I."""
    return MatrixBasis(orthonormalize_columns(basis.matrix()), kind="explicit", orthonormal=True)


def spatial_basis(channels: int, height: int, width: int, ratio: int,
                  orthonormalize: bool = False) -> SubspaceBasis:
    basis = SpatialBasis(channels, height, width, ratio)
    if orthonormalize:
        return orthonormalized(basis)
    return basis


def dct_basis(channels: int, height: int, width: int, ratio: int) -> SubspaceBasis:
    return DctBasis(channels, height, width, ratio)


def explicit_basis(matrix: np.ndarray, orthonormalize: bool = False) -> MatrixBasis:
    if orthonormalize:
        return MatrixBasis(orthonormalize_columns(np.asarray(matrix, dtype=np.float64)),
                           orthonormal=True)
    return MatrixBasis(matrix)


def basis_with_rho(g: np.ndarray, n: int, rho: float, rng: RngStream) -> MatrixBasis:
    """
    Random orthonormal n-dimensional basis whose span holds exactly a
    fraction `rho` of the norm of g.
    """
    g = as_vector(g)
    m = g.size
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"rho must lie in [0, 1], got {rho}")
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise DomainError("gradient is zero")
    g_hat = g / norm
    excluded = [g_hat]
    if rho < 1.0:
        if n > m - 1:
            raise InfeasibleError(f"rho < 1 needs n < m, got n={n}, m={m}")
        z = rng.standard_normal(m)
        for _ in range(2):
            z -= g_hat * np.dot(g_hat, z)
        z /= np.linalg.norm(z)
        excluded.append(z)
        lead = rho * g_hat + np.sqrt(1.0 - rho * rho) * z
    else:
        if n > m:
            raise InfeasibleError(f"n={n} exceeds m={m}")
        lead = g_hat
    rest = rng.standard_normal((m, n - 1))
    for _ in range(2):
        for e in excluded:
            rest -= np.outer(e, e @ rest)
    columns = [lead[:, None]]
    if n > 1:
        columns.append(orthonormalize_columns(rest))
    return MatrixBasis(np.hstack(columns), kind="explicit", orthonormal=True)


def rho(basis: SubspaceBasis, g: np.ndarray) -> float:
    """||proj_span(W) g|| / ||g|| for an orthonormal basis."""
    if not basis.orthonormal:
        raise ContractError("rho needs an orthonormal basis; the projection W W^T is invalid otherwise")
    g = as_vector(g)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise DomainError("rho is undefined for a zero gradient")
    projected = basis.forward(basis.adjoint(g))
    return float(min(1.0, np.linalg.norm(projected) / norm))


def projector_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Spectral norm of A A^T - B B^T for two orthonormal column sets."""
    return float(np.linalg.norm(a @ a.T - b @ b.T, ord=2))


class GradientStore:
    """
    Reference gradients stored one row per gradient in .npy shards of at most
    `shard_rows` rows. Reads stream shard by shard.
    """

    def __init__(self, directory: str, m: int, shard_rows: Optional[int] = None,
                 reset: bool = True):
        self.directory = directory
        self.m = int(m)
        self.shard_rows = int(shard_rows or settings.pca.shard_rows)
        self._rows = 0
        self._shards = 0
        self._buffer: List[np.ndarray] = []
        os.makedirs(directory, exist_ok=True)
        if reset:
            for stale in glob.glob(os.path.join(directory, "shard_*.npy")):
                os.remove(stale)

    @classmethod
    def open(cls, directory: str) -> "GradientStore":
        meta_path = os.path.join(directory, "store.json")
        if not os.path.exists(meta_path):
            raise FileNotFoundError(f"No gradient store at {directory}")
        with open(meta_path) as f:
            meta = json.load(f)
        store = cls(directory, meta["m"], meta["shard_rows"], reset=False)
        store._rows = meta["rows"]
        store._shards = meta["shards"]
        return store

    @property
    def K(self) -> int:
        return self._rows + len(self._buffer)

    def append(self, row: np.ndarray) -> None:
        row = np.array(as_vector(row), dtype=np.float64)
        if row.size != self.m:
            raise DimensionError(f"gradient has {row.size} entries, store holds {self.m}")
        if not np.all(np.isfinite(row)):
            raise DimensionError("gradient contains non-finite entries")
        self._buffer.append(row)
        if len(self._buffer) >= self.shard_rows:
            self._write_shard()

    def flush(self) -> None:
        if self._buffer:
            self._write_shard()
        with open(os.path.join(self.directory, "store.json"), "w") as f:
            json.dump({"m": self.m, "rows": self._rows, "shards": self._shards,
                       "shard_rows": self.shard_rows}, f)

    def _write_shard(self) -> None:
        path = os.path.join(self.directory, f"shard_{self._shards:05d}.npy")
        np.save(path, np.vstack(self._buffer))
        self._rows += len(self._buffer)
        self._shards += 1
        self._buffer = []

    def iter_blocks(self) -> Iterator[Tuple[int, np.ndarray]]:
        """Yields (first row index, block) in insertion order."""
        start = 0
        for path in sorted(glob.glob(os.path.join(self.directory, "shard_*.npy"))):
            block = np.load(path, mmap_mode="r")
            yield start, np.asarray(block)
            start += block.shape[0]
        if self._buffer:
            yield start, np.vstack(self._buffer)

    def rows(self) -> Iterator[np.ndarray]:
        for _, block in self.iter_blocks():
            for row in block:
                yield row


def build_gradient_store(victims: Sequence, probes: Sequence[VectorLike], directory: str,
                         shard_rows: Optional[int] = None) -> GradientStore:
    """Row k is the mean over `victims` of grad S at probe k."""
    if not victims:
        raise DomainError("need at least one reference victim")
    if not probes:
        raise DomainError("need at least one probe image")
    m = victims[0].m
    for victim in victims:
        if victim.m != m:
            raise DimensionError(f"reference victims disagree on dimension: {victim.m} vs {m}")
    store = GradientStore(directory, m, shard_rows)
    for probe in probes:
        x = as_vector(probe)
        if x.size != m:
            raise DimensionError(f"probe has {x.size} entries, victims expect {m}")
        store.append(np.mean([victim.gradient(x) for victim in victims], axis=0))
    store.flush()
    logger.info(f"Gradient store at {directory}: {store.K} rows from {len(victims)} reference victims")
    return store


def _sweep_transpose(store: GradientStore, right: np.ndarray) -> np.ndarray:
    """G^T @ right, touching G one shard at a time."""
    out = np.zeros((store.m, right.shape[1]))
    for start, block in store.iter_blocks():
        out += block.T @ right[start:start + block.shape[0]]
    return out


def _sweep(store: GradientStore, right: np.ndarray) -> np.ndarray:
    """G @ right, touching G one shard at a time."""
    return np.vstack([block @ right for _, block in store.iter_blocks()])


def _fix_signs(columns: np.ndarray) -> np.ndarray:
    for j in range(columns.shape[1]):
        col = columns[:, j]
        tol = 1e-12 * np.max(np.abs(col))
        nonzero = np.flatnonzero(np.abs(col) > tol)
        if nonzero.size and col[nonzero[0]] < 0:
            columns[:, j] = -col
    return columns


def pca_basis(store: GradientStore, n: int, oversample: Optional[int] = None,
              power_iters: Optional[int] = None, rng: Optional[RngStream] = None) -> MatrixBasis:
    """
    Top-n principal directions of the (uncentered) gradient rows by a
    randomized range finder on G^T: Gaussian test matrix of width n + p,
    q power iterations with re-orthonormalization, then an SVD of the small
    projected matrix.
    """
    p = settings.pca.oversample if oversample is None else oversample
    q = settings.pca.power_iters if power_iters is None else power_iters
    rng = rng if rng is not None else make_rng(0)
    K, m = store.K, store.m
    if n < 1 or n > min(K, m):
        raise InfeasibleError(f"cannot extract {n} components from {K} rows of dimension {m}")
    if p < 0 or q < 0:
        raise DomainError(f"oversampling and power iterations must be >= 0, got p={p}, q={q}")

    width = min(n + p, K)
    omega = rng.standard_normal((K, width))
    sample = _sweep_transpose(store, omega)
    for _ in range(q):
        basis, _ = linalg.qr(sample, mode="economic")
        pulled, _ = linalg.qr(_sweep(store, basis), mode="economic")
        sample = _sweep_transpose(store, pulled)
    basis, _ = linalg.qr(sample, mode="economic")

    small = _sweep(store, basis).T
    left, sigma, _ = linalg.svd(small, full_matrices=False)
    components = _fix_signs(basis @ left[:, :n])
    logger.info(
        f"PCA basis: {n} components from {K} gradients (p={p}, q={q}), "
        f"leading singular values {np.round(sigma[:3], 6).tolist()}"
    )
    return MatrixBasis(components, kind="pca", orthonormal=True)


def save_basis(basis: SubspaceBasis, path: str) -> None:
    kind = basis.kind
    header = _BASIS_HEADER.pack(BASIS_MAGIC, BASIS_VERSION, basis.m, basis.n,
                                KIND_CODES[kind], int(basis.orthonormal))
    with open(path, "wb") as f:
        f.write(header)
        if kind in ("spatial", "dct"):
            f.write(_SHAPE_BLOCK.pack(*basis.shape, basis.ratio))
        elif kind in ("explicit", "pca"):
            f.write(np.asarray(basis.matrix(), dtype="<f8").tobytes(order="F"))
    logger.info(f"Saved {kind} basis (m={basis.m}, n={basis.n}) to {path}")


def load_basis(path: str) -> SubspaceBasis:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _BASIS_HEADER.size:
        raise ParseError("truncated basis header", offset=len(buf))
    magic, version, m, n, code, orthonormal = _BASIS_HEADER.unpack_from(buf, 0)
    if magic != BASIS_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {BASIS_MAGIC!r}", offset=0)
    if version != BASIS_VERSION:
        raise ParseError(f"unsupported basis version {version}", offset=4)
    if code not in _KIND_NAMES:
        raise ParseError(f"unknown basis kind tag {code}", offset=24)
    kind = _KIND_NAMES[code]
    offset = _BASIS_HEADER.size

    if kind == "full":
        basis = full_basis(m)
    elif kind in ("spatial", "dct"):
        if len(buf) < offset + _SHAPE_BLOCK.size:
            raise ParseError(f"truncated {kind} parameters", offset=len(buf))
        c, h, w, r = _SHAPE_BLOCK.unpack_from(buf, offset)
        offset += _SHAPE_BLOCK.size
        basis = SpatialBasis(c, h, w, r) if kind == "spatial" else DctBasis(c, h, w, r)
    else:
        size = 8 * m * n
        if len(buf) < offset + size:
            raise ParseError(f"truncated basis matrix, expected {size} bytes", offset=len(buf))
        flat = np.frombuffer(buf, dtype="<f8", count=m * n, offset=offset)
        offset += size
        basis = MatrixBasis(flat.reshape((m, n), order="F").astype(np.float64),
                            kind=kind, orthonormal=bool(orthonormal))
    if offset != len(buf):
        raise ParseError(f"{len(buf) - offset} unexpected trailing bytes", offset=offset)
    if (basis.m, basis.n) != (m, n):
        raise ParseError(f"header says m={m}, n={n} but parameters give m={basis.m}, n={basis.n}",
                         offset=8)
    return basis
