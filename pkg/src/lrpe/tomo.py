"""Scan geometry, ray-driven system matrices and the fine/coarse coupling operators.

Conventions
-----------
Images are ``(side, side)`` arrays, row-major, row 0 at the top (largest y).
The square image region is inscribed in the field-of-view circle, so its
width is ``sqrt(2) * fov_radius`` on both grids; only the pixel pitch differs
between the fine and the coarse grid.

For a view angle ``theta`` the detector axis is ``e = (cos theta, sin theta)``
and parallel rays travel along ``d = (-sin theta, cos theta)``; at 0 degrees
rays are vertical.  Fan-beam sources sit at ``-source_radius * d`` and the
detector is described by its virtual copy through the rotation centre.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp


class GeometryError(ValueError):
    """Invalid scan geometry or a geometry that produces no usable rays."""


class DimensionError(ValueError):
    """Array shape does not match the operator."""


@dataclass(frozen=True)
class GeometryConfig:
    fine_size: int
    coarse_size: int
    num_views: int
    num_bins: int
    angle_start: float = 0.0
    angle_end: float = 180.0
    angle_step: float | None = None
    beam: str = "parallel"
    source_radius: float = 0.0
    detector_spacing: float = 1.0
    fov_radius: float = 1.0

    def __post_init__(self):
        if not self.fine_size >= self.coarse_size >= 1:
            raise GeometryError("need fine_size >= coarse_size >= 1")
        if self.fine_size % self.coarse_size:
            raise GeometryError("fine_size must be a multiple of coarse_size")
        if self.num_views < 1 or self.num_bins < 1:
            raise GeometryError("num_views and num_bins must be positive")
        if not self.angle_end > self.angle_start:
            raise GeometryError("angle_end must exceed angle_start")
        if self.beam not in ("parallel", "fan"):
            raise GeometryError(f"unknown beam type {self.beam!r}")
        if self.fov_radius <= 0 or self.detector_spacing <= 0:
            raise GeometryError("fov_radius and detector_spacing must be positive")
        if self.beam == "fan" and not self.source_radius > self.fov_radius:
            raise GeometryError("fan beam needs source_radius > fov_radius")
        if self.angle_step is not None:
            if self.angle_step <= 0:
                raise GeometryError("angle_step must be positive")
            last = self.angle_start + (self.num_views - 1) * self.angle_step
            if last >= self.angle_end + 1e-9:
                raise GeometryError("views overrun angle_end for this angle_step")

    @property
    def step_deg(self) -> float:
        if self.angle_step is not None:
            return self.angle_step
        return (self.angle_end - self.angle_start) / self.num_views

    def angles(self) -> np.ndarray:
        """View angles in radians."""
        deg = self.angle_start + self.step_deg * np.arange(self.num_views)
        return np.deg2rad(deg)

    @property
    def image_width(self) -> float:
        return math.sqrt(2.0) * self.fov_radius

    def pixel_pitch(self, grid: str = "fine") -> float:
        return self.image_width / self.side(grid)

    def side(self, grid: str = "fine") -> int:
        if grid == "fine":
            return self.fine_size
        if grid == "coarse":
            return self.coarse_size
        raise GeometryError(f"unknown grid {grid!r}")

    @property
    def factor(self) -> int:
        return self.fine_size // self.coarse_size

    def bin_positions(self) -> np.ndarray:
        """Detector cell centres, symmetric about the central ray."""
        k = np.arange(self.num_bins)
        return (k - (self.num_bins - 1) / 2.0) * self.detector_spacing

    def content_hash(self) -> str:
        blob = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha1(blob).hexdigest()[:16]

    @classmethod
    def covering(cls, fine_size: int, coarse_size: int, num_views: int,
                 fov_radius: float = math.sqrt(2.0), **kw) -> "GeometryConfig":
        """Parallel geometry whose detector (at fine pitch) covers the FOV circle."""
        pitch = math.sqrt(2.0) * fov_radius / fine_size
        num_bins = int(math.ceil(2 * fov_radius / pitch - 1e-9))
        return cls(fine_size=fine_size, coarse_size=coarse_size, num_views=num_views,
                   num_bins=num_bins, detector_spacing=pitch, fov_radius=fov_radius, **kw)


def ray_endpoints(geom: GeometryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of every ray, shape ``(num_views * num_bins, 2)`` each.

    Segments are long enough to cross the whole FOV circle.
    """
    theta = geom.angles()[:, None]
    t = geom.bin_positions()[None, :]
    ex, ey = np.cos(theta), np.sin(theta)
    dx, dy = -np.sin(theta), np.cos(theta)
    if geom.beam == "parallel":
        reach = 2.0 * geom.fov_radius
        px, py = t * ex, t * ey
        p0 = np.stack([px - reach * dx, py - reach * dy], axis=-1)
        p1 = np.stack([px + reach * dx, py + reach * dy], axis=-1)
    else:
        rs = geom.source_radius
        sx, sy = -rs * dx, -rs * dy
        # virtual detector point on the line through the rotation centre
        qx, qy = t * ex, t * ey
        vx, vy = qx - sx, qy - sy
        scale = 2.0 * rs / np.hypot(vx, vy)
        p0 = np.stack([np.broadcast_to(sx, qx.shape), np.broadcast_to(sy, qy.shape)], axis=-1)
        p1 = np.stack([sx + scale * vx, sy + scale * vy], axis=-1)
    return p0.reshape(-1, 2), p1.reshape(-1, 2)


def _siddon(p0, p1, width: float, side: int):
    """Exact intersection lengths of segment p0->p1 with a side x side grid.

    Returns ``(columns, lengths)``.
    """
    half = width / 2.0
    pitch = width / side
    delta = p1 - p0
    seg_len = math.hypot(delta[0], delta[1])
    lo, hi = 0.0, 1.0
    alphas = []
    for ax in range(2):
        if abs(delta[ax]) < 1e-14:
            if not -half <= p0[ax] <= half:
                return np.empty(0, np.int64), np.empty(0)
            continue
        a = (-half - p0[ax]) / delta[ax]
        b = (half - p0[ax]) / delta[ax]
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
        planes = -half + pitch * np.arange(side + 1)
        alphas.append((planes - p0[ax]) / delta[ax])
    if hi <= lo:
        return np.empty(0, np.int64), np.empty(0)
    a = np.concatenate([[lo, hi]] + alphas)
    a = np.unique(a[(a >= lo) & (a <= hi)])
    seg = np.diff(a)
    keep = seg > 1e-12
    mid = 0.5 * (a[:-1] + a[1:])[keep]
    x = p0[0] + mid * delta[0]
    y = p0[1] + mid * delta[1]
    col = np.clip(np.floor((x + half) / pitch).astype(np.int64), 0, side - 1)
    row = np.clip(np.floor((half - y) / pitch).astype(np.int64), 0, side - 1)
    return row * side + col, seg[keep] * seg_len


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse ray/pixel intersection-length operator (rows = rays, cols = pixels)."""

    matrix: sp.csr_matrix
    side: int
    num_views: int
    num_bins: int
    pixel_pitch: float = 1.0

    def __post_init__(self):
        # cached transpose; the dataclass is frozen
        object.__setattr__(self, "_mt", self.matrix.T.tocsr())

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def T(self) -> sp.csr_matrix:
        return self._mt

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def build_system_matrix(geom: GeometryConfig, grid: str = "fine") -> SystemMatrix:
    """Siddon ray tracing of every (view, bin) ray through the chosen grid."""
    side = geom.side(grid)
    width = geom.image_width
    if width / side <= 0:
        raise GeometryError("zero-area pixels")
    p0s, p1s = ray_endpoints(geom)
    indptr = [0]
    indices, data = [], []
    for p0, p1 in zip(p0s, p1s):
        cols, lens = _siddon(p0, p1, width, side)
        indices.append(cols)
        data.append(lens)
        indptr.append(indptr[-1] + len(cols))
    if indptr[-1] == 0:
        raise GeometryError("no ray intersects the field of view")
    mat = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.asarray(indptr)),
        shape=(len(p0s), side * side),
    )
    mat.sum_duplicates()
    return SystemMatrix(mat, side, geom.num_views, geom.num_bins, width / side)


def forward_project(A: SystemMatrix, u: np.ndarray) -> np.ndarray:
    """Sinogram ``A u``; leading axes of ``u`` beyond the image are channels."""
    u = np.asarray(u)
    if u.shape[-2:] != (A.side, A.side):
        raise DimensionError(f"image shape {u.shape} does not match grid {A.side}")
    lead = u.shape[:-2]
    flat = u.reshape(-1, A.cols)
    out = (A.matrix @ flat.T).T
    return out.reshape(lead + (A.num_views, A.num_bins))


def back_project(A: SystemMatrix, s: np.ndarray) -> np.ndarray:
    """Adjoint ``A^T s``."""
    s = np.asarray(s)
    if s.shape[-2:] != (A.num_views, A.num_bins):
        raise DimensionError(f"sinogram shape {s.shape} does not match operator")
    lead = s.shape[:-2]
    flat = s.reshape(-1, A.rows)
    out = (A.T @ flat.T).T
    return out.reshape(lead + (A.side, A.side))


def downsample(u: np.ndarray, geom: GeometryConfig) -> np.ndarray:
    """Block mean over ``factor x factor`` blocks (fine -> coarse)."""
    u = np.asarray(u)
    N, n = geom.fine_size, geom.coarse_size
    if u.shape[-2:] != (N, N):
        raise DimensionError(f"expected a {N}x{N} image, got {u.shape}")
    f = N // n
    return u.reshape(u.shape[:-2] + (n, f, n, f)).mean(axis=(-3, -1))


def upsample_adjoint(ul: np.ndarray, geom: GeometryConfig) -> np.ndarray:
    """Transpose of :func:`downsample`: replicate, scaled by ``1/factor**2``."""
    ul = np.asarray(ul)
    n = geom.coarse_size
    if ul.shape[-2:] != (n, n):
        raise DimensionError(f"expected a {n}x{n} image, got {ul.shape}")
    f = geom.factor
    out = np.repeat(np.repeat(ul, f, axis=-2), f, axis=-1)
    return out / (f * f)


class SpectralBounds(NamedTuple):
    L: float
    mu: float
    L_residual: float
    mu_residual: float
    converged: bool


def _power(apply, n, iters, rng, tol):
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    rho, res = 0.0, np.inf
    for _ in range(iters):
        w = apply(v)
        rho = float(v @ w)
        res = float(np.linalg.norm(w - rho * v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, 0.0
        v = w / nw
        if res <= tol:
            break
    return rho, res


def spectral_bounds(A: SystemMatrix, iters: int = 1000, seed: int = 0,
                    tol: float = 1e-10) -> SpectralBounds:
    """Extreme eigenvalues of ``A^T A`` by (shifted) power iteration.

    ``mu`` is reported as exactly 0 when ``A^T A`` is structurally singular
    (fewer rays than pixels, or a pixel no ray touches) or when the shifted
    estimate falls below ``1e-8 * L``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    M, MT = A.matrix, A.T

    def gram(v):
        return MT @ (M @ v)

    L, res_L = _power(gram, A.cols, iters, rng, tol)
    rel = tol * max(L, 1.0)
    touched = np.diff(MT.indptr) > 0
    if A.rows < A.cols or not touched.all():
        return SpectralBounds(L, 0.0, res_L, 0.0, res_L <= rel)
    top, res_mu = _power(lambda v: L * v - gram(v), A.cols, iters, rng, tol)
    mu = L - top
    if mu < 1e-8 * L:
        mu = 0.0
    return SpectralBounds(L, mu, res_L, res_mu, max(res_L, res_mu) <= rel)


_LRSM = b"LRSM"


def save_matrix(path, A: SystemMatrix) -> None:
    """Binary CSR cache: magic, u16 version, u64 rows/cols/nnz, u64/u32/f32 arrays."""
    m = A.matrix
    with open(path, "wb") as fh:
        fh.write(_LRSM)
        fh.write(struct.pack("<HQQQ", 1, m.shape[0], m.shape[1], m.nnz))
        fh.write(m.indptr.astype("<u8").tobytes())
        fh.write(m.indices.astype("<u4").tobytes())
        fh.write(m.data.astype("<f4").tobytes())


def load_matrix(path, geom: GeometryConfig, grid: str = "fine") -> SystemMatrix:
    with open(path, "rb") as fh:
        if fh.read(4) != _LRSM:
            raise ValueError(f"{path}: not an LRSM file")
        version, rows, cols, nnz = struct.unpack("<HQQQ", fh.read(26))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        indptr = np.frombuffer(fh.read(8 * (rows + 1)), "<u8").astype(np.int64)
        indices = np.frombuffer(fh.read(4 * nnz), "<u4").astype(np.int32)
        data = np.frombuffer(fh.read(4 * nnz), "<f4").astype(np.float64)
    side = geom.side(grid)
    if rows != geom.num_views * geom.num_bins or cols != side * side:
        raise DimensionError(f"{path}: cached matrix does not match geometry")
    mat = sp.csr_matrix((data, indices, indptr), shape=(rows, cols))
    return SystemMatrix(mat, side, geom.num_views, geom.num_bins, geom.pixel_pitch(grid))
