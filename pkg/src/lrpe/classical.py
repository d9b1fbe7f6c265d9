"""Classical baselines: filtered back-projection and TV (Chambolle-Pock)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .tomo import DimensionError, GeometryConfig, SystemMatrix, back_project, forward_project


class ParameterError(ValueError):
    pass


def ramp_filter(num_bins: int, spacing: float, window: str = "ramlak") -> np.ndarray:
    """Frequency response of the band-limited ramp filter, zero padded.

    Built from the spatial Ram-Lak kernel so the DC term is correct.
    Returns an array of length ``pad``.
    """
    pad = max(64, int(2 ** np.ceil(np.log2(2 * num_bins))))
    n = np.concatenate([np.arange(0, pad // 2 + 1), np.arange(-pad // 2 + 1, 0)])
    h = np.zeros(pad)
    h[0] = 1.0 / (4 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    H = np.real(np.fft.fft(h)) * spacing
    if window == "hann":
        freq = np.fft.fftfreq(pad)
        H *= 0.5 * (1 + np.cos(2 * np.pi * freq))
    elif window != "ramlak":
        raise ParameterError(f"unknown filter window {window!r}")
    return H


def _filter_rows(s: np.ndarray, spacing: float, window: str) -> np.ndarray:
    nb = s.shape[-1]
    H = ramp_filter(nb, spacing, window)
    S = np.fft.fft(s, n=len(H), axis=-1)
    return np.real(np.fft.ifft(S * H, axis=-1))[..., :nb]


def _interp_rows(q: np.ndarray, t0: float, dt: float, pos: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``q`` (uniform grid starting at ``t0``) at ``pos``; zero outside."""
    f = (pos - t0) / dt
    i = np.floor(f).astype(np.int64)
    w = f - i
    nb = q.shape[-1]
    qp = np.concatenate([q, [0.0]])
    lo = np.where((i >= 0) & (i < nb), i, nb)
    hi = np.where((i + 1 >= 0) & (i + 1 < nb), i + 1, nb)
    return (1 - w) * qp[lo] + w * qp[hi]


def fbp(s: np.ndarray, geom: GeometryConfig, window: str = "ramlak") -> np.ndarray:
    """Filtered back-projection onto the fine grid."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (geom.num_views, geom.num_bins):
        raise DimensionError(f"sinogram shape {s.shape} does not match geometry")
    N = geom.fine_size
    pitch = geom.pixel_pitch()
    c = -geom.image_width / 2 + (np.arange(N) + 0.5) * pitch
    X, Y = np.meshgrid(c, -c)
    dth = np.deg2rad(geom.step_deg)
    bins = geom.bin_positions()
    t0, dt = bins[0], geom.detector_spacing
    out = np.zeros((N, N))
    if geom.beam == "parallel":
        q = _filter_rows(s, dt, window)
        for th, row in zip(geom.angles(), q):
            out += _interp_rows(row, t0, dt, X * np.cos(th) + Y * np.sin(th))
        return out * dth
    D = geom.source_radius
    q = _filter_rows(s * (D / np.sqrt(D**2 + bins**2)), dt, window)
    for th, row in zip(geom.angles(), q):
        depth = D + (-X * np.sin(th) + Y * np.cos(th))
        lateral = X * np.cos(th) + Y * np.sin(th)
        U = depth / D
        out += _interp_rows(row, t0, dt, D * lateral / depth) / U**2
    return 0.5 * out * dth


def gradient(u: np.ndarray) -> np.ndarray:
    """Forward differences, Neumann boundary; shape ``(2, H, W)``."""
    g = np.zeros((2,) + u.shape)
    g[0, :-1] = u[1:] - u[:-1]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`."""
    d = np.zeros(p.shape[1:])
    d[:-1] += p[0, :-1]
    d[1:] -= p[0, :-1]
    d[:, :-1] += p[1, :, :-1]
    d[:, 1:] -= p[1, :, :-1]
    return d


def tv_objective(u: np.ndarray, A: SystemMatrix, b: np.ndarray, lam: float) -> float:
    r = forward_project(A, u) - b
    g = gradient(u)
    return float(0.5 * np.sum(r * r) + lam * np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def stacked_norm_sq(A: SystemMatrix, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of ``||(A, grad)||^2``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((A.side, A.side))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = back_project(A, forward_project(A, v)) - divergence(gradient(v))
        lam = float(np.sum(v * w))
        v = w / np.linalg.norm(w)
    return lam


@dataclass(frozen=True)
class TVParams:
    lam: float = 0.05
    tau: float | None = None
    sigma: float | None = None
    iters: int = 300

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError("lambda must be positive")
        for name in ("tau", "sigma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ParameterError(f"{name} must be positive")
        if self.iters < 1:
            raise ParameterError("iters must be >= 1")


@dataclass
class TVResult:
    image: np.ndarray
    residuals: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)  # every 10 iterations


def tv_reconstruct(s: np.ndarray, A: SystemMatrix, p: TVParams = TVParams(),
                   norm_sq: float | None = None) -> TVResult:
    """Chambolle-Pock for ``min_u 0.5 ||Au - b||^2 + lam * TV(u)`` (isotropic TV)."""
    b = np.asarray(s, dtype=np.float64)
    if b.shape != (A.num_views, A.num_bins):
        raise DimensionError(f"sinogram shape {b.shape} does not match operator")
    K2 = stacked_norm_sq(A) * 1.01 if norm_sq is None else norm_sq
    tau = p.tau if p.tau is not None else 1.0 / np.sqrt(K2)
    sigma = p.sigma if p.sigma is not None else 1.0 / np.sqrt(K2)
    if tau * sigma * K2 > 1.0 + 1e-12:
        raise ParameterError(f"tau*sigma*||K||^2 = {tau * sigma * K2:.4g} exceeds 1")
    u = np.zeros((A.side, A.side))
    ubar = u.copy()
    pd = np.zeros_like(b)
    qd = np.zeros((2,) + u.shape)
    res = TVResult(u)
    for k in range(p.iters):
        pd = (pd + sigma * (forward_project(A, ubar) - b)) / (1.0 + sigma)
        qd = qd + sigma * gradient(ubar)
        mag = np.maximum(1.0, np.sqrt(qd[0] ** 2 + qd[1] ** 2) / p.lam)
        qd /= mag
        u_new = u - tau * (back_project(A, pd) - divergence(qd))
        ubar = 2 * u_new - u
        res.residuals.append(float(np.linalg.norm(u_new - u)))
        u = u_new
        if (k + 1) % 10 == 0:
            res.objective.append(tv_objective(u, A, b, p.lam))
    res.image = u
    return res


class PriorReconstructor(Protocol):
    """Anything mapping a sinogram to a coarse-grid image."""

    def __call__(self, b: np.ndarray) -> np.ndarray: ...


class TVPrior:
    """Coarse-grid TV reconstruction used as the low-resolution prior."""

    def __init__(self, A_coarse: SystemMatrix, params: TVParams = TVParams()):
        self.A = A_coarse
        self.params = params
        self._norm_sq = stacked_norm_sq(A_coarse) * 1.01

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return tv_reconstruct(b, self.A, self.params, norm_sq=self._norm_sq).image
