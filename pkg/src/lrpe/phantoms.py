"""Ellipse phantoms and sinogram noise models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0  # degrees
    intensity: float = 1.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def contains(self, x, y):
        t = np.deg2rad(self.angle)
        xr = (x - self.cx) * np.cos(t) + (y - self.cy) * np.sin(t)
        yr = -(x - self.cx) * np.sin(t) + (y - self.cy) * np.cos(t)
        return (xr / self.a) ** 2 + (yr / self.b) ** 2 <= 1.0


@dataclass(frozen=True)
class EllipsePhantomSpec:
    ellipses: tuple[Ellipse, ...] = field(default_factory=tuple)


# Modified Shepp-Logan (Toft), intensities keep the image in [0, 1].
SHEPP_LOGAN = EllipsePhantomSpec((
    Ellipse(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    Ellipse(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    Ellipse(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    Ellipse(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    Ellipse(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    Ellipse(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    Ellipse(0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    Ellipse(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
))


def pixel_centres(side: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalised ``[-1, 1]`` coordinates of pixel centres (row 0 at the top)."""
    c = -1.0 + (np.arange(side) + 0.5) * 2.0 / side
    x, y = np.meshgrid(c, -c)
    return x, y


def rasterize_phantom(spec: EllipsePhantomSpec, side: int) -> np.ndarray:
    if side < 1:
        raise ValueError("side must be >= 1")
    x, y = pixel_centres(side)
    img = np.zeros((side, side))
    for e in spec.ellipses:
        img[e.contains(x, y)] += e.intensity
    return np.clip(img, 0.0, 1.0)


def random_phantom_spec(seed: int, k_ellipses: int = 6) -> EllipsePhantomSpec:
    """A body-like ellipse filled with ``k_ellipses`` random inclusions."""
    if k_ellipses < 1:
        raise ValueError("k_ellipses must be >= 1")
    rng = np.random.default_rng(seed)
    body = Ellipse(0.0, 0.0, rng.uniform(0.6, 0.85), rng.uniform(0.6, 0.85),
                   rng.uniform(0, 180), rng.uniform(0.2, 0.5))
    parts = [body]
    for _ in range(k_ellipses):
        r = rng.uniform(0.0, 0.55)
        phi = rng.uniform(0, 2 * np.pi)
        parts.append(Ellipse(r * np.cos(phi), r * np.sin(phi),
                             rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3),
                             rng.uniform(0, 180), rng.uniform(-0.3, 0.5)))
    return EllipsePhantomSpec(tuple(parts))


def random_phantom(seed: int, side: int, k_ellipses: int = 6) -> np.ndarray:
    return rasterize_phantom(random_phantom_spec(seed, k_ellipses), side)


def read_phantom_spec(path) -> EllipsePhantomSpec:
    """Flat key-value file, one ``ellipse.<i> = cx cy a b angle intensity`` per line."""
    from .io import read_kv

    kv = read_kv(path)
    keys = sorted((k for k in kv if k.startswith("ellipse")),
                  key=lambda k: int(k.split(".", 1)[1]) if "." in k else 0)
    ellipses = []
    for k in keys:
        vals = [float(v) for v in kv[k].split()]
        ellipses.append(Ellipse(*vals))
    return EllipsePhantomSpec(tuple(ellipses))


def write_phantom_spec(path, spec: EllipsePhantomSpec) -> None:
    with open(path, "w") as fh:
        for i, e in enumerate(spec.ellipses):
            fh.write(f"ellipse.{i} = {e.cx!r} {e.cy!r} {e.a!r} {e.b!r} {e.angle!r} {e.intensity!r}\n")


NOISE_KINDS = ("gaussian_percent", "poisson_photons", "salt_pepper")


@dataclass(frozen=True)
class NoiseSpec:
    """``level`` is the percent as a fraction (0.05 = 5%), the photon count, or
    the corrupted fraction, depending on ``kind``."""

    kind: str
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.level > 0:
            raise ValueError("noise level must be > 0")
        if self.kind == "salt_pepper" and not self.level < 1:
            raise ValueError("salt_pepper fraction must lie in (0, 1)")


def _rng(seed: int) -> np.random.Generator:
    # Philox is counter based: draw i only depends on (seed, i)
    return np.random.Generator(np.random.Philox(key=seed))


def add_noise(s: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    rng = _rng(spec.seed)
    if spec.kind == "gaussian_percent":
        sigma = spec.level * np.mean(np.abs(s))
        return s + sigma * rng.standard_normal(s.shape)
    if spec.kind == "poisson_photons":
        counts = rng.poisson(spec.level * np.exp(-s))
        return -np.log(np.maximum(counts, 1) / spec.level)
    out = s.copy()
    flat = out.reshape(-1)
    count = int(round(spec.level * flat.size))
    idx = rng.permutation(flat.size)[:count]
    half = count // 2
    flat[idx[:half]] = s.max()
    flat[idx[half:]] = 0.0
    return out
