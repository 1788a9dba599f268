"""Geometry and sampling on the unit hypersphere S^d embedded in R^(d+1).

All distances and radii are geodesic (radians).  Caps on S^2 are sampled
with the exact inverse-CDF construction; for higher d the reference method
is rejection sampling from the whole sphere.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, special

from augoverlap._io import atomic_write_text

log = logging.getLogger(__name__)

UNIT_TOL = 1e-9
MIN_ACCEPTANCE = 1e-6


def gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inner products of rows, accumulated coordinate by coordinate.

    Slower than ``a @ b.T`` but bitwise reproducible regardless of block
    shape, so thresholds and extrema computed on different slices agree.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    g = a[:, None, 0] * b[None, :, 0]
    for k in range(1, a.shape[1]):
        g += a[:, None, k] * b[None, :, k]
    return g


def geodesic_distance(u, v) -> float:
    """Great-circle distance between two unit vectors (radians)."""
    c = float(gram(np.asarray(u, dtype=float), np.asarray(v, dtype=float))[0, 0])
    return math.acos(min(1.0, max(-1.0, c)))


def pairwise_geodesic(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Matrix of geodesic distances between rows of ``a`` and rows of ``b``."""
    b = a if b is None else b
    return np.arccos(np.clip(gram(a, b), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sphere_area(d: int) -> float:
    """Surface area of S^d (the unit sphere in R^(d+1))."""
    return 2.0 * math.pi ** ((d + 1) / 2) / math.gamma((d + 1) / 2)


def ball_volume(d: int) -> float:
    """Volume of the unit ball in R^d."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def cap_area(theta: float, d: int = 2) -> float:
    """Surface area of a geodesic cap of radius ``theta`` on S^d."""
    if d == 2:
        return 2.0 * math.pi * (1.0 - math.cos(theta))
    if theta > math.pi / 2:
        return sphere_area(d) - cap_area(math.pi - theta, d)
    return 0.5 * sphere_area(d) * float(special.betainc(d / 2, 0.5, math.sin(theta) ** 2))


def cap_radius_from_area(area: float, d: int = 2) -> float:
    total = sphere_area(d)
    if not 0.0 < area <= total:
        raise ValueError(f"cap area must lie in (0, {total:.6g}] on S^{d}, got {area}")
    if d == 2:
        return math.acos(1.0 - area / (2.0 * math.pi))
    if area == total:
        return math.pi
    return optimize.brentq(lambda t: cap_area(t, d) - area, 0.0, math.pi, xtol=1e-15, rtol=1e-15)


@dataclass(frozen=True)
class SphericalCap:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        n = np.linalg.norm(c)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"cap center must be unit-norm, got norm {n}")
        object.__setattr__(self, "center", c / n)
        if not 0.0 < self.radius <= math.pi:
            raise ValueError(f"cap radius must lie in (0, pi], got {self.radius}")

    @classmethod
    def from_area(cls, center, area: float) -> "SphericalCap":
        d = len(center) - 1
        return cls(np.asarray(center, dtype=float), cap_radius_from_area(area, d))

    @property
    def dim(self) -> int:
        return len(self.center) - 1

    @property
    def area(self) -> float:
        return cap_area(self.radius, self.dim)

    def contains(self, points: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
        pts = np.atleast_2d(points)
        return pairwise_geodesic(pts, self.center[None, :])[:, 0] <= self.radius + tol


def _pole_to(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # Householder reflection taking the last basis vector onto each center.
    # Reflections preserve the uniform measure on a cap.
    v = -centers.copy()
    v[:, -1] += 1.0
    vv = np.einsum("ij,ij->i", v, v)
    vs = np.einsum("ij,ij->i", v, samples)
    coef = np.divide(2.0 * vs, vv, out=np.zeros_like(vs), where=vv > 1e-30)
    out = samples - coef[:, None] * v
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _s2_polar(rng: np.random.Generator, radius: float, n: int) -> np.ndarray:
    cos_t = rng.uniform(math.cos(radius), 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)


def _reject(rng: np.random.Generator, center: np.ndarray, radius: float, n: int) -> np.ndarray:
    d = len(center) - 1
    frac = cap_area(radius, d) / sphere_area(d)
    if frac < MIN_ACCEPTANCE:
        raise ValueError(
            f"rejection sampler acceptance {frac:.3g} below {MIN_ACCEPTANCE:g}: "
            f"cap radius {radius:.4g} too small on S^{d}"
        )
    cos_max = math.cos(radius)
    out = []
    need = n
    while need > 0:
        batch = max(64, int(1.2 * need / frac))
        g = rng.standard_normal((batch, d + 1))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        keep = g[g @ center >= cos_max]
        out.append(keep[:need])
        need -= len(out[-1])
    return np.concatenate(out, axis=0)


def sample_cap_uniform(cap: SphericalCap, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform point(s) on the surface of ``cap``.

    Returns shape (d+1,) when ``size`` is None, else (size, d+1).
    """
    n = 1 if size is None else int(size)
    if cap.dim < 1:
        raise ValueError("ambient dimension must be at least 2")
    if cap.dim == 2:
        pts = _pole_to(_s2_polar(rng, cap.radius, n), np.repeat(cap.center[None, :], n, axis=0))
    else:
        pts = _reject(rng, cap.center, cap.radius, n)
    return pts[0] if size is None else pts


def augment(x, r: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform random view of ``x`` inside the geodesic disk of radius ``r``."""
    x = np.asarray(x, dtype=float)
    return augment_batch(x[None, :], r, rng)[0]


def augment_batch(xs: np.ndarray, r: float, rng: np.random.Generator) -> np.ndarray:
    """One independent view per row of ``xs``."""
    if r < 0 or r > math.pi:
        raise ValueError(f"augmentation radius must lie in [0, pi], got {r}")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if r == 0:
        return xs.copy()
    if xs.shape[1] == 3:
        return _pole_to(_s2_polar(rng, r, len(xs)), xs)
    return np.stack([_reject(rng, x, r, 1)[0] for x in xs])


@dataclass
class LabeledSphereDataset:
    points: np.ndarray
    labels: np.ndarray
    caps: list[SphericalCap]
    seed: object = None
    foreign_count: int = 0

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1] - 1

    @property
    def n_classes(self) -> int:
        return len(self.caps)

    def to_csv(self, path) -> None:
        header = "id,label," + ",".join(f"x{j}" for j in range(self.points.shape[1]))
        lines = [header]
        for i, (p, y) in enumerate(zip(self.points, self.labels)):
            lines.append(f"{i},{int(y)}," + ",".join(repr(float(v)) for v in p))
        atomic_write_text(Path(path), "\n".join(lines) + "\n")


def make_dataset(
    K: int,
    n_per_class: int | Sequence[int],
    centers,
    cap_size: float,
    seed,
    by: str = "area",
) -> LabeledSphereDataset:
    """Draw ``n_per_class`` uniform samples from a cap around each center.

    ``cap_size`` is an area (default) or a geodesic radius when
    ``by="radius"``.  Overlapping caps are allowed; points that end up
    closer to a foreign center are counted in ``foreign_count``.
    """
    centers = normalize_rows(np.asarray(centers, dtype=float))
    if len(centers) != K:
        raise ValueError(f"expected {K} centers, got {len(centers)}")
    if K > 1 and pairwise_geodesic(centers)[np.triu_indices(K, 1)].min() == 0.0:
        raise ValueError("cap centers must be pairwise distinct")
    counts = [int(n_per_class)] * K if np.isscalar(n_per_class) else [int(c) for c in n_per_class]
    if by == "area":
        caps = [SphericalCap.from_area(c, cap_size) for c in centers]
    elif by == "radius":
        caps = [SphericalCap(c, cap_size) for c in centers]
    else:
        raise ValueError(f"unknown cap parameterization {by!r}")

    rng = np.random.default_rng(seed)
    pts = [sample_cap_uniform(cap, rng, n) for cap, n in zip(caps, counts)]
    points = np.concatenate(pts, axis=0)
    labels = np.repeat(np.arange(K), counts)

    foreign = 0
    if K > 1:
        nearest = np.argmin(pairwise_geodesic(points, centers), axis=1)
        foreign = int(np.sum(nearest != labels))
        if foreign:
            log.warning("%d points lie closer to a foreign cap center", foreign)
    return LabeledSphereDataset(points, labels, caps, seed, foreign)


PAPER_CENTERS = ((0.0, 0.0, 1.0), (0.0, 0.0, -1.0))
PAPER_CAP_AREA = 1.0


def paper_synthetic(seed: int = 0, n_train: int = 5000, n_test: int = 1000):
    """Two area-1 caps on S^2 at the poles; returns ``(train, test)``."""
    train = make_dataset(2, n_train // 2, PAPER_CENTERS, PAPER_CAP_AREA, seed=[seed, 0])
    test = make_dataset(2, n_test // 2, PAPER_CENTERS, PAPER_CAP_AREA, seed=[seed, 1])
    return train, test
