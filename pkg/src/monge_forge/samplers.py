"""Built-in distributions for the experiments.

A sampler is any callable ``sampler(n, rng) -> (n, d) array`` or
``(points, labels)``; :func:`builtin_sampler` wraps the registered ones with
their own seeded stream for direct use.
"""

from __future__ import annotations

from typing import Any, Callable, Mapping

import numpy as np

from . import geo

TWO_PI = 2 * np.pi


class SamplerError(ValueError):
    pass


def gaussian(mean, cov) -> Callable:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape != (len(mean), len(mean)):
        raise SamplerError("cov must be d x d for a mean of length d")
    w, V = np.linalg.eigh(cov)
    if w.min() < 0:
        raise SamplerError("cov must be positive semidefinite")
    root = V * np.sqrt(w)
    return lambda n, rng: mean + rng.standard_normal((n, len(mean))) @ root.T


def normal(dim: int = 1) -> Callable:
    return lambda n, rng: rng.standard_normal((n, dim))


def uniform(low, high) -> Callable:
    low = np.atleast_1d(np.asarray(low, dtype=np.float64))
    high = np.atleast_1d(np.asarray(high, dtype=np.float64))
    if low.shape != high.shape or np.any(high <= low):
        raise SamplerError("uniform box needs low < high componentwise")
    return lambda n, rng: rng.uniform(low, high, size=(n, len(low)))


def delta0(dim: int = 1) -> Callable:
    return lambda n, rng: np.zeros((n, dim))


def annulus(r_inner: float, r_outer: float) -> Callable:
    """Uniform on the planar annulus r_inner <= |x| <= r_outer."""
    if not 0 <= r_inner < r_outer:
        raise SamplerError(f"annulus needs 0 <= inner < outer (got {r_inner}, {r_outer})")

    def draw(n, rng):
        # area-uniform radius by inverse CDF of r^2
        r = np.sqrt(rng.uniform(r_inner**2, r_outer**2, n))
        a = rng.uniform(0, TWO_PI, n)
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)

    return draw


def sphere_cap(phi_lo: float, phi_hi: float) -> Callable:
    """Uniform in (theta, phi) coordinates over [0, 2pi) x [phi_lo, phi_hi]."""
    if not 0 <= phi_lo < phi_hi <= np.pi:
        raise SamplerError("sphere cap needs 0 <= phi_lo < phi_hi <= pi")
    return lambda n, rng: np.stack([rng.uniform(0, TWO_PI, n), rng.uniform(phi_lo, phi_hi, n)], axis=-1)


def ellipse_points(t, a: float, b: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)


def ellipse_gap(a: float = 2.0, b: float = 1.0, gap: float = np.pi / 2) -> Callable:
    """Uniform in the curve parameter t on an ellipse with the arc |t| < gap/2 removed."""
    if a <= 0 or b <= 0 or not 0 <= gap < TWO_PI:
        raise SamplerError("ellipse needs positive axes and 0 <= gap < 2pi")
    return lambda n, rng: ellipse_points(rng.uniform(gap / 2, TWO_PI - gap / 2, n), a, b)


def labeled_mixture(means, std: float = 0.5, weights=None) -> Callable:
    """Isotropic Gaussian mixture returning ``(points, component labels)``."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k = len(means)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    if std <= 0 or len(w) != k or np.any(w < 0):
        raise SamplerError("mixture needs std > 0 and one nonnegative weight per component")
    w = w / w.sum()

    def draw(n, rng):
        labels = rng.choice(k, size=n, p=w)
        return means[labels] + std * rng.standard_normal((n, means.shape[1])), labels

    return draw


def land(land_set: geo.LandSet, jitter: float | None = None) -> Callable:
    return lambda n, rng: geo.sample_uniform_land(land_set, n, rng, jitter)


def population(pop: geo.PopulationSet, jitter: float | None = None) -> Callable:
    return lambda n, rng: pop.sample(n, rng, jitter)


def toy_image_basis(side: int = 4) -> np.ndarray:
    """Smooth low-frequency patterns spanning the toy image space."""
    u = (np.arange(side) + 0.5) / side
    basis = []
    for fx in range(3):
        for fy in range(3):
            img = np.cos(np.pi * fx * u)[:, None] * np.cos(np.pi * fy * u)[None, :]
            basis.append(img.ravel())
    B = np.array(basis)
    return B / np.linalg.norm(B, axis=1, keepdims=True)


def toy_images(side: int = 4, noise: float = 0.05, mask=None) -> Callable:
    """Structured Gaussian images (flattened); pixels with ``mask == 0`` are zeroed."""
    B = toy_image_basis(side)
    scales = 1.0 / (1.0 + np.arange(len(B)))
    keep = None if mask is None else np.asarray(mask, dtype=np.float64)

    def draw(n, rng):
        imgs = (rng.standard_normal((n, len(B))) * scales) @ B * side + noise * rng.standard_normal((n, side * side))
        return imgs if keep is None else imgs * keep

    return draw


def center_hole_mask(side: int = 4, hole: int = 2) -> tuple[float, ...]:
    """1 on known pixels, 0 on a centred ``hole x hole`` square."""
    m = np.ones((side, side))
    s = (side - hole) // 2
    m[s:s + hole, s:s + hole] = 0
    return tuple(m.ravel())


_REGISTRY: dict[str, Callable[..., Callable]] = {
    "gaussian": gaussian,
    "normal": normal,
    "uniform": uniform,
    "delta0": delta0,
    "annulus": annulus,
    "sphere_cap": sphere_cap,
    "ellipse_gap": ellipse_gap,
    "labeled_mixture": labeled_mixture,
    "toy_images": toy_images,
}


def register(name: str, factory: Callable[..., Callable]) -> None:
    _REGISTRY[name] = factory


def sampler_names() -> list[str]:
    return sorted(_REGISTRY)


class Sampler:
    """A registered distribution bound to its own seeded stream."""

    def __init__(self, name: str, draw: Callable, seed: int | None):
        self.name = name
        self._draw = draw
        self._rng = np.random.default_rng(seed)

    def __call__(self, n: int, rng: np.random.Generator):
        return self._draw(n, rng)

    def draw(self, n: int):
        return self._draw(n, self._rng)


def builtin_sampler(name: str, params: Mapping[str, Any] | None = None, seed: int | None = 0) -> Sampler:
    if name not in _REGISTRY:
        raise SamplerError(f"unknown sampler {name!r}; known: {sampler_names()}")
    try:
        draw = _REGISTRY[name](**dict(params or {}))
    except TypeError as err:
        raise SamplerError(f"bad parameters for {name}: {err}") from None
    return Sampler(name, draw, seed)
