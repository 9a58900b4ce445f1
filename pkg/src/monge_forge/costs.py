"""Transport costs c(x, y) with analytic gradients in y.

Every cost is described by a frozen :class:`CostSpec`.  The batched functions
:func:`cost_values` and :func:`cost_grads_y` broadcast over any leading axes
(the last axis holds coordinates), so the same code evaluates a mini-batch of
pairs or a full n x n cost matrix.  :func:`eval_cost` and :func:`grad_y` are
the single-pair entry points.

Sphere costs take (theta, phi) pairs: azimuth first, polar angle second.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

COST_KINDS = (
    "quadratic",
    "inverse_square",
    "neg_cosine",
    "sphere_geodesic",
    "sphere_linearized",
    "masked_mse",
    "class_contrastive",
)

ARCCOS_CLAMP = 1e-9
GRADIENT_REFUSAL = 1e-6
_SPHERE_TOL = 1e-9


class CostDomainError(ValueError):
    """A cost was evaluated outside its domain.

    ``code`` is one of ``dim_mismatch``, ``zero_norm``, ``coincident``,
    ``sphere_domain``, ``near_antipodal``, ``missing_labels``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass(frozen=True)
class CostSpec:
    kind: str
    n: int
    m: int
    scale: float = 1.0
    radius: float = 1.0
    alpha: float = 1.0
    lam: float = 0.5
    mask: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.n < 1 or self.m < 1:
            raise ValueError("cost dims must be positive")
        if self.n != self.m:
            raise ValueError(f"{self.kind} compares points of equal dimension (got n={self.n}, m={self.m})")
        if self.kind.startswith("sphere") and self.n != 2:
            raise ValueError("sphere costs act on (theta, phi) pairs")
        if self.kind == "sphere_geodesic" and self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.kind == "masked_mse":
            if self.mask is None:
                raise ValueError("masked_mse needs a mask")
            mask = tuple(float(v) for v in self.mask)
            if len(mask) != self.m or any(v not in (0.0, 1.0) for v in mask):
                raise ValueError("mask must have length m with entries in {0, 1}")
            object.__setattr__(self, "mask", mask)
            if self.alpha < 0:
                raise ValueError("alpha must be >= 0")
        if self.kind == "class_contrastive" and self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def needs_labels(self) -> bool:
        return self.kind == "class_contrastive"

    @property
    def hessian_y_independent_of_x(self) -> bool:
        """Whether d^2c/dy^2 is free of x (needed by the duality-gap bound)."""
        return self.kind in ("quadratic", "masked_mse", "class_contrastive")


def quadratic(dim: int, scale: float = 1.0) -> CostSpec:
    return CostSpec("quadratic", dim, dim, scale=scale)


# --- helpers --------------------------------------------------------------


def _pair(cost: CostSpec, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != cost.n or y.shape[-1] != cost.m:
        raise CostDomainError(
            "dim_mismatch", f"expected x of width {cost.n} and y of width {cost.m}, got {x.shape} and {y.shape}"
        )
    return x, y


def _check_sphere_domain(*pts):
    for p in pts:
        theta, phi = p[..., 0], p[..., 1]
        if np.any((theta < -_SPHERE_TOL) | (theta >= 2 * np.pi + _SPHERE_TOL)):
            raise CostDomainError("sphere_domain", "theta outside [0, 2*pi)")
        if np.any((phi < -_SPHERE_TOL) | (phi > np.pi + _SPHERE_TOL)):
            raise CostDomainError("sphere_domain", "phi outside [0, pi]")


def sphere_inner(x, y):
    """Inner product of the unit-sphere embeddings of (theta, phi) pairs."""
    t1, p1 = x[..., 0], x[..., 1]
    t2, p2 = y[..., 0], y[..., 1]
    return np.sin(p1) * np.sin(p2) * np.cos(t1 - t2) + np.cos(p1) * np.cos(p2)


def _sphere_inner_grad_y(x, y):
    t1, p1 = x[..., 0], x[..., 1]
    t2, p2 = y[..., 0], y[..., 1]
    d_theta = np.sin(p1) * np.sin(p2) * np.sin(t1 - t2)
    d_phi = np.sin(p1) * np.cos(p2) * np.cos(t1 - t2) - np.cos(p1) * np.sin(p2)
    return np.stack([d_theta, d_phi], axis=-1)


def _label_mismatch(labels, x, y):
    lx, ly = (np.asarray(v) for v in labels)
    # a label with the same rank as its point is a probability vector: compare argmax
    if lx.ndim == x.ndim:
        lx = np.argmax(lx, axis=-1)
    if ly.ndim == y.ndim:
        ly = np.argmax(ly, axis=-1)
    return (lx != ly).astype(np.float64)


def _validate(cost: CostSpec, x, y, labels, strict: bool):
    if cost.kind == "neg_cosine":
        if np.any(np.linalg.norm(x, axis=-1) == 0) or np.any(np.linalg.norm(y, axis=-1) == 0):
            raise CostDomainError("zero_norm", "cosine similarity of a zero vector")
    elif cost.kind == "inverse_square":
        if np.any(np.all(x == y, axis=-1)):
            raise CostDomainError("coincident", "inverse-square cost at x == y")
    elif cost.kind.startswith("sphere") and strict:
        _check_sphere_domain(x, y)
    elif cost.kind == "class_contrastive" and labels is None:
        raise CostDomainError("missing_labels", "class_contrastive cost needs (source, target) labels")


# --- batched evaluation ---------------------------------------------------


def cost_values(cost: CostSpec, x, y, labels=None, strict: bool = True) -> np.ndarray:
    """c(x, y) over broadcast leading axes.

    ``strict=False`` skips the (theta, phi) range check for sphere costs; the
    formulas are periodic, so unconstrained network outputs are still valid.
    """
    x, y = _pair(cost, x, y)
    _validate(cost, x, y, labels, strict)
    kind = cost.kind
    if kind == "quadratic":
        return cost.scale * np.sum((x - y) ** 2, axis=-1)
    if kind == "inverse_square":
        return 1.0 / np.sum((x - y) ** 2, axis=-1)
    if kind == "neg_cosine":
        return -np.sum(x * y, axis=-1) / (np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1))
    if kind == "sphere_geodesic":
        ip = np.clip(sphere_inner(x, y), -1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP)
        return cost.radius * np.arccos(ip)
    if kind == "sphere_linearized":
        return np.pi / 2 - sphere_inner(x, y)
    if kind == "masked_mse":
        mask = np.asarray(cost.mask)
        return cost.alpha * np.sum(((x - y) * mask) ** 2, axis=-1) / cost.n
    # class_contrastive
    return cost.scale * np.sum((x - y) ** 2, axis=-1) + cost.lam * _label_mismatch(labels, x, y)


def cost_grads_y(cost: CostSpec, x, y, labels=None, strict: bool = True) -> np.ndarray:
    """dc/dy over broadcast leading axes; the label indicator contributes zero."""
    x, y = _pair(cost, x, y)
    _validate(cost, x, y, labels, strict)
    kind = cost.kind
    if kind in ("quadratic", "class_contrastive"):
        return 2.0 * cost.scale * (y - x)
    if kind == "inverse_square":
        d = y - x
        sq = np.sum(d * d, axis=-1, keepdims=True)
        return -2.0 * d / sq**2
    if kind == "neg_cosine":
        nx = np.linalg.norm(x, axis=-1, keepdims=True)
        ny = np.linalg.norm(y, axis=-1, keepdims=True)
        dot = np.sum(x * y, axis=-1, keepdims=True)
        return -(x / (nx * ny) - dot * y / (nx * ny**3))
    if kind == "sphere_geodesic":
        ip = sphere_inner(x, y)
        if np.any(np.abs(ip) > 1 - GRADIENT_REFUSAL):
            raise CostDomainError("near_antipodal", "geodesic gradient refused: points coincide or are antipodal")
        return -cost.radius / np.sqrt(1 - ip**2)[..., None] * _sphere_inner_grad_y(x, y)
    if kind == "sphere_linearized":
        return -_sphere_inner_grad_y(x, y)
    # masked_mse
    mask = np.asarray(cost.mask)
    return 2.0 * cost.alpha * mask * (y - x) / cost.n


def cost_matrix(cost: CostSpec, X, Y, labels=None, strict: bool = True) -> np.ndarray:
    """n x m matrix of c(X_i, Y_j); labels as (labels_X, labels_Y) arrays."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    pair_labels = None
    if labels is not None:
        lx, ly = (np.asarray(v) for v in labels)
        pair_labels = (lx[:, None, ...], ly[None, :, ...])
    return cost_values(cost, X[:, None, :], Y[None, :, :], pair_labels, strict)


# --- single pair API ------------------------------------------------------


def eval_cost(cost: CostSpec, x, y, labels=None) -> float:
    x, y = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float))
    if x.ndim != 1 or y.ndim != 1:
        raise CostDomainError("dim_mismatch", "eval_cost takes single vectors")
    return float(cost_values(cost, x, y, labels))


def grad_y(cost: CostSpec, x, y, labels=None) -> np.ndarray:
    x, y = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float))
    if x.ndim != 1 or y.ndim != 1:
        raise CostDomainError("dim_mismatch", "grad_y takes single vectors")
    return cost_grads_y(cost, x, y, labels)


# --- config ---------------------------------------------------------------


def read_mask(path: str | Path) -> tuple[float, ...]:
    """Mask file: CSV rows of 0/1, concatenated row-major."""
    values = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            for cell in row:
                cell = cell.strip()
                if not cell:
                    continue
                if cell not in ("0", "1", "0.0", "1.0"):
                    raise ValueError(f"{path}:{lineno}: mask entries must be 0 or 1, got {cell!r}")
                values.append(float(cell))
    return tuple(values)


def cost_from_config(cfg: Mapping[str, Any], dim: int, base_dir: str | Path = ".") -> CostSpec:
    """Build a cost from flat config keys (``cost``, ``cost_scale``, ``alpha``, ...)."""
    kind = cfg["cost"]
    mask = cfg.get("mask")
    if mask is None and "mask_file" in cfg:
        mask = read_mask(Path(base_dir) / cfg["mask_file"])
    return CostSpec(
        kind,
        dim,
        dim,
        scale=float(cfg.get("cost_scale", 1.0)),
        radius=float(cfg.get("radius", 1.0)),
        alpha=float(cfg.get("alpha", 1.0)),
        lam=float(cfg.get("lam", 0.5)),
        mask=tuple(mask) if mask is not None else None,
    )
