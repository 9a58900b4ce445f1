"""Duality gaps that certify a trained (map, potential) pair.

For a potential f, the c-transform ``f_c(x) = sup_y f(y) - c(x, y)`` is the
value of the inner minimisation over maps, so

* ``e1 = mean_x [ f_c(x) - (f(T(x)) - c(x, T(x))) ]`` measures how far T is
  from the best response to f;
* ``e2 = OT(X, Y) - (mean f(Y) - mean f_c(X))`` measures how far f is from
  an optimal dual potential, with the exact discrete OT cost standing in
  for the primal optimum.

``sqrt(2 (e1 + e2))`` bounds the (unweighted) L2 distance between T and the
true map when the cost and potential are regular enough.

The supremum is approximated from below: every candidate target sample is
scored exactly, then gradient ascent refines the best few starting points.
Because candidates and the starting point T(x) are always included, the
estimate dominates ``f(y) - c(x, y)`` for every y it has seen.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .costs import CostSpec, cost_grads_y, cost_matrix, cost_values
from .oracles import discrete_ot_exact

INIT_MODES = ("pushforward", "target_samples")


class NegativeGapError(ValueError):
    pass


@dataclass(frozen=True)
class CTransformConfig:
    ascent_steps: int = 100
    ascent_lr: float = 0.05
    restarts: int = 2
    init: str = "pushforward"
    multimodal_tol: float = 1e-3
    multimodal_separation: float = 0.1

    def __post_init__(self):
        if self.ascent_steps < 0 or self.restarts < 1 or self.ascent_lr <= 0:
            raise ValueError("ascent_steps >= 0, restarts >= 1 and ascent_lr > 0 required")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")


class FunctionPotential:
    """Wrap analytic callables ``value(Y) -> (N,)`` and ``grad(Y) -> (N, m)``."""

    def __init__(self, value: Callable, grad: Callable):
        self._value = value
        self._grad = grad

    def __call__(self, Y, labels=None):
        return np.asarray(self._value(np.asarray(Y, dtype=np.float64)), dtype=np.float64)

    def value_and_grad(self, Y, labels=None):
        Y = np.asarray(Y, dtype=np.float64)
        return self(Y), np.asarray(self._grad(Y), dtype=np.float64)


@dataclass
class CTransform:
    values: np.ndarray  # (N,)
    argmax: np.ndarray  # (N, m)
    multimodal: np.ndarray  # (N,) bool

    @property
    def multimodal_fraction(self) -> float:
        return float(np.mean(self.multimodal))


def c_transform(f, cost: CostSpec, X, cfg: CTransformConfig, candidates, starts=None) -> CTransform:
    """Batched lower estimate of ``sup_y f(y) - c(x, y)`` for every row of X.

    ``X`` is given in cost space (already padded).  ``starts`` optionally
    supplies one initial point per x, normally T(x).
    """
    X = np.asarray(X, dtype=np.float64)
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim != 2 or len(cand) == 0:
        raise ValueError("candidates must be a nonempty (K, m) array")
    N = len(X)
    scores = f(cand)[None, :] - cost_matrix(cost, X, cand, strict=False)
    best_idx = np.argmax(scores, axis=1)
    values = scores[np.arange(N), best_idx]
    argmax = cand[best_idx].copy()

    n_top = cfg.restarts
    inits = []
    if cfg.init == "pushforward" and starts is not None:
        inits.append(np.asarray(starts, dtype=np.float64))
        n_top -= 1
    if n_top > 0:
        order = np.argsort(-scores, axis=1, kind="stable")[:, :n_top]
        inits.extend(cand[order[:, k]] for k in range(order.shape[1]))
    R = len(inits)
    Y = np.concatenate(inits, axis=0)  # start r of sample i lives at row r*N + i
    Xr = np.tile(X, (R, 1))

    def psi_and_grad(Yq):
        fv, fg = f.value_and_grad(Yq)
        return fv - cost_values(cost, Xr, Yq, strict=False), fg - cost_grads_y(cost, Xr, Yq, strict=False)

    psi, grad = psi_and_grad(Y)
    lr = np.full(len(Y), cfg.ascent_lr)
    for _ in range(cfg.ascent_steps):
        proposal = Y + lr[:, None] * grad
        p_psi, p_grad = psi_and_grad(proposal)
        accept = p_psi > psi
        Y = np.where(accept[:, None], proposal, Y)
        psi = np.where(accept, p_psi, psi)
        grad = np.where(accept[:, None], p_grad, grad)
        lr = np.where(accept, lr * 1.2, lr * 0.5)

    psi_r = psi.reshape(R, N)
    Y_r = Y.reshape(R, N, -1)
    r_best = np.argmax(psi_r, axis=0)
    run_best = psi_r[r_best, np.arange(N)]
    better = run_best > values
    values = np.where(better, run_best, values)
    argmax = np.where(better[:, None], Y_r[r_best, np.arange(N)], argmax)

    # several restarts ending at well-separated points of (near) equal value
    near = np.abs(psi_r - values[None, :]) <= cfg.multimodal_tol * np.maximum(1.0, np.abs(values))[None, :]
    far = np.linalg.norm(Y_r - argmax[None, :, :], axis=-1) > cfg.multimodal_separation
    multimodal = np.any(near & far, axis=0)
    return CTransform(values, argmax, multimodal)


def c_transform_minus(f, cost: CostSpec, x, cfg: CTransformConfig, candidates, start=None) -> tuple[float, np.ndarray]:
    """Single-point form: ``(value, argmax_y)`` of ``sup_y f(y) - c(x, y)``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))[None, :]
    starts = None if start is None else np.atleast_1d(np.asarray(start, dtype=np.float64))[None, :]
    ct = c_transform(f, cost, x, cfg, candidates, starts)
    return float(ct.values[0]), ct.argmax[0]


def _map_terms(T, f, cost, X):
    Xc = T.pad(X)
    TX = T(X)
    return Xc, TX, f(TX) - cost_values(cost, Xc, TX, strict=False)


def gap_e1(T, f, cost: CostSpec, X, cfg: CTransformConfig, candidates) -> float:
    """mean_x [ f_c(x) - (f(T(x)) - c(x, T(x))) ]."""
    Xc, TX, psi_T = _map_terms(T, f, cost, X)
    ct = c_transform(f, cost, Xc, cfg, candidates, TX)
    return float(np.mean(ct.values - psi_T))


def dual_value(f, cost: CostSpec, X, Y, cfg: CTransformConfig, starts=None) -> float:
    """mean f(Y) - mean f_c(X), the value of the inner minimisation for f."""
    ct = c_transform(f, cost, X, cfg, Y, starts)
    return float(np.mean(f(Y)) - np.mean(ct.values))


def gap_e2(f, cost: CostSpec, X, Y, oracle_cost: float, cfg: CTransformConfig, starts=None) -> float:
    """oracle_cost - (mean f(Y) - mean f_c(X)); X in cost space."""
    return float(oracle_cost - dual_value(f, cost, X, Y, cfg, starts))


def error_bound(e1: float, e2: float) -> float:
    total = e1 + e2
    if total < 0:
        raise NegativeGapError(f"negative gap sum: e1={e1!r}, e2={e2!r}")
    return float(np.sqrt(2.0 * total))


@dataclass
class DualityReport:
    e1: float
    e2: float
    bound: float | None
    oracle_cost: float
    dual_value: float
    n_samples: int
    multimodal_fraction: float = 0.0
    assumption_unmet: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DualityReport":
        return cls(**json.loads(text))


def duality_report(T, f, cost: CostSpec, X, Y, cfg: CTransformConfig | None = None) -> DualityReport:
    """Both gaps on held-out (X, Y) of equal size, sharing one c-transform.

    Every row of Y is a candidate, so ``dual_value <= oracle_cost`` holds
    exactly on the sample and both gaps are nonnegative up to rounding.
    """
    cfg = cfg or CTransformConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    Xc, TX, psi_T = _map_terms(T, f, cost, X)
    oracle = discrete_ot_exact(Xc, Y, cost).cost
    ct = c_transform(f, cost, Xc, cfg, Y, TX)
    e1 = float(np.mean(ct.values - psi_T))
    dual = float(np.mean(f(Y)) - np.mean(ct.values))
    e2 = float(oracle - dual)
    bound = error_bound(e1, e2) if e1 + e2 >= 0 else None
    return DualityReport(e1, e2, bound, float(oracle), dual, len(X), ct.multimodal_fraction,
                         not cost.hessian_y_independent_of_x)
