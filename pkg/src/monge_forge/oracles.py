"""Exact and closed-form transport solvers used as ground truth.

* :func:`discrete_ot_exact` - equal-weight empirical OT as an assignment problem.
* :func:`sinkhorn` - log-domain entropic OT.
* :func:`monotone_map_1d` - sorted matching on the line.
* :func:`gaussian_w2` - quadratic-cost map between Gaussians.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .costs import CostSpec, cost_matrix

MAX_EXACT_SIZE = 512
EIG_FLOOR = 1e-12


@dataclass
class DiscreteCoupling:
    """Coupling between two equal-size uniform empirical measures."""

    n: int
    plan: np.ndarray
    cost: float
    assignment: np.ndarray | None = None
    iterations: int = 0
    marginal_error: float = 0.0
    entropic_slack: float = 0.0

    def to_csv(self, path: str | Path) -> None:
        """First line is a ``#``-prefixed JSON header, then ``i,j,mass`` rows."""
        header = {"n": self.n, "cost": self.cost, "iterations": self.iterations,
                  "marginal_error": self.marginal_error, "entropic_slack": self.entropic_slack}
        rows = np.argwhere(self.plan > 0)
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(header) + "\n")
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "mass"])
            for i, j in rows:
                writer.writerow([int(i), int(j), repr(float(self.plan[i, j]))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DiscreteCoupling":
        with open(path, newline="") as fh:
            first = fh.readline()
            if not first.startswith("#"):
                raise ValueError(f"{path}: missing JSON header line")
            header = json.loads(first[1:])
            reader = csv.DictReader(fh)
            plan = np.zeros((header["n"], header["n"]))
            for row in reader:
                plan[int(row["i"]), int(row["j"])] = float(row["mass"])
        assignment = None
        if np.all(np.count_nonzero(plan, axis=1) == 1):
            assignment = np.argmax(plan, axis=1)
        return cls(header["n"], plan, header["cost"], assignment, header["iterations"],
                   header["marginal_error"], header["entropic_slack"])


def _square_problem(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) != len(Y) or len(X) == 0:
        raise ValueError(f"need equal, nonempty sample counts (got {len(X)} and {len(Y)})")
    return X, Y


def assignment_from_matrix(C: np.ndarray) -> DiscreteCoupling:
    """Optimal coupling for a square cost matrix with uniform marginals."""
    C = np.asarray(C, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    plan = np.zeros((n, n))
    plan[rows, cols] = 1.0 / n
    return DiscreteCoupling(n, plan, float(C[rows, cols].mean()), cols)


def discrete_ot_exact(X, Y, cost: CostSpec, labels=None) -> DiscreteCoupling:
    """Exact OT between the uniform empirical measures on X and Y (n <= 512).

    With equal weights the optimal coupling is a scaled permutation, so the
    problem is a linear assignment.
    """
    X, Y = _square_problem(X, Y)
    if len(X) > MAX_EXACT_SIZE:
        raise ValueError(f"exact solver is capped at n={MAX_EXACT_SIZE}")
    return assignment_from_matrix(cost_matrix(cost, X, Y, labels))


def _lse_rows(M):
    top = M.max(axis=1)
    return top + np.log(np.exp(M - top[:, None]).sum(axis=1))


def sinkhorn(X, Y, cost: CostSpec, epsilon: float, iters: int = 10_000, tol: float = 1e-6,
             labels=None) -> DiscreteCoupling:
    """Entropic OT via log-domain Sinkhorn iterations.

    The regularisation is annealed geometrically from the cost scale down to
    ``epsilon`` with warm-started potentials, then iterated at ``epsilon``
    until every row and column sum is within ``tol`` of 1/n or ``iters``
    sweeps have run.  ``cost`` of the result is the transport part <P, C>.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    X, Y = _square_problem(X, Y)
    C = cost_matrix(cost, X, Y, labels)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n = len(C)
    log_w = -np.log(n)
    f = np.zeros(n)
    g = np.zeros(n)
    schedule = []
    eps = max(float(np.ptp(C)), epsilon)
    while eps > epsilon:
        schedule.append(eps)
        eps *= 0.5
    it = 0
    for eps in schedule:
        for _ in range(10):
            f = eps * (log_w - _lse_rows((g[None, :] - C) / eps))
            g = eps * (log_w - _lse_rows((f[:, None] - C).T / eps))
    for it in range(1, iters + 1):
        f = epsilon * (log_w - _lse_rows((g[None, :] - C) / epsilon))
        g = epsilon * (log_w - _lse_rows((f[:, None] - C).T / epsilon))
        # column sums are exact after the g update; rows carry the error
        if it % 10 == 0:
            row_mass = np.exp(_lse_rows((f[:, None] + g[None, :] - C) / epsilon))
            if np.max(np.abs(row_mass - 1.0 / n)) <= tol:
                break
    plan = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    err = max(np.max(np.abs(plan.sum(axis=1) - 1.0 / n)), np.max(np.abs(plan.sum(axis=0) - 1.0 / n)))
    return DiscreteCoupling(n, plan, float(np.sum(plan * C)), None, it, float(err),
                            float(n * epsilon * np.log(n)))


@dataclass
class MonotoneMap:
    """Piecewise-linear interpolation between matched order statistics."""

    knots_x: np.ndarray
    knots_y: np.ndarray
    cost: float

    def __call__(self, x):
        return np.interp(x, self.knots_x, self.knots_y)


def monotone_map_1d(X_sorted, Y_sorted, h: Callable[[np.ndarray], np.ndarray] | None = None) -> MonotoneMap:
    """Match the i-th order statistic of X to the i-th of Y.

    ``h`` is the convex profile of a cost ``h(|x - y|)``; squared distance by
    default.  Optimal whenever ``h`` is convex.
    """
    x = np.asarray(X_sorted, dtype=np.float64).ravel()
    y = np.asarray(Y_sorted, dtype=np.float64).ravel()
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("need equal, nonempty sample counts")
    if np.any(np.diff(x) < 0) or np.any(np.diff(y) < 0):
        raise ValueError("inputs must be sorted ascending")
    h = h or np.square
    return MonotoneMap(x, y, float(np.mean(h(np.abs(x - y)))))


def sorted_stable(values) -> np.ndarray:
    """Ascending sort, ties kept in original index order."""
    values = np.asarray(values, dtype=np.float64).ravel()
    return values[np.argsort(values, kind="stable")]


@dataclass
class GaussianOtSolution:
    A: np.ndarray
    b: np.ndarray
    w2_squared: float
    mean_a: np.ndarray

    def __call__(self, x):
        return self.b + (np.asarray(x, dtype=np.float64) - self.mean_a) @ self.A.T


def _sym_eig(cov, name):
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric matrix")
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() <= 0:
        raise ValueError(f"{name} is not positive definite")
    return w, V


def _sqrtm(w, V, power=0.5):
    return (V * np.maximum(w, EIG_FLOOR) ** power) @ V.T


def gaussian_w2(mean_a, cov_a, mean_b, cov_b) -> GaussianOtSolution:
    """Closed-form quadratic-cost OT map x -> mean_b + A (x - mean_a)."""
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=np.float64))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=np.float64))
    wa, Va = _sym_eig(cov_a, "cov_a")
    wb, Vb = _sym_eig(cov_b, "cov_b")
    cov_a = (Va * wa) @ Va.T
    cov_b = (Vb * wb) @ Vb.T
    sa = _sqrtm(wa, Va)
    sa_inv = _sqrtm(wa, Va, -0.5)
    wm, Vm = np.linalg.eigh(sa @ cov_b @ sa)
    middle = _sqrtm(wm, Vm)
    A = sa_inv @ middle @ sa_inv
    A = 0.5 * (A + A.T)
    w2 = float(np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a + cov_b - 2 * middle))
    return GaussianOtSolution(A, mean_b, max(w2, 0.0), mean_a)
