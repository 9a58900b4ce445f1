import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monge_forge import nn
from monge_forge.costs import CostSpec, cost_matrix, quadratic
from monge_forge.duality import (CTransformConfig, DualityReport, FunctionPotential, NegativeGapError, c_transform,
                                 c_transform_minus, dual_value, duality_report, error_bound, gap_e1, gap_e2)
from monge_forge.oracles import discrete_ot_exact
from monge_forge.solver import Potential


def linear_potential(w):
    w = np.asarray(w, dtype=np.float64)
    return FunctionPotential(lambda Y: Y @ w, lambda Y: np.broadcast_to(w, Y.shape).copy())


class ShiftMap:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=np.float64)

    def pad(self, X):
        return np.asarray(X, dtype=np.float64)

    def __call__(self, X, labels=None):
        return np.asarray(X, dtype=np.float64) + self.v


def test_zero_potential_transform_is_zero():
    # sup_y -|x - y|^2 = 0, attained at y = x
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 2))
    zero = FunctionPotential(lambda Y: np.zeros(len(Y)), lambda Y: np.zeros_like(Y))
    ct = c_transform(zero, quadratic(2), X, CTransformConfig(ascent_steps=200), rng.normal(size=(30, 2)))
    assert np.allclose(ct.values, 0, atol=1e-8)
    assert np.allclose(ct.argmax, X, atol=1e-4)


def test_linear_potential_matches_closed_form_and_grid():
    # sup_y <w, y> - |x - y|^2 is attained at y = x + w / 2 with value <w, x> + |w|^2 / 4
    w = np.array([1.5])
    f = linear_potential(w)
    X = np.linspace(-2, 2, 9)[:, None]
    ct = c_transform(f, quadratic(1), X, CTransformConfig(ascent_steps=200), np.array([[0.0], [3.0]]))
    closed = X[:, 0] * w[0] + w[0] ** 2 / 4
    assert np.allclose(ct.values, closed, atol=1e-9)
    assert np.allclose(ct.argmax[:, 0], X[:, 0] + w[0] / 2, atol=1e-4)
    grid = np.linspace(-10, 10, 200001)
    brute = np.max(w[0] * grid[None, :] - (X - grid[None, :]) ** 2, axis=1)
    assert np.allclose(ct.values, brute, atol=1e-8)


def test_single_point_form():
    val, arg = c_transform_minus(linear_potential([2.0, 0.0]), quadratic(2), [1.0, 1.0],
                                 CTransformConfig(ascent_steps=200), np.zeros((1, 2)), start=[0.0, 0.0])
    assert val == pytest.approx(2.0 + 1.0, abs=1e-9)
    assert np.allclose(arg, [2.0, 1.0], atol=1e-4)


def test_zero_ascent_steps_is_best_candidate():
    rng = np.random.default_rng(2)
    X, cand = rng.normal(size=(6, 2)), rng.normal(size=(9, 2))
    f = linear_potential([0.3, -0.7])
    ct = c_transform(f, quadratic(2), X, CTransformConfig(ascent_steps=0), cand)
    scores = f(cand)[None, :] - cost_matrix(quadratic(2), X, cand)
    assert np.array_equal(ct.values, scores.max(axis=1))


def test_gap_e1_is_squared_offset_from_best_response():
    # best response to <w, y> is x + w / 2; shifting by v costs exactly |v|^2
    w, v = np.array([1.0, -0.5]), np.array([0.3, 0.4])
    f = linear_potential(w)
    X = np.random.default_rng(3).normal(size=(50, 2))
    cfg = CTransformConfig(ascent_steps=200)
    e1 = gap_e1(ShiftMap(w / 2 + v), f, quadratic(2), X, cfg, X)
    assert e1 == pytest.approx(np.sum(v**2), rel=1e-6)
    assert gap_e1(ShiftMap(w / 2), f, quadratic(2), X, cfg, X) == pytest.approx(0, abs=1e-10)


def test_gap_e2_vanishes_for_optimal_potential_of_a_shift():
    # Y = X + m: f(y) = 2 <m, y> is an optimal potential, dual value |m|^2 = OT cost
    m = np.array([1.0, 2.0])
    X = np.random.default_rng(4).normal(size=(40, 2))
    Y = X + m
    f = linear_potential(2 * m)
    oracle = discrete_ot_exact(X, Y, quadratic(2)).cost
    assert oracle == pytest.approx(5.0)
    cfg = CTransformConfig(ascent_steps=200)
    assert dual_value(f, quadratic(2), X, Y, cfg) == pytest.approx(5.0, abs=1e-8)
    assert gap_e2(f, quadratic(2), X, Y, oracle, cfg) == pytest.approx(0, abs=1e-8)


def random_potential(seed, dim, act="tanh"):
    spec = nn.NetworkSpec(dim, 1, (6, 6), act)
    return Potential(spec, nn.init_params(spec, seed) * 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["quadratic", "sphere_linearized"]))
def test_weak_duality_and_nonnegative_gaps(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "quadratic":
        cost = quadratic(2)
        X, Y = rng.normal(size=(24, 2)), rng.normal(size=(24, 2)) + 1
    else:
        cost = CostSpec(kind, 2, 2)
        X = np.stack([rng.uniform(0, 2 * np.pi, 24), rng.uniform(0, 1, 24)], -1)
        Y = np.stack([rng.uniform(0, 2 * np.pi, 24), rng.uniform(2, np.pi, 24)], -1)
    f = random_potential(seed % 1000, 2)
    cfg = CTransformConfig(ascent_steps=20)
    oracle = discrete_ot_exact(X, Y, cost).cost
    assert dual_value(f, cost, X, Y, cfg) <= oracle + 1e-9
    rep = duality_report(ShiftMap([0.1, 0.0]), f, cost, X, Y, cfg)
    assert rep.e1 >= -1e-12 and rep.e2 >= -1e-12
    assert rep.bound == pytest.approx(np.sqrt(2 * (rep.e1 + rep.e2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 30))
def test_transform_dominates_every_seen_candidate(seed, steps):
    rng = np.random.default_rng(seed)
    X, cand, starts = rng.normal(size=(10, 2)), rng.normal(size=(15, 2)), rng.normal(size=(10, 2))
    f = random_potential(seed % 1000, 2, "prelu")
    ct = c_transform(f, quadratic(2), X, CTransformConfig(ascent_steps=steps), cand, starts)
    seen = f(cand)[None, :] - cost_matrix(quadratic(2), X, cand)
    assert np.all(ct.values[:, None] >= seen - 1e-12)
    assert np.all(ct.values >= f(starts) - np.sum((X - starts) ** 2, axis=1) - 1e-12)
    # the reported value is attained at the reported argmax
    assert np.allclose(ct.values, f(ct.argmax) - np.sum((X - ct.argmax) ** 2, axis=1), atol=1e-12)


def test_multimodal_flag_on_symmetric_double_well():
    # f(y) = 4 (1 - (y^2 - 1)^2) with a tiny cost: equal maxima at y = +-1 for x = 0,
    # while at x = 3 the far well loses by 0.012, above the tolerance
    f = FunctionPotential(lambda Y: 4 * (1 - (Y[:, 0] ** 2 - 1) ** 2), lambda Y: -16 * (Y**2 - 1) * Y)
    cost = quadratic(1, 1e-3)
    cand = np.array([[-1.1], [1.1], [0.2]])
    cfg = CTransformConfig(ascent_steps=200, restarts=2, init="target_samples")
    ct = c_transform(f, cost, np.array([[0.0], [3.0]]), cfg, cand)
    assert ct.multimodal.tolist() == [True, False]
    assert ct.multimodal_fraction == 0.5


def test_error_bound_and_negative_gaps():
    assert error_bound(0.5, 0.0) == 1.0
    assert error_bound(0.0, 0.0) == 0.0
    with pytest.raises(NegativeGapError, match="e1=-0.5"):
        error_bound(-0.5, 0.1)


def test_report_json_and_assumption_flag():
    rng = np.random.default_rng(5)
    X = np.stack([rng.uniform(0, 6, 8), rng.uniform(0.2, 1, 8)], -1)
    Y = np.stack([rng.uniform(0, 6, 8), rng.uniform(2, 3, 8)], -1)
    f = random_potential(1, 2)
    rep = duality_report(ShiftMap([0.0, 1.5]), f, CostSpec("sphere_geodesic", 2, 2), X, Y,
                         CTransformConfig(ascent_steps=5))
    assert rep.assumption_unmet and rep.n_samples == 8
    back = DualityReport.from_json(rep.to_json())
    assert back == rep
    assert set(json.loads(rep.to_json())) >= {"e1", "e2", "bound", "oracle_cost"}
    assert not duality_report(ShiftMap([0, 0]), f, quadratic(2), X, Y).assumption_unmet


def test_config_validation():
    with pytest.raises(ValueError):
        CTransformConfig(restarts=0)
    with pytest.raises(ValueError):
        CTransformConfig(init="random")
    with pytest.raises(ValueError):
        c_transform(linear_potential([1.0]), quadratic(1), np.zeros((2, 1)), CTransformConfig(), np.zeros((0, 1)))
