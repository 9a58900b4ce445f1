import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monge_forge.costs import (CostDomainError, CostSpec, cost_from_config, cost_grads_y, cost_matrix,
                               cost_values, eval_cost, grad_y, quadratic, read_mask)

PI = np.pi


def fd_grad(cost, x, y, labels=None, h=1e-6):
    g = np.zeros_like(y)
    for i in range(len(y)):
        e = np.zeros_like(y)
        e[i] = h
        g[i] = (eval_cost(cost, x, y + e, labels) - eval_cost(cost, x, y - e, labels)) / (2 * h)
    return g


def test_value_examples():
    assert eval_cost(quadratic(2), [1, 2], [1, 2]) == 0
    assert eval_cost(CostSpec("neg_cosine", 3, 3), [1, 2, 3], [1, 2, 3]) == pytest.approx(-1)
    assert eval_cost(CostSpec("sphere_geodesic", 2, 2), [0, 0], [0, PI]) == pytest.approx(PI, abs=1e-4)
    assert eval_cost(CostSpec("sphere_linearized", 2, 2), [1.0, 0.7], [1.0, 0.7]) == pytest.approx(PI / 2 - 1)
    assert eval_cost(CostSpec("inverse_square", 2, 2), [0, 0], [2, 0]) == pytest.approx(0.25)
    masked = CostSpec("masked_mse", 2, 2, mask=(1, 1), alpha=1)
    assert eval_cost(masked, [0, 0], [2, 0]) == pytest.approx(2)
    cc = CostSpec("class_contrastive", 2, 2, lam=0.5)
    assert eval_cost(cc, [1, 1], [1, 1], (0, 1)) == pytest.approx(0.5)
    assert eval_cost(cc, [1, 1], [1, 1], (1, 1)) == 0


def test_quadratic_scale():
    assert eval_cost(quadratic(1, 0.5), [0], [2]) == pytest.approx(2.0)


def test_gradient_examples():
    assert grad_y(quadratic(2), [1, 0], [0, 0]).tolist() == [-2, 0]
    x = np.array([0.6, 0.8])
    assert np.allclose(grad_y(CostSpec("neg_cosine", 2, 2), x, x), 0, atol=1e-15)
    masked = CostSpec("masked_mse", 3, 3, mask=(1, 0, 1))
    g = grad_y(masked, [0, 0, 0], [1, 2, 3])
    assert g[1] == 0 and g[0] != 0


def test_domain_errors_carry_codes():
    cases = [
        (quadratic(2), [1, 2], [1, 2, 3], None, "dim_mismatch"),
        (CostSpec("neg_cosine", 2, 2), [0, 0], [1, 1], None, "zero_norm"),
        (CostSpec("inverse_square", 2, 2), [1, 1], [1, 1], None, "coincident"),
        (CostSpec("sphere_geodesic", 2, 2), [0, 4.0], [0, 1], None, "sphere_domain"),
        (CostSpec("sphere_linearized", 2, 2), [7.0, 1.0], [0, 1], None, "sphere_domain"),
        (CostSpec("class_contrastive", 2, 2), [0, 0], [1, 1], None, "missing_labels"),
    ]
    for cost, x, y, labels, code in cases:
        with pytest.raises(CostDomainError) as info:
            eval_cost(cost, x, y, labels)
        assert info.value.code == code


def test_geodesic_gradient_refused_near_coincidence_and_antipode():
    geo = CostSpec("sphere_geodesic", 2, 2)
    for y in ([0.3, 1.0], [0.3 + PI, PI - 1.0]):
        with pytest.raises(CostDomainError) as info:
            grad_y(geo, [0.3, 1.0], y)
        assert info.value.code == "near_antipodal"
    # values are still defined there thanks to the clamp
    assert np.isfinite(eval_cost(geo, [0.3, 1.0], [0.3, 1.0]))


def test_spec_validation():
    with pytest.raises(ValueError):
        CostSpec("masked_mse", 2, 2, mask=(1, 0, 1))
    with pytest.raises(ValueError):
        CostSpec("masked_mse", 2, 2, mask=(1, 2))
    with pytest.raises(ValueError):
        CostSpec("sphere_geodesic", 2, 2, radius=0)
    with pytest.raises(ValueError):
        CostSpec("neg_cosine", 2, 3)
    with pytest.raises(ValueError):
        CostSpec("sphere_linearized", 3, 3)
    with pytest.raises(ValueError):
        CostSpec("nope", 1, 1)


def _point(kind, rng):
    if kind.startswith("sphere"):
        return np.array([rng.uniform(0, 2 * PI), rng.uniform(0.05, PI - 0.05)])
    return rng.normal(size=3)


KINDS = ["quadratic", "inverse_square", "neg_cosine", "sphere_geodesic", "sphere_linearized", "masked_mse",
         "class_contrastive"]


def _spec(kind):
    if kind.startswith("sphere"):
        return CostSpec(kind, 2, 2, radius=1.7)
    if kind == "masked_mse":
        return CostSpec(kind, 3, 3, mask=(1, 0, 1), alpha=3.0)
    return CostSpec(kind, 3, 3, scale=1.3, lam=0.5)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    cost = _spec(kind)
    x, y = _point(kind, rng), _point(kind, rng)
    labels = (0, 1) if kind == "class_contrastive" else None
    if kind == "sphere_geodesic":
        ip = np.cos(cost_values(cost, x, y) / cost.radius)
        if abs(ip) > 0.999:
            return  # next to the refused set
    if kind == "inverse_square" and np.sum((x - y) ** 2) < 0.05:
        return
    g = grad_y(cost, x, y, labels)
    num = fd_grad(cost, x, y, labels)
    assert np.allclose(g, num, rtol=1e-6, atol=1e-6 * max(1.0, np.max(np.abs(num))))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["quadratic", "inverse_square", "sphere_geodesic", "sphere_linearized"]),
       st.integers(0, 2**32 - 1))
def test_symmetric_costs(kind, seed):
    rng = np.random.default_rng(seed)
    cost = _spec(kind)
    x, y = _point(kind, rng), _point(kind, rng)
    assert eval_cost(cost, x, y) == pytest.approx(eval_cost(cost, y, x), rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounds(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    S1 = np.stack([rng.uniform(0, 2 * PI, 50), rng.uniform(0, PI, 50)], -1)
    S2 = np.stack([rng.uniform(0, 2 * PI, 50), rng.uniform(0, PI, 50)], -1)
    nc = cost_values(CostSpec("neg_cosine", 3, 3), X, Y)
    assert np.all((nc >= -1 - 1e-12) & (nc <= 1 + 1e-12))
    geo = cost_values(CostSpec("sphere_geodesic", 2, 2, radius=2.0), S1, S2)
    assert np.all((geo >= 0) & (geo <= 2 * PI))
    lin = cost_values(CostSpec("sphere_linearized", 2, 2), S1, S2)
    assert np.all((lin >= PI / 2 - 1 - 1e-12) & (lin <= PI / 2 + 1 + 1e-12))
    for kind in ("quadratic", "inverse_square", "masked_mse", "class_contrastive"):
        c = cost_values(_spec(kind), X, Y, (np.zeros(50, int), np.ones(50, int)))
        assert np.all(c >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_linearized_and_geodesic_pick_same_nearest_candidate(seed):
    rng = np.random.default_rng(seed)
    x = np.array([rng.uniform(0, 2 * PI), rng.uniform(0, PI)])
    cands = np.stack([rng.uniform(0, 2 * PI, 40), rng.uniform(0, PI, 40)], -1)
    geo = cost_values(CostSpec("sphere_geodesic", 2, 2), x, cands)
    lin = cost_values(CostSpec("sphere_linearized", 2, 2), x, cands)
    assert np.argmin(geo) == np.argmin(lin)
    order = np.argsort(geo)
    assert np.all(np.diff(lin[order]) >= -1e-12)


def test_cost_matrix_matches_pairwise_loop():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    for cost in (quadratic(2), CostSpec("neg_cosine", 2, 2), CostSpec("inverse_square", 2, 2)):
        C = cost_matrix(cost, X, Y)
        loop = np.array([[eval_cost(cost, x, y) for y in Y] for x in X])
        assert np.allclose(C, loop, rtol=1e-14)


def test_class_labels_integer_and_probability():
    cc = CostSpec("class_contrastive", 2, 2, lam=0.5)
    X = np.zeros((3, 2))
    ints = cost_values(cc, X, X, (np.array([0, 1, 1]), np.array([0, 0, 1])))
    assert ints.tolist() == [0, 0.5, 0]
    probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]])
    assert cost_values(cc, X, X, (np.array([0, 1, 1]), probs)).tolist() == [0, 0.5, 0]
    # the label term contributes no gradient
    assert np.array_equal(cost_grads_y(cc, X, X + 1, (np.array([0, 1, 1]), probs)), 2 * np.ones((3, 2)))
    C = cost_matrix(cc, X, X, (np.array([0, 1, 1]), np.array([0, 0, 1])))
    assert C[1, 0] == 0.5 and C[1, 2] == 0


def test_non_strict_sphere_accepts_unwrapped_angles():
    lin = CostSpec("sphere_linearized", 2, 2)
    x = np.array([[0.5, 1.0]])
    y = np.array([[0.5 + 2 * PI, -1.0]])
    with pytest.raises(CostDomainError):
        cost_values(lin, x, y)
    # (theta, -phi) is the point (theta + pi, phi)
    assert cost_values(lin, x, y, strict=False)[0] == pytest.approx(
        cost_values(lin, x, np.array([[0.5 + PI, 1.0]]))[0])


def test_mask_file_and_config(tmp_path):
    p = tmp_path / "mask.csv"
    p.write_text("1,0\n0,1\n")
    assert read_mask(p) == (1.0, 0.0, 0.0, 1.0)
    cost = cost_from_config({"cost": "masked_mse", "mask_file": "mask.csv", "alpha": 10000}, 4, tmp_path)
    assert cost.mask == (1.0, 0.0, 0.0, 1.0) and cost.alpha == 10000
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n")
    with pytest.raises(ValueError, match="bad.csv:1"):
        read_mask(bad)


def test_hessian_flag():
    assert quadratic(2).hessian_y_independent_of_x
    assert not CostSpec("sphere_geodesic", 2, 2).hessian_y_independent_of_x
    assert not CostSpec("neg_cosine", 2, 2).hessian_y_independent_of_x
