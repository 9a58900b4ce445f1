"""Acceptance criteria, each at its stated tolerance.

Every check logs one ``PASS`` / ``FAIL`` line, collected in the terminal
summary.  Training runs use the shipped experiment defaults and are shared
between criteria that read the same run.
"""

import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from monge_forge import experiments as ex
from monge_forge.costs import cost_matrix, quadratic
from monge_forge.oracles import discrete_ot_exact, gaussian_w2, sinkhorn

pytestmark = pytest.mark.slow
ROOT = Path(__file__).resolve().parents[1]


def check(log, label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    log.append(line)
    print(line)
    assert ok, line


def run(name, out, **overrides):
    cfg = ex.ExperimentConfig(name, {"figures": False, **overrides})
    return ex.run_experiment(cfg, out)


def wall(report):
    return report["timing"]["wall_time_s"]


@pytest.fixture(scope="module")
def gaussian(tmp_path_factory):
    # checkpoints feed the bound-tracking criterion; the rest reads the final map
    return run("gaussian2d", tmp_path_factory.mktemp("gaussian"), n_test=2000,
               checkpoints=[25, 50, 100, 200, 400, 1000, 2000])


@pytest.fixture(scope="module")
def line(tmp_path_factory):
    return run("line1d", tmp_path_factory.mktemp("line"))


def test_c1_delta_to_gaussian_lagrangian(tmp_path, acceptance_log):
    rep = run("delta_to_gaussian", tmp_path, duality=False)
    L = rep["metrics"]["converged_lagrangian"]
    check(acceptance_log, "C1 delta0 -> N(0,1) converged Lagrangian in [0.9, 1.1], <= 120 s",
          0.9 <= L <= 1.1 and wall(rep) <= 120, f"L={L:.4f}, {wall(rep):.0f} s")


def test_c2_gaussian_map_and_cost(gaussian, acceptance_log):
    m = gaussian["metrics"]
    w2, w2sq = m["closed_form_w2"], m["closed_form_w2_squared"]
    map_rel = m["map_mean_error"] / w2
    cost_rel = abs(m["learned_cost"] - w2sq) / w2sq
    check(acceptance_log, "C2 Gaussian map error <= 5% of w2 and cost within 5% of w2^2, <= 600 s",
          map_rel <= 0.05 and cost_rel <= 0.05 and wall(gaussian) <= 600,
          f"mean map error {map_rel:.2%} of w2 (rms {m['map_l2_error'] / w2:.2%}), cost {m['learned_cost']:.4f} "
          f"vs {w2sq:.4f} ({cost_rel:.2%}), {wall(gaussian):.0f} s")


def test_c3_line_monotone_map(line, acceptance_log):
    m = line["metrics"]
    check(acceptance_log, "C3 1D max grid error <= 0.05 and cost in [0.95, 1.05], <= 120 s",
          m["max_grid_error"] <= 0.05 and 0.95 <= m["learned_cost"] <= 1.05 and wall(line) <= 120,
          f"max error {m['max_grid_error']:.4f}, cost {m['learned_cost']:.4f}, {wall(line):.0f} s")


@pytest.fixture(scope="module")
def sphere(tmp_path_factory):
    return run("sphere_cap", tmp_path_factory.mktemp("sphere"), duality=False)


def test_c4a_sphere_ring_pi8(sphere, acceptance_log):
    m = sphere["metrics"]
    err = m["ring_pi8_mean_phi_error"]
    check(acceptance_log, "C4a ring phi=pi/8 maps within 0.1 rad of 7pi/8, <= 900 s",
          err <= 0.1 and wall(sphere) <= 900,
          f"mean phi {m['ring_pi8_mean_phi']:.4f} (error {err:.4f}), {wall(sphere):.0f} s")


@pytest.mark.xfail(strict=True, reason=(
    "the exact discrete optimum for this cost sends the phi=pi/4 ring to phi ~ 2.42 (near 3pi/4), "
    "0.72 rad from the south pole; a map that solves the stated problem cannot meet the 0.15 rad bound"))
def test_c4b_sphere_ring_pi4(sphere, acceptance_log):
    m = sphere["metrics"]
    err = m["ring_pi4_mean_phi_error"]
    check(acceptance_log, "C4b ring phi=pi/4 maps within 0.15 rad of pi (expected failure, see ledger)",
          err <= 0.15, f"mean phi {m['ring_pi4_mean_phi']:.4f} (error {err:.4f})")


def test_c5_lagrangian_matches_exact_ot(gaussian, line, acceptance_log):
    rows = []
    ok = True
    for name, rep in (("gaussian2d", gaussian), ("line1d", line)):
        m = rep["metrics"]
        rel = abs(m["paired_lagrangian"] - m["oracle_cost"]) / m["oracle_cost"]
        ok &= rel <= 0.05
        rows.append(f"{name} L={m['paired_lagrangian']:.4f} vs OT={m['oracle_cost']:.4f} ({rel:.2%})")
    check(acceptance_log, "C5 Lagrangian within 5% of exact OT on 512 held-out pairs", ok, "; ".join(rows))


def test_c6_bound_tracks_map_error(gaussian, acceptance_log):
    m = gaussian["metrics"]
    recs = m["checkpoints"]
    e_min = min(min(r["e1"], r["e2"]) for r in recs)
    rho = m["bound_error_spearman"]
    check(acceptance_log, "C6 Spearman(bound, map error) >= 0.8 over >= 5 checkpoints, gaps >= -1e-6",
          len(recs) >= 5 and rho >= 0.8 and e_min >= -1e-6,
          f"{len(recs)} checkpoints, rho={rho:.3f}, min gap {e_min:.2e}")


def test_c7_oracle_self_consistency(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cost = quadratic(2)
    exact_ok = 0
    for _ in range(50):
        n = int(rng.integers(1, 8))
        X, Y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        C = cost_matrix(cost, X, Y)
        brute = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n
        exact_ok += discrete_ot_exact(X, Y, cost).cost == pytest.approx(brute, rel=1e-12, abs=1e-15)
    worst = 0.0
    for _ in range(50):
        X = rng.uniform(size=(64, 2))
        Y = rng.uniform(size=(64, 2)) + [1.0, 0.5]
        e = discrete_ot_exact(X, Y, cost).cost
        worst = max(worst, abs(sinkhorn(X, Y, cost, 0.01).cost - e) / e)
    frob = 0.0
    for _ in range(50):
        Ma, Mb = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        ca, cb = Ma @ Ma.T + 0.1 * np.eye(3), Mb @ Mb.T + 0.1 * np.eye(3)
        A = gaussian_w2(np.zeros(3), ca, np.zeros(3), cb).A
        frob = max(frob, np.linalg.norm(A @ ca @ A - cb) / np.linalg.norm(cb))
    dt = time.perf_counter() - t0
    check(acceptance_log, "C7 assignment = permutation min (50), Sinkhorn within 5% (50), A cov_a A = cov_b, <= 60 s",
          exact_ok == 50 and worst <= 0.05 and frob <= 1e-8 and dt <= 60,
          f"{exact_ok}/50 exact, worst Sinkhorn gap {worst:.2%}, Frobenius rel {frob:.1e}, {dt:.0f} s")


def test_c8_unequal_dimensions(tmp_path, acceptance_log):
    rep = run("unequal_dim_ellipse", tmp_path, duality=False)
    m = rep["metrics"]
    check(acceptance_log, "C8 ellipse curve distance <= 5% of semi-major axis, both gap sides covered, <= 300 s",
          m["curve_distance_rel"] <= 0.05 and m["covers_both_gap_sides"] and wall(rep) <= 300,
          f"distance {m['curve_distance_rel']:.2%}, arc [{m['arc_min']:.3f}, {m['arc_max']:.3f}], "
          f"coverage {m['arc_coverage']:.2f}, {wall(rep):.0f} s")


def test_c9_class_preservation(tmp_path, acceptance_log):
    rep = run("class_mixture", tmp_path)
    acc = rep["metrics"]["class_accuracy"]
    check(acceptance_log, "C9 class accuracy >= 95%, <= 300 s", acc >= 0.95 and wall(rep) <= 300,
          f"accuracy {acc:.2%}, {wall(rep):.0f} s")


def test_c10_population_transport(tmp_path, acceptance_log):
    rep = run("population", tmp_path)
    m = rep["metrics"]
    check(acceptance_log, "C10 all tau outputs on land, geodesic cost <= random anchors, <= 1800 s",
          m["land_fraction_tau"] == 1.0 and m["geodesic_cost_tau"] <= m["geodesic_cost_random_anchor"]
          and wall(rep) <= 1800,
          f"land {m['land_fraction_tau']:.0%} (raw {m['land_fraction_raw']:.1%}), cost {m['geodesic_cost_tau']:.1f} "
          f"vs {m['geodesic_cost_random_anchor']:.1f}, {wall(rep):.0f} s")


INVARIANTS = [
    "tests/test_nn.py::test_backward_matches_finite_differences",
    "tests/test_nn.py::test_piecewise_linear_gradients_away_from_kinks",
    "tests/test_costs.py::test_gradient_matches_finite_differences",
    "tests/test_costs.py::test_symmetric_costs",
    "tests/test_costs.py::test_bounds",
    "tests/test_duality.py::test_transform_dominates_every_seen_candidate",
    "tests/test_duality.py::test_weak_duality_and_nonnegative_gaps",
    "tests/test_geo.py::test_tau_is_idempotent",
]


def test_c11_invariant_suites(acceptance_log):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *INVARIANTS],
                          cwd=ROOT, capture_output=True, text=True)
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    check(acceptance_log, "C11 invariant suites pass, <= 180 s", proc.returncode == 0 and dt <= 180,
          f"{tail}, {dt:.0f} s")
