"""Config-driven experiment runner.

Each experiment bundles a source and target distribution, a cost, network
shapes and training defaults.  :func:`run_experiment` trains, evaluates on
fresh held-out samples against the available oracles, and writes

* ``report.json`` - config echo, final history row, metrics, artifact names;
* ``history.csv`` and ``source.csv`` / ``target.csv`` / ``pushforward.csv``;
* ``map.ckpt`` and PNG figures.

Everything in the report except the ``timing`` block is a pure function of
the config, so two runs of the same file give byte-identical JSON there.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from . import geo, io, nn, plotting, samplers
from .costs import CostSpec, cost_from_config, cost_values, quadratic
from .duality import CTransformConfig, duality_report
from .oracles import MAX_EXACT_SIZE, discrete_ot_exact, gaussian_w2
from .solver import (ConfigError, TrainConfig, TrainedMap, TrainHistory, TrainingDiverged,
                     config_to_dict, draw, lagrangian_batch, train)

SCHEMA_VERSION = 1
EXPERIMENTS = (
    "gaussian2d",
    "line1d",
    "delta_to_gaussian",
    "annulus_decreasing",
    "annulus_quadratic",
    "sphere_cap",
    "population",
    "unequal_dim_ellipse",
    "class_mixture",
    "toy_inpaint",
)
ORACLES = ("exact", "none")
NETWORK_KEYS = ("map_hidden", "map_activation", "map_residual", "potential_hidden",
                "potential_activation", "dropout")
COST_KEYS = ("cost", "cost_scale", "radius", "alpha", "lam", "mask", "mask_file")
EVAL_KEYS = ("n_test", "oracle", "duality", "checkpoints", "oracle_resamples", "figures", "lagrangian_samples")
RUN_KEYS = ("experiment", "output_dir", "seed")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")

H = np.pi


def _h(width, depth):
    return [width] * depth


# Network and schedule defaults.  Where an experiment has reference settings
# an "L layer" network is read as L linear layers, i.e. L - 1 hidden layers.
DEFAULTS: dict[str, dict[str, Any]] = {
    "gaussian2d": dict(
        mean_a=[0.0, 0.0], cov_a=[[1.0, 0.0], [0.0, 1.0]], mean_b=[2.0, -1.0], cov_b=[[4.0, 0.0], [0.0, 1.0]],
        cost="quadratic", map_hidden=_h(64, 3), map_activation="prelu", potential_hidden=_h(64, 3),
        potential_activation="prelu", outer_steps=2000, map_steps=5, potential_steps=1, batch_size=256,
        ema_decay=0.99, n_test=2000,
    ),
    "line1d": dict(
        low_a=0.0, high_a=1.0, low_b=1.0, high_b=2.0,
        cost="quadratic", map_hidden=_h(32, 3), map_activation="prelu", potential_hidden=_h(32, 3),
        potential_activation="prelu", outer_steps=1500, map_steps=5, potential_steps=1, batch_size=256,
        ema_decay=0.99, n_test=1000,
    ),
    "delta_to_gaussian": dict(
        tail_fraction=0.5,
        cost="quadratic", map_hidden=_h(32, 3), map_activation="prelu", potential_hidden=_h(32, 3),
        potential_activation="prelu", outer_steps=5000, map_steps=3, potential_steps=1, batch_size=256,
        eval_every=5, eval_batch_size=4096, n_test=512,
    ),
    "annulus_decreasing": dict(
        r_a=[4.0, 6.0], r_b=[1.0, 2.0],
        cost="inverse_square", map_hidden=_h(36, 5), map_activation="prelu", potential_hidden=_h(36, 5),
        potential_activation="tanh", outer_steps=2000, map_steps=8, potential_steps=6, batch_size=2000,
        n_test=512,
    ),
    "annulus_quadratic": dict(
        r_a=[4.0, 6.0], r_b=[1.0, 2.0],
        cost="quadratic", map_hidden=_h(36, 5), map_activation="prelu", potential_hidden=_h(36, 5),
        potential_activation="tanh", outer_steps=2000, map_steps=8, potential_steps=6, batch_size=2000,
        n_test=512,
    ),
    "sphere_cap": dict(
        phi_a=[0.0, H / 4], phi_b=[3 * H / 4, H], ring_points=360,
        cost="sphere_linearized", map_hidden=_h(8, 5), map_activation="prelu", potential_hidden=_h(8, 5),
        potential_activation="prelu", outer_steps=2000, map_steps=8, potential_steps=4, batch_size=200,
        lr_map=3e-4, lr_potential=3e-4, n_test=512,
    ),
    "population": dict(
        land_file=None, population_file=None, anchors=geo.DEFAULT_ANCHORS, land_threshold=None,
        cost="sphere_linearized", map_hidden=_h(32, 4), map_activation="prelu", potential_hidden=_h(32, 4),
        potential_activation="prelu", dropout=0.24, outer_steps=3334, map_steps=5, potential_steps=1,
        batch_size=200, lr_map=3e-4, lr_potential=3e-4, n_test=2000, duality=False,
    ),
    "unequal_dim_ellipse": dict(
        a=2.0, b=1.0, gap=H / 2,
        cost="quadratic", map_hidden=_h(10, 4), map_activation="prelu", potential_hidden=_h(10, 4),
        potential_activation="prelu", outer_steps=12000, map_steps=6, potential_steps=1, batch_size=100,
        pad_source=True, n_test=512,
    ),
    "class_mixture": dict(
        source_means=[[-2.0, 0.0], [2.0, 0.0]], target_means=[[3.0, 2.0], [-3.0, 2.0]], std=0.5,
        cost="class_contrastive", lam=0.5, map_hidden=_h(64, 3), map_activation="prelu",
        potential_hidden=_h(64, 3), potential_activation="prelu", outer_steps=1000, map_steps=10,
        potential_steps=1, batch_size=64, lr_map=1e-4, lr_potential=1e-4, ema_decay=0.99,
        conditional=True, n_classes=2, n_test=1000, duality=False,
    ),
    "toy_inpaint": dict(
        side=4, hole=2,
        cost="masked_mse", alpha=1.0, map_hidden=_h(64, 3), map_activation="prelu", potential_hidden=_h(64, 3),
        potential_activation="prelu", outer_steps=1000, map_steps=5, potential_steps=1, batch_size=64,
        betas=[0.9, 0.999], n_test=512,
    ),
}
COMMON = dict(seed=0, n_test=512, oracle="exact", duality=True, checkpoints=[], oracle_resamples=5,
              figures=True, map_residual=True, dropout=0.0, output_dir="runs/out", lagrangian_samples=20000)


class ExperimentError(RuntimeError):
    """Run failed; ``exit_code`` is 2 for divergence and 3 for I/O."""

    def __init__(self, message: str, exit_code: int, report: dict | None = None):
        super().__init__(message)
        self.exit_code = exit_code
        self.report = report


@dataclass
class ExperimentConfig:
    experiment: str
    values: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        merged = {**COMMON, **DEFAULTS[self.experiment]}
        unknown = set(self.values) - set(merged) - set(TRAIN_KEYS) - set(COST_KEYS) - {"experiment"}
        if unknown:
            raise ConfigError(f"unknown config keys for {self.experiment}: {sorted(unknown)}")
        merged.update({k: v for k, v in self.values.items() if k != "experiment"})
        self.values = merged
        if self.values["oracle"] not in ORACLES:
            raise ConfigError(f"oracle must be one of {ORACLES}")
        if int(self.values["n_test"]) < 2:
            raise ConfigError("n_test must be >= 2")
        if self.experiment == "population":
            for key in ("land_file", "population_file"):
                if self.values[key] is None:
                    self.values[key] = str(geo.DATA_DIR / ("land.csv" if key == "land_file" else "population.csv"))
        self.train_config()  # validate early

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        vals = {k: v for k, v in self.values.items()}
        vals.update(overrides)
        return ExperimentConfig(self.experiment, vals, self.base_dir)

    def path(self, key) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else self.base_dir / p

    def train_config(self) -> TrainConfig:
        kw = {k: self.values[k] for k in TRAIN_KEYS if k in self.values}
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        if self.experiment == "toy_inpaint":
            kw["composite_mask"] = samplers.center_hole_mask(self.values["side"], self.values["hole"])
        return TrainConfig(seed=self.seed, **kw)

    def echo(self) -> dict:
        out = {"experiment": self.experiment}
        for k, v in sorted(self.values.items()):
            if k == "output_dir":
                continue
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Flat TOML file; keys are documented in the README."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat (found tables {nested})")
    if "experiment" not in data:
        raise ConfigError(f"{path}: missing required key 'experiment'")
    return ExperimentConfig(data["experiment"], data, path.parent)


# --- problem assembly -----------------------------------------------------


@dataclass
class Problem:
    source: Callable
    target: Callable
    cost: CostSpec
    map_spec: nn.NetworkSpec
    potential_spec: nn.NetworkSpec
    train: TrainConfig
    classifier: Callable | None = None
    true_map: Callable | None = None
    closed_form: dict = field(default_factory=dict)
    on_sphere: bool = False
    context: dict = field(default_factory=dict)


def mixture_classifier(means, std):
    """Posterior class probabilities of an equal-weight isotropic mixture."""
    means = np.asarray(means, dtype=np.float64)

    def classify(P):
        d2 = np.sum((np.asarray(P)[:, None, :] - means[None, :, :]) ** 2, axis=-1)
        logits = -d2 / (2 * std**2)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    return classify


def build_problem(cfg: ExperimentConfig) -> Problem:
    v = cfg.values
    exp = cfg.experiment
    ctx: dict = {}
    closed: dict = {}
    true_map = None
    classifier = None
    on_sphere = False
    if exp == "gaussian2d":
        src = samplers.gaussian(v["mean_a"], v["cov_a"])
        tgt = samplers.gaussian(v["mean_b"], v["cov_b"])
        sol = gaussian_w2(v["mean_a"], v["cov_a"], v["mean_b"], v["cov_b"])
        true_map = sol
        closed = {"w2_squared": sol.w2_squared, "w2": math.sqrt(sol.w2_squared)}
        n = m = len(v["mean_a"])
    elif exp == "line1d":
        src = samplers.uniform([v["low_a"]], [v["high_a"]])
        tgt = samplers.uniform([v["low_b"]], [v["high_b"]])
        la, ha, lb, hb = (float(v[k]) for k in ("low_a", "high_a", "low_b", "high_b"))
        true_map = lambda X: lb + (np.asarray(X) - la) * (hb - lb) / (ha - la)
        # monotone rearrangement of uniforms is affine; its quadratic cost in closed form
        s = (hb - lb) / (ha - la)
        mean_shift = (lb + hb) / 2 - (la + ha) / 2
        closed = {"w2_squared": mean_shift**2 + (s - 1) ** 2 * (ha - la) ** 2 / 12}
        closed["w2"] = math.sqrt(closed["w2_squared"])
        n = m = 1
    elif exp == "delta_to_gaussian":
        src, tgt = samplers.delta0(1), samplers.normal(1)
        closed = {"ot_cost": 1.0}
        n = m = 1
    elif exp.startswith("annulus"):
        src, tgt = samplers.annulus(*v["r_a"]), samplers.annulus(*v["r_b"])
        n = m = 2
    elif exp == "sphere_cap":
        src, tgt = samplers.sphere_cap(*v["phi_a"]), samplers.sphere_cap(*v["phi_b"])
        n = m = 2
        on_sphere = True
    elif exp == "population":
        land = geo.load_land(cfg.path("land_file"), int(v["anchors"]), cfg.seed)
        pop = geo.load_population(cfg.path("population_file"))
        src, tgt = samplers.population(pop), samplers.land(land)
        ctx["land"] = land
        n = m = 2
        on_sphere = True
    elif exp == "unequal_dim_ellipse":
        src, tgt = samplers.normal(1), samplers.ellipse_gap(v["a"], v["b"], v["gap"])
        n, m = 1, 2
    elif exp == "class_mixture":
        src = samplers.labeled_mixture(v["source_means"], v["std"])
        tgt = samplers.labeled_mixture(v["target_means"], v["std"])
        classifier = mixture_classifier(v["target_means"], v["std"])
        n = m = 2
    elif exp == "toy_inpaint":
        mask = samplers.center_hole_mask(v["side"], v["hole"])
        src = samplers.toy_images(v["side"], mask=mask)
        tgt = samplers.toy_images(v["side"])
        ctx["mask"] = np.asarray(mask)
        n = m = v["side"] ** 2
    else:  # pragma: no cover - guarded by ExperimentConfig
        raise ConfigError(exp)

    cost_cfg = {k: v[k] for k in COST_KEYS if k in v}
    if exp == "toy_inpaint" and "mask" not in cost_cfg and "mask_file" not in cost_cfg:
        cost_cfg["mask"] = list(ctx["mask"])
    cost = cost_from_config(cost_cfg, m, cfg.base_dir)
    tc = cfg.train_config()
    n_cls = tc.n_classes if tc.conditional else 0
    residual = bool(v["map_residual"]) and n == m
    # the map sees the raw sample; zero padding only feeds the cost
    map_spec = nn.NetworkSpec(n, m, tuple(v["map_hidden"]), v["map_activation"], residual,
                              float(v["dropout"]), n_cls)
    pot_spec = nn.NetworkSpec(m, 1, tuple(v["potential_hidden"]), v["potential_activation"], False,
                              float(v["dropout"]), n_cls)
    return Problem(src, tgt, cost, map_spec, pot_spec, tc, classifier, true_map, closed, on_sphere, ctx)


# --- evaluation -----------------------------------------------------------


class IdentityMap:
    """Stand-in map x -> x with the TrainedMap calling convention."""

    pad_to = None
    composite_mask = None
    conditional = False
    potential = None

    def pad(self, X):
        return np.asarray(X, dtype=np.float64)

    def __call__(self, X, labels=None, params=None):
        X = np.asarray(X, dtype=np.float64)
        return X[:, None] if X.ndim == 1 else X.copy()

    def composite(self, X, labels=None):
        return self(X)


def _fidelity_points(P, on_sphere):
    return geo.to_cartesian(P) if on_sphere else P


def quadratic_ot(A, B, on_sphere=False) -> float:
    """Exact quadratic-cost OT between two equal-size point sets (<= 512)."""
    A = _fidelity_points(np.asarray(A, dtype=np.float64), on_sphere)
    B = _fidelity_points(np.asarray(B, dtype=np.float64), on_sphere)
    k = min(len(A), len(B), MAX_EXACT_SIZE)
    return discrete_ot_exact(A[:k], B[:k], quadratic(A.shape[1])).cost


def _cost_labels(problem, lx, TX, ly=None):
    if not problem.cost.needs_labels:
        return None
    return (lx, problem.classifier(TX) if ly is None else ly)


def transport_cost(T, problem: Problem, X, lx=None) -> float:
    TX = T(X, lx)
    return float(np.mean(cost_values(problem.cost, T.pad(X), TX, _cost_labels(problem, lx, TX), strict=False)))


def compare_maps(T_a, T_b, X_test, Y_test, cost: CostSpec, labels=None, classifier=None,
                 names=("map_a", "map_b"), on_sphere=False) -> list[dict]:
    """Per-map transport cost and pushforward fidelity on the same test set."""
    X_test = np.asarray(X_test, dtype=np.float64)
    if X_test.ndim == 1:
        X_test = X_test[:, None]
    if len(X_test) == 0:
        raise ValueError("empty test set")
    problem = Problem(None, None, cost, None, None, None, classifier, on_sphere=on_sphere)
    rows = []
    for name, T in zip(names, (T_a, T_b)):
        TX = T(X_test, labels)
        if TX.shape[1] != np.asarray(Y_test).shape[1]:
            raise ValueError(f"{name} outputs width {TX.shape[1]}, target has {np.asarray(Y_test).shape[1]}")
        P = geo.canonicalize(TX) if on_sphere else TX
        rows.append({
            "map": name,
            "transport_cost": transport_cost(T, problem, X_test, labels),
            "pushforward_w2": quadratic_ot(P, Y_test, on_sphere),
        })
    return rows


def write_comparison(rows: list[dict], path) -> Path:
    keys = ("map", "transport_cost", "pushforward_w2")
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r["map"], repr(r["transport_cost"]), repr(r["pushforward_w2"])])
    return Path(path)


def _curve_distance(P, a, b, gap):
    t = np.linspace(gap / 2, 2 * np.pi - gap / 2, 20001)
    d, _ = cKDTree(samplers.ellipse_points(t, a, b)).query(P)
    return d


def _experiment_metrics(cfg, problem, T, X, lx, Y, ly, history, artifacts, out_dir) -> dict:
    v = cfg.values
    exp = cfg.experiment
    m: dict[str, Any] = {}
    if exp == "delta_to_gaussian":
        L = history.column("lagrangian")
        tail = L[int(len(L) * (1 - float(v["tail_fraction"]))):]
        m["converged_lagrangian"] = float(np.mean(tail))
        m["final_lagrangian"] = float(L[-1])
        m["T0"] = float(T(np.zeros((1, 1)))[0, 0])
    elif exp == "line1d":
        grid = np.linspace(v["low_a"], v["high_a"], 1000)[:, None]
        m["max_grid_error"] = float(np.max(np.abs(T(grid) - problem.true_map(grid))))
    elif exp == "sphere_cap":
        theta = np.linspace(0, 2 * np.pi, int(v["ring_points"]), endpoint=False)
        for label, phi, target in (("pi8", np.pi / 8, 7 * np.pi / 8), ("pi4", np.pi / 4, np.pi)):
            ring = np.stack([theta, np.full_like(theta, phi)], axis=-1)
            out = geo.canonicalize(T(ring))
            m[f"ring_{label}_mean_phi"] = float(np.mean(out[:, 1]))
            m[f"ring_{label}_error"] = float(np.mean(np.abs(out[:, 1] - target)))
            m[f"ring_{label}_mean_phi_error"] = float(abs(np.mean(out[:, 1]) - target))
    elif exp == "population":
        land = problem.context["land"]
        TX = geo.canonicalize(T(X))
        thr = v["land_threshold"]
        snapped, moved = geo.tau_many(TX, land, geo.land_test(land, thr))
        m["land_fraction_raw"] = float(np.mean(land.contains(TX, thr)))
        m["land_fraction_tau"] = float(np.mean(land.contains(snapped, thr)))
        m["moved_fraction"] = float(np.mean(moved))
        m["geodesic_cost_raw"] = float(np.sum(geo.geodesic(X, TX)))
        m["geodesic_cost_tau"] = float(np.sum(geo.geodesic(X, snapped)))
        rng = np.random.default_rng([cfg.seed, 11])
        base = land.anchors[rng.integers(0, land.n_anchors, len(X))]
        m["geodesic_cost_random_anchor"] = float(np.sum(geo.geodesic(X, base)))
        m["pushforward_w2_tau"] = quadratic_ot(snapped, Y, True)
        m["n_anchors"] = land.n_anchors
        artifacts["tau"] = io.write_points(out_dir / "tau.csv", snapped, ["theta", "phi"],
                                           {"moved": moved}).name
    elif exp == "unequal_dim_ellipse":
        TX = T(X)
        d = _curve_distance(TX, v["a"], v["b"], v["gap"])
        m["curve_distance_mean"] = float(np.mean(d))
        m["curve_distance_rel"] = float(np.mean(d) / max(v["a"], v["b"]))
        t = np.mod(np.arctan2(TX[:, 1] / v["b"], TX[:, 0] / v["a"]), 2 * np.pi)
        lo, hi = v["gap"] / 2, 2 * np.pi - v["gap"] / 2
        bins = np.histogram(t, bins=24, range=(lo, hi))[0]
        m["arc_min"] = float(t.min())
        m["arc_max"] = float(t.max())
        m["arc_coverage"] = float(np.mean(bins > 0))
        m["covers_both_gap_sides"] = bool(bins[0] > 0 and bins[-1] > 0)
    elif exp == "class_mixture":
        TX = T(X, lx)
        means = np.asarray(v["target_means"])
        nearest = np.argmin(np.sum((TX[:, None, :] - means[None]) ** 2, axis=-1), axis=1)
        m["class_accuracy"] = float(np.mean(nearest == lx))
    elif exp == "toy_inpaint":
        mask = problem.context["mask"]
        G = T.composite(X)
        m["known_pixel_max_change"] = float(np.max(np.abs((G - X) * mask)))
        m["composite_w2"] = quadratic_ot(G, Y)
    return m


def _checkpoint_steps(spec, K) -> list[int]:
    if isinstance(spec, int):
        if spec <= 0:
            return []
        return sorted({int(s) for s in np.round(np.geomspace(max(1, K / 64), K, spec))})
    return sorted({int(s) for s in spec if 1 <= int(s) <= K})


def _checkpoint_record(step, T, problem, Xd, Yd, ct_cfg) -> dict:
    rec: dict[str, Any] = {"step": step}
    rep = duality_report(T, T.potential, problem.cost, Xd, Yd, ct_cfg)
    rec.update({"e1": rep.e1, "e2": rep.e2, "bound": rep.bound})
    if problem.true_map is not None:
        rec["map_l2_error"] = float(np.sqrt(np.mean(np.sum((T(Xd) - problem.true_map(Xd)) ** 2, axis=-1))))
    return rec


def _finite(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_digest(report: dict) -> str:
    """SHA-256 of the reproducible part of a report (everything but timing)."""
    body = {k: v for k, v in report.items() if k != "timing"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _write_report(report, out_dir) -> Path:
    path = out_dir / "report.json"
    path.write_text(json.dumps(_finite(report), indent=2, sort_keys=True) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Train, evaluate and write all artifacts; returns the report dict."""
    t_start = time.perf_counter()
    out_dir = Path(output_dir) if output_dir is not None else cfg.path("output_dir")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ExperimentError(f"cannot create output directory {out_dir}: {err}", 3) from err

    problem = build_problem(cfg)
    v = cfg.values
    n_test = int(v["n_test"])
    rng_test = np.random.default_rng([cfg.seed, 7])
    X, lx = draw(problem.source, n_test, rng_test)
    Y, ly = draw(problem.target, n_test, rng_test)
    n_o = min(n_test, MAX_EXACT_SIZE)
    ct_cfg = CTransformConfig()

    records: list[dict] = []
    steps = set(_checkpoint_steps(v["checkpoints"], problem.train.outer_steps))

    def callback(outer, snap):
        if outer in steps:
            records.append(_checkpoint_record(outer, snap, problem, X[:n_o], Y[:n_o], ct_cfg))

    report: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "config": cfg.echo(),
                              "train_config": config_to_dict(problem.train)}
    t_train = time.perf_counter()
    try:
        T, history = train(problem.source, problem.target, problem.cost, problem.map_spec,
                           problem.potential_spec, problem.train, problem.classifier,
                           callback if steps else None)
    except TrainingDiverged as err:
        report.update(status="diverged", error=str(err), diverged_at_step=err.step,
                      final_history=err.history.last, artifacts={"history": "history.csv"})
        report["timing"] = {"wall_time_s": time.perf_counter() - t_start}
        try:
            err.history.to_csv(out_dir / "history.csv")
            _write_report(report, out_dir)
        except OSError:
            pass
        raise ExperimentError(str(err), 2, report) from err
    train_time = time.perf_counter() - t_train

    TX = T(X, lx)
    P = geo.canonicalize(TX) if problem.on_sphere else TX
    metrics: dict[str, Any] = {"learned_cost": transport_cost(T, problem, X, lx)}
    metrics.update({f"closed_form_{k}": val for k, val in problem.closed_form.items()})
    # mini-batch Lagrangians are noisy (independent X and Y); use a large fresh sample
    rng_l = np.random.default_rng([cfg.seed, 10])
    Xl, lxl = draw(problem.source, int(v["lagrangian_samples"]), rng_l)
    Yl, lyl = draw(problem.target, int(v["lagrangian_samples"]), rng_l)
    metrics["heldout_lagrangian"] = lagrangian_batch(
        T, T.potential, problem.cost, Xl, Yl, (lxl, lyl) if lxl is not None else None, problem.classifier)
    if problem.true_map is not None:
        err = np.linalg.norm(TX - problem.true_map(X), axis=-1)
        metrics["map_l2_error"] = float(np.sqrt(np.mean(err**2)))
        metrics["map_mean_error"] = float(np.mean(err))
    if v["oracle"] == "exact":
        lab = (lx[:n_o], ly[:n_o]) if problem.cost.needs_labels else None
        metrics["oracle_cost"] = discrete_ot_exact(T.pad(X[:n_o]), Y[:n_o], problem.cost, lab).cost
        # same pairs as the oracle, so both share the sample's fluctuation
        metrics["paired_lagrangian"] = lagrangian_batch(T, T.potential, problem.cost, X[:n_o], Y[:n_o],
                                                        (lx[:n_o], ly[:n_o]) if lx is not None else None,
                                                        problem.classifier)
        rs = []
        for r in range(int(v["oracle_resamples"])):
            rr = np.random.default_rng([cfg.seed, 8, r])
            Xr, lxr = draw(problem.source, n_o, rr)
            Yr, lyr = draw(problem.target, n_o, rr)
            lab = (lxr, lyr) if problem.cost.needs_labels else None
            rs.append(discrete_ot_exact(T.pad(Xr), Yr, problem.cost, lab).cost)
        if rs:
            metrics["oracle_resample_mean"] = float(np.mean(rs))
            metrics["oracle_resample_std"] = float(np.std(rs, ddof=1)) if len(rs) > 1 else 0.0
    metrics["pushforward_w2"] = quadratic_ot(P, Y, problem.on_sphere)
    Xc = T.pad(X)
    if Xc.shape[1] == Y.shape[1]:
        metrics["baseline_w2"] = quadratic_ot(geo.canonicalize(Xc) if problem.on_sphere else Xc, Y,
                                              problem.on_sphere)
    if v["duality"]:
        metrics["duality"] = duality_report(T, T.potential, problem.cost, X[:n_o], Y[:n_o], ct_cfg).to_dict()
    if records:
        metrics["checkpoints"] = records
        if problem.true_map is not None and len(records) >= 3:
            b = [r["bound"] if r["bound"] is not None else np.nan for r in records]
            e = [r["map_l2_error"] for r in records]
            rho = spearmanr(b, e, nan_policy="omit").statistic
            metrics["bound_error_spearman"] = float(rho)

    artifacts: dict[str, str] = {}
    try:
        metrics.update(_experiment_metrics(cfg, problem, T, X, lx, Y, ly, history, artifacts, out_dir))
        history.to_csv(out_dir / "history.csv")
        artifacts["history"] = "history.csv"
        hdr_x = ["theta", "phi"] if problem.on_sphere else io.point_header(X.shape[1])
        hdr_y = ["theta", "phi"] if problem.on_sphere else io.point_header(Y.shape[1], "y")
        extra_x = {"label": lx} if lx is not None else None
        extra_y = {"label": ly} if ly is not None else None
        artifacts["source"] = io.write_points(out_dir / "source.csv", X, hdr_x, extra_x).name
        artifacts["target"] = io.write_points(out_dir / "target.csv", Y, hdr_y, extra_y).name
        artifacts["pushforward"] = io.write_points(out_dir / "pushforward.csv", P, hdr_y, extra_x).name
        T.save(out_dir / "map.ckpt")
        artifacts["checkpoint"] = "map.ckpt"
        if v["figures"]:
            artifacts.update(plotting.experiment_figures(cfg.experiment, out_dir, X, Y, P, history, T,
                                                         problem, metrics))
    except OSError as err:
        raise ExperimentError(f"writing artifacts to {out_dir} failed: {err}", 3) from err

    report.update(status="ok", final_history=history.last, metrics=metrics, artifacts=artifacts)
    report["timing"] = {"wall_time_s": time.perf_counter() - t_start, "train_time_s": train_time}
    report = _finite(report)
    try:
        _write_report(report, out_dir)
    except OSError as err:
        raise ExperimentError(f"writing report failed: {err}", 3) from err
    return report


def held_out(cfg: ExperimentConfig, n: int, stream: int = 9):
    """Fresh (X, labels, Y, labels) from the experiment's distributions."""
    problem = build_problem(cfg)
    rng = np.random.default_rng([cfg.seed, stream])
    X, lx = draw(problem.source, n, rng)
    Y, ly = draw(problem.target, n, rng)
    return problem, X, lx, Y, ly
