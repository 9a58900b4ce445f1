"""Command line entry point: ``monge-forge {solve,gaps,oracle,compare}``.

Exit codes: 0 success, 1 invalid input or config, 2 training divergence,
3 file I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .costs import COST_KINDS, CostDomainError, CostSpec
from .duality import CTransformConfig, duality_report
from .experiments import (ExperimentError, IdentityMap, compare_maps, held_out, load_config,
                          run_experiment, write_comparison)
from .oracles import MAX_EXACT_SIZE, discrete_ot_exact, sinkhorn
from .solver import ConfigError, TrainedMap

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "MONGE_FORGE_THREADS"

log = logging.getLogger("monge_forge")


def _summary(report: dict) -> dict:
    keep = {k: v for k, v in report.get("metrics", {}).items() if not isinstance(v, (dict, list))}
    return {"status": report.get("status"), "experiment": report["config"]["experiment"],
            "seed": report["config"]["seed"], **keep}


def _run_one(config_path: str, seed: int | None, output: str | None) -> dict:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    return run_experiment(cfg, output)


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    base_seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.output) if args.output else cfg.path("output_dir")
    if args.jobs <= 1:
        report = _run_one(args.config, base_seed, str(out))
        print(json.dumps(_summary(report)))
        return EXIT_OK
    seeds = [base_seed + k for k in range(args.jobs)]
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        futures = [pool.submit(_run_one, args.config, s, str(out / f"seed_{s}")) for s in seeds]
        code = EXIT_OK
        for f in futures:
            try:
                print(json.dumps(_summary(f.result())))
            except ExperimentError as err:
                print(f"error: {err}", file=sys.stderr)
                code = max(code, err.exit_code)
    return code


def cmd_gaps(args) -> int:
    cfg = load_config(args.config)
    T = TrainedMap.load(args.checkpoint)
    if T.potential is None:
        raise ConfigError(f"{args.checkpoint} holds no potential network")
    problem, X, _, Y, _ = held_out(cfg, args.n)
    rep = duality_report(T, T.potential, problem.cost, X, Y, CTransformConfig())
    print(rep.to_json())
    return EXIT_OK


def cmd_oracle(args) -> int:
    X = io.read_points(args.x)
    Y = io.read_points(args.y)
    if X.shape[1] != Y.shape[1]:
        raise ConfigError(f"point widths differ: {X.shape[1]} vs {Y.shape[1]}")
    cost = CostSpec(args.cost, X.shape[1], Y.shape[1], scale=args.scale)
    if args.epsilon is None and len(X) <= MAX_EXACT_SIZE:
        coupling = discrete_ot_exact(X, Y, cost)
        method = "exact"
    else:
        coupling = sinkhorn(X, Y, cost, args.epsilon or 0.01)
        method = "sinkhorn"
    if args.output:
        coupling.to_csv(args.output)
    print(json.dumps({"method": method, "n": coupling.n, "cost": coupling.cost,
                      "marginal_error": coupling.marginal_error, "iterations": coupling.iterations}))
    return EXIT_OK


def _load_map(ref: str):
    return IdentityMap() if ref == "identity" else TrainedMap.load(ref)


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    problem, X, lx, Y, _ = held_out(cfg, args.n)
    rows = compare_maps(_load_map(args.map_a), _load_map(args.map_b), X, Y, problem.cost, lx,
                        problem.classifier, names=(args.map_a, args.map_b), on_sphere=problem.on_sphere)
    if args.output:
        write_comparison(rows, args.output)
    print("map,transport_cost,pushforward_w2")
    for r in rows:
        print(f"{r['map']},{r['transport_cost']!r},{r['pushforward_w2']!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monge-forge", description="Neural Monge map solver and experiment harness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="train and evaluate one experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--output")
    s.add_argument("--jobs", type=int, default=1, help="run this many consecutive seeds in parallel")
    s.set_defaults(func=cmd_solve)

    g = sub.add_parser("gaps", help="duality gaps of a saved map and potential")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--n", type=int, default=512)
    g.set_defaults(func=cmd_gaps)

    o = sub.add_parser("oracle", help="discrete OT between two point CSVs")
    o.add_argument("--x", required=True)
    o.add_argument("--y", required=True)
    o.add_argument("--cost", required=True, choices=[k for k in COST_KINDS if k not in ("masked_mse", "class_contrastive")])
    o.add_argument("--scale", type=float, default=1.0)
    o.add_argument("--epsilon", type=float, help="use Sinkhorn with this regularisation")
    o.add_argument("--output", help="write the coupling as CSV")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("compare", help="side-by-side metrics of two maps ('identity' allowed)")
    c.add_argument("--map-a", required=True)
    c.add_argument("--map-b", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--n", type=int, default=512)
    c.add_argument("--output")
    c.set_defaults(func=cmd_compare)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ExperimentError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except (ConfigError, CostDomainError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
