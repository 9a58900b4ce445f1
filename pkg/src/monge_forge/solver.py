"""Alternating max-min training of a transport map against a potential.

The objective on a mini-batch is

    L(T, f) = mean_k [ c(X_k, T(X_k)) - f(T(X_k)) + f(Y_k) ]

which the map network decreases for ``map_steps`` Adam steps and the
potential network then increases for ``potential_steps`` steps, repeated for
``outer_steps`` rounds.  Variants: zero-padding of low-dimensional sources
before the cost, a composite image ``G(x) = T(x)*(1-M) + x*M`` fed to the
potential, and class conditioning through one-hot inputs.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .costs import CostSpec, cost_grads_y, cost_values

log = logging.getLogger(__name__)

HISTORY_HEADER = ("step", "lagrangian", "transport_cost", "f_target_mean", "f_pushforward_mean")
_CKPT_MAGIC = b"MFCK"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Lagrangian left the finite range or exceeded the divergence ceiling."""

    def __init__(self, message: str, history: "TrainHistory", step: int):
        super().__init__(message)
        self.history = history
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    outer_steps: int = 1000
    map_steps: int = 5
    potential_steps: int = 1
    batch_size: int = 256
    lr_map: float = 1e-3
    lr_potential: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float | None = None
    seed: int = 0
    eval_every: int = 100
    eval_batch_size: int | None = None
    pad_source: bool = False
    composite_mask: tuple[float, ...] | None = None
    conditional: bool = False
    n_classes: int = 0
    resample_inner: bool = True
    divergence_ceiling: float = 1e6

    def __post_init__(self):
        for name in ("outer_steps", "map_steps", "potential_steps", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr_map <= 0 or self.lr_potential <= 0:
            raise ConfigError("learning rates must be positive")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.conditional and self.n_classes < 2:
            raise ConfigError("conditional training needs n_classes >= 2")
        if self.composite_mask is not None:
            object.__setattr__(self, "composite_mask", tuple(float(v) for v in self.composite_mask))
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def total_gradient_steps(self) -> int:
        return self.outer_steps * (self.map_steps + self.potential_steps)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    return np.eye(n_classes)[labels]


@dataclass
class Potential:
    """The dual network f, evaluated on points in the target space."""

    spec: nn.NetworkSpec
    params: np.ndarray
    n_classes: int = 0

    def _inputs(self, Y, labels):
        Y = np.asarray(Y, dtype=np.float64)
        if self.n_classes:
            if labels is None:
                raise ValueError("conditional potential needs labels")
            return np.hstack([Y, one_hot(labels, self.n_classes)])
        return Y

    def __call__(self, Y, labels=None) -> np.ndarray:
        return nn.forward(self.spec, self.params, self._inputs(Y, labels))[:, 0]

    def value_and_grad(self, Y, labels=None) -> tuple[np.ndarray, np.ndarray]:
        Y = np.asarray(Y, dtype=np.float64)
        out, pull = nn.forward_with_pullback(self.spec, self.params, self._inputs(Y, labels))
        _, g = pull(np.ones_like(out))
        return out[:, 0], g[:, : Y.shape[1]]


@dataclass
class TrainedMap:
    """Map network plus the metadata needed to apply it to raw source samples."""

    spec: nn.NetworkSpec
    params: np.ndarray
    ema_params: np.ndarray | None = None
    pad_to: int | None = None
    composite_mask: tuple[float, ...] | None = None
    conditional: bool = False
    n_classes: int = 0
    potential: Potential | None = None

    @property
    def eval_params(self) -> np.ndarray:
        return self.ema_params if self.ema_params is not None else self.params

    def inputs(self, X, labels=None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if self.conditional:
            if labels is None:
                raise ValueError("conditional map needs labels")
            return np.hstack([X, one_hot(labels, self.n_classes)])
        return X

    def pad(self, X) -> np.ndarray:
        """Source samples as seen by the cost (zero-padded when configured)."""
        return pad_source(X, self.pad_to) if self.pad_to else np.asarray(X, dtype=np.float64)

    def __call__(self, X, labels=None, params: np.ndarray | None = None) -> np.ndarray:
        p = self.eval_params if params is None else params
        return nn.forward(self.spec, p, self.inputs(X, labels))

    def composite(self, X, labels=None) -> np.ndarray:
        """G(x) = T(x) * (1 - M) + x * M, or T(x) when no mask is set."""
        TX = self(X, labels)
        if self.composite_mask is None:
            return TX
        mask = np.asarray(self.composite_mask)
        return TX * (1 - mask) + np.asarray(X, dtype=np.float64) * mask

    # checkpoint: magic | u32 json length | json metadata | map record |
    # [ema record] | [potential record]; records use the nn binary format
    def save(self, path: str | Path) -> None:
        meta = {
            "pad_to": self.pad_to,
            "composite_mask": list(self.composite_mask) if self.composite_mask is not None else None,
            "conditional": self.conditional,
            "n_classes": self.n_classes,
            "has_ema": self.ema_params is not None,
            "has_potential": self.potential is not None,
        }
        raw = json.dumps(meta).encode()
        blob = _CKPT_MAGIC + struct.pack("<I", len(raw)) + raw + nn.dumps(self.spec, self.params)
        if self.ema_params is not None:
            blob += nn.dumps(self.spec, self.ema_params)
        if self.potential is not None:
            blob += nn.dumps(self.potential.spec, self.potential.params)
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedMap":
        blob = Path(path).read_bytes()
        if blob[:4] != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (n,) = struct.unpack_from("<I", blob, 4)
        meta = json.loads(blob[8 : 8 + n])
        spec, params, pos = nn.loads(blob, 8 + n)
        ema = None
        if meta["has_ema"]:
            _, ema, pos = nn.loads(blob, pos)
        potential = None
        if meta["has_potential"]:
            pspec, pparams, pos = nn.loads(blob, pos)
            potential = Potential(pspec, pparams, meta["n_classes"] if meta["conditional"] else 0)
        mask = tuple(meta["composite_mask"]) if meta["composite_mask"] is not None else None
        return cls(spec, params, ema, meta["pad_to"], mask, meta["conditional"], meta["n_classes"], potential)


@dataclass
class TrainHistory:
    records: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step, lagrangian, transport_cost, f_target_mean, f_pushforward_mean):
        self.records.append((int(step), float(lagrangian), float(transport_cost),
                             float(f_target_mean), float(f_pushforward_mean)))

    @property
    def last(self) -> dict | None:
        return dict(zip(HISTORY_HEADER, self.records[-1])) if self.records else None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[HISTORY_HEADER.index(name)] for r in self.records])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_HEADER)
            for step, *vals in self.records:
                writer.writerow([step, *(repr(v) for v in vals)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainHistory":
        hist = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != HISTORY_HEADER:
                raise ValueError(f"{path}: unexpected history header")
            for row in reader:
                hist.append(int(row[0]), *(float(v) for v in row[1:]))
        return hist


def pad_source(X, m: int) -> np.ndarray:
    """Append m - n zero columns to an (N, n) batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[1]
    if m < n:
        raise ValueError(f"cannot pad {n}-dim samples down to {m}")
    if m == n:
        return X
    return np.hstack([X, np.zeros((X.shape[0], m - n))])


def draw(sampler, n: int, rng: np.random.Generator):
    """Call a sampler and normalise to ``(points, labels_or_None)``."""
    out = sampler(n, rng)
    if isinstance(out, tuple):
        pts, labels = out
    else:
        pts, labels = out, None
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts, labels


def _cost_labels(cost: CostSpec, source_labels, pushed, classifier):
    if not cost.needs_labels:
        return None
    if source_labels is None:
        raise ConfigError(f"{cost.kind} cost needs labelled source samples")
    target = classifier(pushed) if classifier is not None else source_labels
    return (source_labels, target)


def lagrangian_batch(T: TrainedMap, f: Potential, cost: CostSpec, X, Y, labels=None,
                     classifier: Callable | None = None, params: np.ndarray | None = None) -> float:
    """Mini-batch value of mean[c(x, T(x)) - f(G(x)) + f(y)].

    ``labels`` is ``(source_labels, target_labels)`` for conditional maps.
    ``G`` is the composite image when the map carries a mask, else ``T``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) != len(Y):
        raise ValueError("X and Y batches must have equal size")
    lx, ly = labels if labels is not None else (None, None)
    TX = T(X, lx, params)
    G = TX
    if T.composite_mask is not None:
        mask = np.asarray(T.composite_mask)
        G = TX * (1 - mask) + X * mask
    c = cost_values(cost, T.pad(X), TX, _cost_labels(cost, lx, TX, classifier), strict=False)
    f_lx = lx if T.conditional else None
    f_ly = ly if T.conditional else None
    value = float(np.mean(c) - np.mean(f(G, f_lx)) + np.mean(f(Y, f_ly)))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite Lagrangian")
    return value


def _check_dims(cost, map_spec, potential_spec, config, source_dim):
    if map_spec.input_dim != source_dim:
        raise ConfigError(f"map input_dim {map_spec.input_dim} != source dimension {source_dim}")
    if potential_spec.output_dim != 1:
        raise ConfigError("potential network must be scalar-valued")
    if potential_spec.input_dim != map_spec.output_dim:
        raise ConfigError("potential input_dim must equal map output_dim")
    if cost.m != map_spec.output_dim:
        raise ConfigError(f"cost target dim {cost.m} != map output_dim {map_spec.output_dim}")
    cost_source = cost.m if config.pad_source else source_dim
    if cost.n != cost_source:
        raise ConfigError(f"cost source dim {cost.n} != {cost_source} (pad_source={config.pad_source})")
    want_cond = config.n_classes if config.conditional else 0
    if map_spec.condition_dim != want_cond or potential_spec.condition_dim != want_cond:
        raise ConfigError(f"condition_dim of both networks must be {want_cond}")
    if config.composite_mask is not None:
        if cost.kind != "masked_mse" or tuple(cost.mask) != config.composite_mask:
            raise ConfigError("composite mode needs a masked_mse cost with the same mask")
        if source_dim != map_spec.output_dim:
            raise ConfigError("composite mode needs equal source and target dimensions")


def _sub_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def train(
    source_sampler: Callable,
    target_sampler: Callable,
    cost: CostSpec,
    map_spec: nn.NetworkSpec,
    potential_spec: nn.NetworkSpec,
    config: TrainConfig,
    classifier: Callable | None = None,
    callback: Callable[[int, TrainedMap], None] | None = None,
) -> tuple[TrainedMap, TrainHistory]:
    """Run the alternating scheme and return the map and its history.

    Samplers are callables ``sampler(n, rng)`` returning an (n, d) array, or
    ``(points, labels)`` for labelled data.  ``classifier`` maps target-space
    points to class probabilities for label-aware costs.  ``callback`` is
    invoked after every outer step with the step number and a snapshot.
    """
    cfg = config
    rng_src = np.random.default_rng([cfg.seed, 1])
    rng_tgt = np.random.default_rng([cfg.seed, 2])
    rng_eval_src = np.random.default_rng([cfg.seed, 3])
    rng_eval_tgt = np.random.default_rng([cfg.seed, 4])

    B = cfg.batch_size
    probe, _ = draw(source_sampler, 2, np.random.default_rng([cfg.seed, 99]))
    _check_dims(cost, map_spec, potential_spec, cfg, probe.shape[1])
    m = map_spec.output_dim
    n_cls = cfg.n_classes if cfg.conditional else 0

    theta = nn.init_params(map_spec, _sub_seed(cfg.seed, 10))
    eta = nn.init_params(potential_spec, _sub_seed(cfg.seed, 11))
    adam_kw = dict(beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    opt_t = nn.AdamState.zeros(len(theta), lr=cfg.lr_map, **adam_kw)
    opt_f = nn.AdamState.zeros(len(eta), lr=cfg.lr_potential, **adam_kw)
    ema = nn.EmaState(theta.copy(), cfg.ema_decay) if cfg.ema_decay else None
    mask = np.asarray(cfg.composite_mask) if cfg.composite_mask is not None else None
    history = TrainHistory()

    def snapshot() -> TrainedMap:
        return TrainedMap(
            map_spec, theta, ema.shadow if ema else None, m if cfg.pad_source else None,
            cfg.composite_mask, cfg.conditional, n_cls, Potential(potential_spec, eta, n_cls),
        )

    def with_labels(P, labels):
        return np.hstack([P, one_hot(labels, n_cls)]) if n_cls else P

    def guard(value, step):
        if not np.isfinite(value) or abs(value) > cfg.divergence_ceiling:
            raise TrainingDiverged(
                f"Lagrangian {value!r} at gradient step {step} exceeds ceiling {cfg.divergence_ceiling:g}",
                history, step,
            )

    def batch_terms(X, lx, theta_, train_mode, key):
        TX, pull_T = nn.forward_with_pullback(map_spec, theta_, with_labels(X, lx), train_mode, key)
        G = TX if mask is None else TX * (1 - mask) + X * mask
        Xc = pad_source(X, m) if cfg.pad_source else X
        labels = _cost_labels(cost, lx, TX, classifier)
        return TX, pull_T, G, Xc, labels

    def draw_pair(rs, rt, n):
        X, lx = draw(source_sampler, n, rs)
        Y, ly = draw(target_sampler, n, rt)
        return X, lx, Y, ly

    step = 0
    batch = None
    for outer in range(1, cfg.outer_steps + 1):
        if not cfg.resample_inner:
            batch = draw_pair(rng_src, rng_tgt, B)

        for _ in range(cfg.map_steps):
            step += 1
            X, lx, Y, ly = batch if batch is not None else draw_pair(rng_src, rng_tgt, B)
            TX, pull_T, G, Xc, labels = batch_terms(X, lx, theta, True, (cfg.seed, 0, step))
            fG, pull_f = nn.forward_with_pullback(potential_spec, eta, with_labels(G, lx))
            c = cost_values(cost, Xc, TX, labels, strict=False)
            _, g_in = pull_f(np.full((B, 1), 1.0 / B))
            dG = g_in[:, :m]
            dT = cost_grads_y(cost, Xc, TX, labels, strict=False) / B - (dG if mask is None else dG * (1 - mask))
            g_theta, _ = pull_T(dT)
            guard(float(np.mean(c) - np.mean(fG)), step)
            theta, opt_t = nn.adam_step(theta, g_theta, opt_t)
            if ema is not None:
                ema = nn.ema_update(ema, theta)

        for _ in range(cfg.potential_steps):
            step += 1
            X, lx, Y, ly = batch if batch is not None else draw_pair(rng_src, rng_tgt, B)
            TX, _, G, Xc, labels = batch_terms(X, lx, theta, False, 0)
            stacked = np.vstack([with_labels(G, lx), with_labels(Y, ly)])
            out, pull_f = nn.forward_with_pullback(potential_spec, eta, stacked, True, (cfg.seed, 1, step))
            fG, fY = out[:B, 0], out[B:, 0]
            c = cost_values(cost, Xc, TX, labels, strict=False)
            guard(float(np.mean(c) - np.mean(fG) + np.mean(fY)), step)
            # ascend L: descend mean f(G) - mean f(Y)
            upstream = np.concatenate([np.full(B, 1.0 / B), np.full(B, -1.0 / B)])[:, None]
            g_eta, _ = pull_f(upstream)
            eta, opt_f = nn.adam_step(eta, g_eta, opt_f)

        if outer % cfg.eval_every == 0 or outer == cfg.outer_steps:
            n_eval = cfg.eval_batch_size or B
            X, lx, Y, ly = draw_pair(rng_eval_src, rng_eval_tgt, n_eval)
            # history follows the parameters the returned map evaluates with
            TX, _, G, Xc, labels = batch_terms(X, lx, ema.shadow if ema else theta, False, 0)
            c = float(np.mean(cost_values(cost, Xc, TX, labels, strict=False)))
            fG = float(np.mean(nn.forward(potential_spec, eta, with_labels(G, lx))))
            fY = float(np.mean(nn.forward(potential_spec, eta, with_labels(Y, ly))))
            guard(c - fG + fY, step)
            history.append(outer, c - fG + fY, c, fY, fG)
            log.debug("outer %d: L=%.5f cost=%.5f", outer, c - fG + fY, c)

        if callback is not None:
            callback(outer, snapshot())

    return snapshot(), history


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(config.betas)
    if config.composite_mask is not None:
        d["composite_mask"] = list(config.composite_mask)
    return d


def make_config(**overrides) -> TrainConfig:
    known = TrainConfig.__dataclass_fields__
    unknown = set(overrides) - set(known)
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(**overrides)


