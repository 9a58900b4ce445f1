"""Dense float64 networks with hand-written reverse-mode differentiation.

A network is a plain fully connected stack described by a :class:`NetworkSpec`
and a flat parameter vector whose layout is a pure function of the spec.  The
forward pass records a tape of per-layer intermediates; walking the tape in
reverse yields exact gradients with respect to both the parameters and the
input, which is all the saddle-point trainer needs.

Tensors are ``numpy.ndarray`` objects of dtype float64, batch-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("prelu", "tanh", "relu")
PRELU_INIT = 0.25

_MAGIC = b"MFNN"
_FORMAT_VERSION = 1
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    """Input or upstream array does not match the network spec."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "prelu"
    residual: bool = False
    dropout_p: float = 0.0
    condition_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.residual and self.input_dim != self.output_dim:
            raise ValueError("residual networks need input_dim == output_dim")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.condition_dim < 0:
            raise ValueError("condition_dim must be >= 0")

    @property
    def in_width(self) -> int:
        """Columns expected in the input, condition block included."""
        return self.input_dim + self.condition_dim

    @property
    def widths(self) -> list[int]:
        return [self.in_width, *self.hidden_dims, self.output_dim]

    def layout(self) -> list[tuple[str, int, tuple[int, ...]]]:
        """(name, offset, shape) for every parameter block, in storage order.

        Blocks per layer are the weight matrix (fan_out x fan_in, row-major),
        the bias, and for PReLU hidden layers a scalar slope.
        """
        blocks = []
        offset = 0
        widths = self.widths
        n_layers = len(widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            blocks.append((f"W{i}", offset, (fan_out, fan_in)))
            offset += fan_out * fan_in
            blocks.append((f"b{i}", offset, (fan_out,)))
            offset += fan_out
            if self.activation == "prelu" and i < n_layers - 1:
                blocks.append((f"a{i}", offset, ()))
                offset += 1
        return blocks

    @property
    def n_params(self) -> int:
        name, offset, shape = self.layout()[-1]
        return offset + int(np.prod(shape, dtype=int))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


def unpack(spec: NetworkSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``params`` keyed by block name."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    out = {}
    for name, offset, shape in spec.layout():
        size = int(np.prod(shape, dtype=int))
        out[name] = params[offset : offset + size].reshape(shape)
    return out


def init_params(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, PReLU slopes at 0.25."""
    rng = np.random.default_rng(seed)
    params = np.empty(spec.n_params)
    widths = spec.widths
    for name, offset, shape in spec.layout():
        size = int(np.prod(shape, dtype=int))
        layer = int(name[1:])
        if name[0] == "a":
            params[offset] = PRELU_INIT
            continue
        bound = 1.0 / np.sqrt(widths[layer])
        params[offset : offset + size] = rng.uniform(-bound, bound, size)
    return params


def _dropout_mask(rng_seed, layer: int, shape, p: float) -> np.ndarray:
    key = list(rng_seed) if isinstance(rng_seed, (tuple, list)) else [int(rng_seed)]
    rng = np.random.default_rng(np.random.SeedSequence([*key, layer]))
    return (rng.random(shape) >= p) / (1.0 - p)


@dataclass
class _Tape:
    x: np.ndarray
    inputs: list = field(default_factory=list)  # input to each linear layer
    pre: list = field(default_factory=list)  # pre-activation of each hidden layer
    masks: list = field(default_factory=list)


def _check_input(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ShapeError(f"input must be (B, {spec.in_width}), got {x.shape}")
    return x


def _run(spec, params, x, train_mode, rng_seed):
    x = _check_input(spec, x)
    blocks = unpack(spec, params)
    tape = _Tape(x=x)
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        tape.inputs.append(h)
        z = h @ blocks[f"W{i}"].T + blocks[f"b{i}"]
        if i == last:
            h = z
            break
        tape.pre.append(z)
        if spec.activation == "prelu":
            h = np.where(z > 0, z, blocks[f"a{i}"] * z)
        elif spec.activation == "tanh":
            h = np.tanh(z)
        else:
            h = np.maximum(z, 0.0)
        if train_mode and spec.dropout_p > 0:
            mask = _dropout_mask(rng_seed, i, h.shape, spec.dropout_p)
            tape.masks.append(mask)
            h = h * mask
        else:
            tape.masks.append(None)
    if spec.residual:
        h = x[:, : spec.input_dim] + h
    return h, tape


def _pullback(spec, params, tape: _Tape, upstream):
    upstream = np.asarray(upstream, dtype=np.float64)
    n_batch = tape.x.shape[0]
    if upstream.shape != (n_batch, spec.output_dim):
        raise ShapeError(f"upstream must be ({n_batch}, {spec.output_dim}), got {upstream.shape}")
    blocks = unpack(spec, params)
    grads = np.zeros(spec.n_params)
    gblocks = unpack(spec, grads)
    g = upstream
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            mask = tape.masks[i]
            if mask is not None:
                g = g * mask
            z = tape.pre[i]
            if spec.activation == "prelu":
                neg = z <= 0
                gblocks[f"a{i}"][...] = np.sum(g * z * neg)
                g = np.where(neg, blocks[f"a{i}"] * g, g)
            elif spec.activation == "tanh":
                t = np.tanh(z)
                g = g * (1.0 - t * t)
            else:
                g = g * (z > 0)
        gblocks[f"W{i}"][...] = g.T @ tape.inputs[i]
        gblocks[f"b{i}"][...] = g.sum(axis=0)
        g = g @ blocks[f"W{i}"]
    if spec.residual:
        g = g.copy()
        g[:, : spec.input_dim] += upstream
    return grads, g


def forward(
    spec: NetworkSpec,
    params: np.ndarray,
    x: np.ndarray,
    train_mode: bool = False,
    rng_seed: int | Sequence[int] = 0,
) -> np.ndarray:
    """Evaluate the network on a (B, in_width) batch.

    Dropout is active only when ``train_mode`` is set; masks are a pure
    function of ``(rng_seed, layer)`` so :func:`backward` can replay them.
    """
    return _run(spec, params, x, train_mode, rng_seed)[0]


def backward(
    spec: NetworkSpec,
    params: np.ndarray,
    x: np.ndarray,
    upstream: np.ndarray,
    train_mode: bool = False,
    rng_seed: int | Sequence[int] = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * forward(x))`` w.r.t. params and input.

    Returns ``(param_grads, input_grads)``; ``input_grads`` has the full input
    width, condition columns included.
    """
    _, tape = _run(spec, params, x, train_mode, rng_seed)
    return _pullback(spec, params, tape, upstream)


def forward_with_pullback(
    spec: NetworkSpec,
    params: np.ndarray,
    x: np.ndarray,
    train_mode: bool = False,
    rng_seed: int | Sequence[int] = 0,
) -> tuple[np.ndarray, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]]:
    """Forward pass plus a closure computing the vector-Jacobian product."""
    out, tape = _run(spec, params, x, train_mode, rng_seed)
    return out, lambda upstream: _pullback(spec, params, tape, upstream)


# --- optimisation ---------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, n_params: int, **hyper) -> "AdamState":
        return cls(0, np.zeros(n_params), np.zeros(n_params), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step with decoupled weight decay."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.first_moment.shape != params.shape:
        raise ShapeError("params, grads and Adam moments must have equal length")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient entries")
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new = params * (1 - state.lr * state.weight_decay) if state.weight_decay else params
    new = new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, step=step, first_moment=m, second_moment=v)


@dataclass(frozen=True)
class EmaState:
    shadow: np.ndarray
    decay: float


def ema_update(state: EmaState, params: np.ndarray) -> EmaState:
    if state.shadow.shape != np.shape(params):
        raise ShapeError("EMA shadow and params differ in length")
    return EmaState(state.decay * state.shadow + (1 - state.decay) * params, state.decay)


# --- serialization --------------------------------------------------------
#
# little-endian: magic "MFNN" | u8 version | u32 input_dim | u32 output_dim |
# u32 condition_dim | u8 activation | u8 residual | f64 dropout_p |
# u32 n_hidden | u32 * n_hidden | u64 n_params | f64 * n_params


def dumps(spec: NetworkSpec, params: np.ndarray) -> bytes:
    params = np.asarray(params, dtype="<f8")
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    head = _MAGIC + struct.pack(
        "<BIIIBBdI",
        _FORMAT_VERSION,
        spec.input_dim,
        spec.output_dim,
        spec.condition_dim,
        _ACT_CODES[spec.activation],
        int(spec.residual),
        spec.dropout_p,
        len(spec.hidden_dims),
    )
    head += struct.pack(f"<{len(spec.hidden_dims)}I", *spec.hidden_dims)
    head += struct.pack("<Q", spec.n_params)
    return head + params.tobytes()


def loads(blob: bytes, offset: int = 0) -> tuple[NetworkSpec, np.ndarray, int]:
    """Parse one network record starting at ``offset``.

    Returns ``(spec, params, end_offset)`` so records can be concatenated.
    """
    if blob[offset : offset + 4] != _MAGIC:
        raise ValueError("not a network record (bad magic)")
    pos = offset + 4
    fixed = struct.Struct("<BIIIBBdI")
    version, n_in, n_out, n_cond, act, residual, dropout, n_hidden = fixed.unpack_from(blob, pos)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {version}")
    pos += fixed.size
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, pos)
    pos += 4 * n_hidden
    (n_params,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    spec = NetworkSpec(n_in, n_out, hidden, ACTIVATIONS[act], bool(residual), dropout, n_cond)
    if spec.n_params != n_params:
        raise ValueError("parameter count does not match the stored spec")
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    return spec, params, pos + 8 * n_params
