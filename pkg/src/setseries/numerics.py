"""Float64 numerics: compensated reductions, a minimal reverse-mode tape, MLPs, Adam.

Everything downstream (set embedding, attention, training) is built from the
primitives in this module.  The tape covers exactly the operator set those
pipelines need; it is not a general autodiff system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError, ValidationError

# ---------------------------------------------------------------------------
# Compensated summation


def compensated_sum(values) -> float:
    """Sum scalars with Kahan-Babuska (Neumaier) compensation.

    The carried compensation keeps the rounding error bounded independently of
    the number of addends, which matters when reducing many set elements of
    mixed magnitude (cancellation would otherwise silently drop small terms).
    """
    total = 0.0
    comp = 0.0
    for v in values:
        v = float(v)
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def _neumaier_column_sums(x):
    total = np.zeros(x.shape[1])
    comp = np.zeros(x.shape[1])
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            t = total[j] + v
            if abs(total[j]) >= abs(v):
                comp[j] += (total[j] - t) + v
            else:
                comp[j] += (v - t) + total[j]
            total[j] = t
    return total + comp


_jit_column_sums = None
_jit_unavailable = False


def compensated_column_sums(x: np.ndarray) -> np.ndarray:
    """Column sums of a 2-d array, Neumaier-compensated over rows.

    Large reductions go through a numba-compiled kernel when numba is
    installed; it runs the identical operation sequence (no fastmath), so the
    two paths are bit-for-bit interchangeable.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d array, got shape {x.shape}")
    global _jit_column_sums, _jit_unavailable
    if _jit_column_sums is None and not _jit_unavailable and x.size >= 512:
        try:
            from numba import njit

            _jit_column_sums = njit(cache=True)(_neumaier_column_sums)
        except Exception:
            _jit_unavailable = True
    if _jit_column_sums is not None and x.size >= 512:
        return _jit_column_sums(np.ascontiguousarray(x))
    total = np.zeros(x.shape[1])
    comp = np.zeros(x.shape[1])
    for row in x:
        t = total + row
        comp += np.where(np.abs(total) >= np.abs(row), (total - t) + row, (row - t) + total)
        total = t
    return total + comp


def softmax_stable(logits) -> np.ndarray:
    """Softmax of a vector, max-shifted so large logits cannot overflow."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValidationError("softmax expects a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValidationError("softmax logits must be finite")
    e = np.exp(z - z.max())
    return e / compensated_sum(e)


def require_finite(array, what: str) -> np.ndarray:
    """Reject NaN/Inf on values entering from external input."""
    a = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what} contains non-finite values")
    return a


# ---------------------------------------------------------------------------
# Reverse-mode tape


class Tape:
    """Execution-ordered record of primitive operations for one reverse sweep.

    Creation order is topological order, so the reverse sweep is a single
    backwards pass over ``nodes``.  A tape is single-owner and can be swept
    exactly once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def leaf(self, value, name: str | None = None) -> "Node":
        node = Node(np.asarray(value, dtype=np.float64), self, (), (), name)
        self.nodes.append(node)
        return node


class Node:
    """One recorded value; ``vjps[i]`` maps the output gradient to parent i's share."""

    __slots__ = ("value", "tape", "parents", "vjps", "grad", "name")

    def __init__(self, value, tape, parents, vjps, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjps = vjps
        self.grad = None
        self.name = name


def value_of(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise StateError("operands were recorded on different tapes")
    return tape


def _record(tape, value, parents_and_vjps):
    node = Node(
        value,
        tape,
        tuple(p for p, _ in parents_and_vjps),
        tuple(v for _, v in parents_and_vjps),
    )
    tape.nodes.append(node)
    return node


def backward(tape: Tape, output_gradient) -> dict[str, np.ndarray]:
    """Sweep a tape once, returning gradients for every named leaf.

    The gradient seed applies to the last recorded node.  Leaves that did not
    influence the output get zero gradients so the result always aligns with
    the parameter set.
    """
    if tape.consumed:
        raise StateError("tape has already been swept")
    if not tape.nodes:
        raise StateError("tape is empty")
    tape.consumed = True
    out = tape.nodes[-1]
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != out.value.shape:
        if g.size == out.value.size:
            g = g.reshape(out.value.shape)
        else:
            raise ShapeError(
                f"output gradient shape {g.shape} does not match output {out.value.shape}"
            )
    out.grad = g
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    return {
        n.name: (n.grad if n.grad is not None else np.zeros_like(n.value))
        for n in tape.nodes
        if n.name is not None
    }


# ---------------------------------------------------------------------------
# Primitive operations (accept Node or ndarray operands)


def matmul(x, w):
    xv, wv = value_of(x), value_of(w)
    out = xv @ wv
    tape = _tape_of(x, w)
    if tape is None:
        return out
    pv = []
    if isinstance(x, Node):
        if xv.ndim == 1:
            pv.append((x, lambda g: wv @ g))
        else:
            pv.append((x, lambda g: g @ wv.T))
    if isinstance(w, Node):
        if xv.ndim == 1:
            pv.append((w, lambda g: xv[:, None] * g[None, :]))
        else:
            pv.append((w, lambda g: xv.T @ g))
    return _record(tape, out, pv)


def add(x, y):
    """Elementwise add; supports the (M, k) + (k,) bias broadcast."""
    xv, yv = value_of(x), value_of(y)
    out = xv + yv
    tape = _tape_of(x, y)
    if tape is None:
        return out

    def reducer(v, g):
        return g.sum(axis=0) if g.ndim == v.ndim + 1 else g

    pv = []
    if isinstance(x, Node):
        pv.append((x, lambda g: reducer(xv, g)))
    if isinstance(y, Node):
        pv.append((y, lambda g: reducer(yv, g)))
    return _record(tape, out, pv)


def mul(x, y):
    """Elementwise product of same-shaped operands."""
    xv, yv = value_of(x), value_of(y)
    out = xv * yv
    tape = _tape_of(x, y)
    if tape is None:
        return out
    pv = []
    if isinstance(x, Node):
        pv.append((x, lambda g: g * yv))
    if isinstance(y, Node):
        pv.append((y, lambda g: g * xv))
    return _record(tape, out, pv)


def scale(x, factor: float):
    xv = value_of(x)
    out = xv * factor
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: g * factor)])


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    tape = _tape_of(x)
    if tape is None:
        return out
    active = xv > 0.0
    return _record(tape, out, [(x, lambda g: g * active)])


def sigmoid(x):
    xv = value_of(x)
    out = _sigmoid_values(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: g * out * (1.0 - out))])


def _sigmoid_values(x):
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: g.reshape(xv.shape))])


def concat_cols(parts):
    """Concatenate 2-d blocks along columns."""
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=1)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    pv = []
    start = 0
    for part, v in zip(parts, values):
        stop = start + v.shape[1]
        if isinstance(part, Node):
            pv.append((part, lambda g, a=start, b=stop: g[:, a:b]))
        start = stop
    return _record(tape, out, pv)


def broadcast_rows(v, n_rows: int):
    """Tile a vector into n identical rows."""
    vv = value_of(v)
    out = np.tile(vv, (n_rows, 1))
    tape = _tape_of(v)
    if tape is None:
        return out
    return _record(tape, out, [(v, lambda g: g.sum(axis=0))])


def sum_rows(x):
    """Compensated sum over rows (axis 0) of a 2-d array."""
    xv = value_of(x)
    out = compensated_column_sums(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: np.tile(g, (xv.shape[0], 1)))])


def mean_rows(x):
    n = value_of(x).shape[0]
    return scale(sum_rows(x), 1.0 / n)


def max_rows(x):
    """Columnwise max over rows; the gradient routes to the first maximizer."""
    xv = value_of(x)
    idx = np.argmax(xv, axis=0)
    cols = np.arange(xv.shape[1])
    out = xv[idx, cols]
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(xv)
        full[idx, cols] = g
        return full

    return _record(tape, out, [(x, vjp)])


def softmax_rows(x):
    """Softmax over rows (axis 0), independently per column."""
    xv = value_of(x)
    shifted = xv - xv.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / compensated_column_sums(e)
    tape = _tape_of(x)
    if tape is None:
        return p

    def vjp(g):
        dot = np.sum(g * p, axis=0, keepdims=True)
        return p * (g - dot)

    return _record(tape, p, [(x, vjp)])


def divide_cols(x, s):
    """Divide each column of x (M, k) by the matching entry of s (k,)."""
    xv, sv = value_of(x), value_of(s)
    out = xv / sv
    tape = _tape_of(x, s)
    if tape is None:
        return out
    pv = []
    if isinstance(x, Node):
        pv.append((x, lambda g: g / sv))
    if isinstance(s, Node):
        pv.append((s, lambda g: -np.sum(g * xv, axis=0) / (sv * sv)))
    return _record(tape, out, pv)


def dot_heads(k, q):
    """Per-head row/query dot products: (M, h, d) x (h, d) -> (M, h)."""
    kv, qv = value_of(k), value_of(q)
    out = np.einsum("jhd,hd->jh", kv, qv)
    tape = _tape_of(k, q)
    if tape is None:
        return out
    pv = []
    if isinstance(k, Node):
        pv.append((k, lambda g: g[:, :, None] * qv[None, :, :]))
    if isinstance(q, Node):
        pv.append((q, lambda g: np.einsum("jhd,jh->hd", kv, g)))
    return _record(tape, out, pv)


def weighted_sum_rows(a, h):
    """Per-head weighted sums of embeddings: (M, heads) x (M, d) -> (heads, d).

    The reduction over rows is compensated, matching the other set-element
    aggregations.
    """
    av, hv = value_of(a), value_of(h)
    m = av.shape[0]
    heads, d = av.shape[1], hv.shape[1]
    prod = (av[:, :, None] * hv[:, None, :]).reshape(m, heads * d)
    out = compensated_column_sums(prod).reshape(heads, d)
    tape = _tape_of(a, h)
    if tape is None:
        return out
    pv = []
    if isinstance(a, Node):
        pv.append((a, lambda g: hv @ g.T))
    if isinstance(h, Node):
        pv.append((h, lambda g: av @ g))
    return _record(tape, out, pv)


def stack_rows(parts):
    """Stack equal-length vectors into a matrix, one row each."""
    values = [value_of(p) for p in parts]
    out = np.stack(values)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    pv = [
        (part, lambda g, i=i: g[i])
        for i, part in enumerate(parts)
        if isinstance(part, Node)
    ]
    return _record(tape, out, pv)


def sum_all(x):
    """Sum over every entry, as a 0-d value."""
    xv = value_of(x)
    out = np.asarray(np.sum(xv))
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: np.full(xv.shape, float(g)))])


def dropout(x, rate: float, rng: np.random.Generator):
    """Inverted dropout: kept entries are rescaled so eval needs no adjustment."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    xv = value_of(x)
    mask = (rng.random(xv.shape) >= rate) / (1.0 - rate)
    out = xv * mask
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [(x, lambda g: g * mask)])


def binary_cross_entropy(logit, label: float):
    """Stable BCE from a logit: softplus(x) - y*x; gradient sigmoid(x) - y."""
    xv = value_of(logit)
    out = np.logaddexp(0.0, xv) - label * xv
    tape = _tape_of(logit)
    if tape is None:
        return out
    return _record(tape, out, [(logit, lambda g: g * (_sigmoid_values(xv) - label))])


# ---------------------------------------------------------------------------
# Multilayer perceptrons


@dataclass(frozen=True)
class MlpSpec:
    """Feed-forward network: input width followed by each layer's output width.

    Hidden layers use relu; ``final_activation`` is identity for logits or
    sigmoid for probabilities.  Dropout applies to hidden activations in
    training mode only.
    """

    widths: tuple[int, ...]
    activation: str = "relu"
    final_activation: str = "identity"
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ConfigError("an MLP needs an input width and at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported hidden activation {self.activation!r}")
        if self.final_activation not in ("identity", "sigmoid"):
            raise ConfigError(f"unsupported final activation {self.final_activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> dict:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for layer, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}w{layer}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}b{layer}"] = np.zeros(fan_out)
    return params


def mlp_apply(x, spec: MlpSpec, params, prefix: str = "", train: bool = False, rng=None):
    """Run an MLP on a vector or an (M, input_width) matrix of rows.

    ``params`` may hold ndarrays (plain evaluation) or tape leaves (training).
    """
    h = x
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        h = add(matmul(h, params[f"{prefix}w{layer}"]), params[f"{prefix}b{layer}"])
        if layer < last:
            h = relu(h)
            if train and spec.dropout > 0.0:
                h = dropout(h, spec.dropout, rng)
        elif spec.final_activation == "sigmoid":
            h = sigmoid(h)
    return h


def mlp_forward(spec: MlpSpec, params, x, mode: str = "eval", rng=None):
    """Evaluate an MLP on one input vector.

    In ``train`` mode, returns ``(output, tape)`` where the tape records the
    pass for :func:`backward`; eval mode returns the output alone and is
    deterministic given the parameters.
    """
    xv = np.asarray(x, dtype=np.float64)
    if xv.shape != (spec.input_width,):
        raise ShapeError(f"input shape {xv.shape} does not match width {spec.input_width}")
    if mode == "eval":
        return mlp_apply(xv, spec, params)
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    if spec.dropout > 0.0 and rng is None:
        raise ConfigError("training with dropout requires a seeded generator")
    tape = Tape()
    leaves = {name: tape.leaf(value, name=name) for name, value in params.items()}
    out = mlp_apply(xv, spec, leaves, train=True, rng=rng)
    return out.value, tape


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Moment accumulators shaped like the parameter set, plus the step count."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, learning_rate: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(state: AdamState, params: dict, grads: dict):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if set(grads) != set(params):
        raise ShapeError("gradient keys do not match parameter keys")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[key] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[key] = m
        new_v[key] = v
    new_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step=t,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state
