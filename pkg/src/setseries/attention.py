"""Weighted-mean aggregation: per-element keys conditioned on a set summary,
learned per-head queries, softmax weights, concatenated head outputs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import TimeSeriesSet, Observation
from .errors import ConfigError, ShapeError, ValidationError
from .numerics import (
    concat_cols,
    broadcast_rows,
    divide_cols,
    dot_heads,
    init_mlp_params,
    matmul,
    mlp_apply,
    mul,
    reshape,
    scale,
    softmax_rows,
    sum_rows,
    value_of,
    weighted_sum_rows,
)
from .setfunction import SetFunctionSpec, apply_set_function, init_set_function_params

KEY_WEIGHTS = "attention.keys"
QUERY = "attention.query"


@dataclass(frozen=True)
class AttentionSpec:
    """Multi-head scaled dot-product weights over set elements.

    Each element's key projects [summary(S), element] into the dot-product
    space; the query matrix starts at zero so training begins from an
    unweighted mean.  Dropout, when enabled, zeroes weights and renormalizes
    each head to sum one.
    """

    heads: int
    dot_dim: int
    summary: SetFunctionSpec
    dropout: float = 0.0

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError(f"need at least one head, got {self.heads}")
        if self.dot_dim < 1:
            raise ConfigError(f"dot-product dimension must be >= 1, got {self.dot_dim}")
        if self.summary.aggregation != "mean":
            raise ConfigError("the summary set function always uses mean aggregation")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"attention dropout must be in [0, 1), got {self.dropout}")

    @property
    def summary_width(self) -> int:
        return self.summary.output_width

    def key_input_width(self, feature_width: int) -> int:
        return self.summary_width + feature_width


@dataclass
class AttentionTrace:
    """Per-head weights aligned to the canonically ordered observations."""

    observations: tuple[Observation, ...]
    weights: np.ndarray  # (M, heads)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape[0] != len(self.observations):
            raise ShapeError("one weight row per observation required")


def init_attention_params(spec: AttentionSpec, feature_width: int, rng) -> dict:
    """Glorot keys per head; the query matrix is all zeros by construction."""
    key_in = spec.key_input_width(feature_width)
    bound = math.sqrt(6.0 / (key_in + spec.dot_dim))
    params = init_set_function_params(spec.summary, rng, prefix="summary.")
    params[KEY_WEIGHTS] = rng.uniform(-bound, bound, size=(key_in, spec.heads * spec.dot_dim))
    params[QUERY] = np.zeros((spec.heads, spec.dot_dim))
    return params


def _renormalized_dropout(a, rate: float, rng):
    av = value_of(a)
    keep = rng.random(av.shape) >= rate
    # A fully dropped head has nothing left to renormalize; keep it intact.
    dead = ~keep.any(axis=0)
    if dead.any():
        keep = keep.copy()
        keep[:, dead] = True
    masked = mul(a, keep.astype(np.float64))
    return divide_cols(masked, sum_rows(masked))


def attention_weights_core(x, summary, params, spec: AttentionSpec,
                           train: bool = False, rng=None):
    """Per-head softmax weights for featurized rows x given the set summary."""
    m = value_of(x).shape[0]
    cat = concat_cols([broadcast_rows(summary, m), x])
    keys = reshape(matmul(cat, params[KEY_WEIGHTS]), (m, spec.heads, spec.dot_dim))
    logits = scale(dot_heads(keys, params[QUERY]), 1.0 / math.sqrt(spec.dot_dim))
    weights = softmax_rows(logits)
    if train and spec.dropout > 0.0:
        weights = _renormalized_dropout(weights, spec.dropout, rng)
    return weights


def attention_forward_core(x, embed_spec, params, spec: AttentionSpec,
                           train: bool = False, rng=None):
    """Concatenated head outputs r* plus the weights used to build them."""
    h = mlp_apply(x, embed_spec, params, prefix="embed.", train=train, rng=rng)
    summary = apply_set_function(x, spec.summary, params, prefix="summary.",
                                 train=train, rng=rng)
    weights = attention_weights_core(x, summary, params, spec, train=train, rng=rng)
    per_head = weighted_sum_rows(weights, h)  # (heads, latent)
    rstar = reshape(per_head, (spec.heads * value_of(h).shape[1],))
    return rstar, weights


def export_attention(path, entries) -> None:
    """Write per-(observation, head) weight rows as CSV.

    ``entries`` is an iterable of (series, trace) pairs; rows carry the
    instance id, observation fields, 1-based head index, and the weight
    printed with ten significant digits (the least precision at which the
    re-read weights of a head are guaranteed to sum to one within 1e-9).
    """
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance_id", "t", "value", "modality", "head", "weight"])
            for series, trace in entries:
                if trace.weights.shape[0] != len(series.observations):
                    raise ValidationError(
                        f"trace does not align with instance {series.id!r}"
                    )
                for row, obs in enumerate(trace.observations):
                    for head in range(trace.weights.shape[1]):
                        writer.writerow([
                            series.id,
                            repr(obs.time),
                            repr(obs.value),
                            obs.modality,
                            head + 1,
                            format(trace.weights[row, head], ".10g"),
                        ])
    except OSError as exc:
        raise OSError(f"cannot write attention export to {path}: {exc}") from exc
