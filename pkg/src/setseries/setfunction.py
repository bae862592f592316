"""Sum-decomposed set functions: per-element embedding, pooling, classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .numerics import (
    MlpSpec,
    init_mlp_params,
    max_rows,
    mean_rows,
    mlp_apply,
    sum_rows,
)

AGGREGATIONS = ("mean", "sum", "max")


@dataclass(frozen=True)
class SetFunctionSpec:
    """g(aggregate_j embed(x_j)): permutation-invariant map from row sets to a vector.

    ``classifier`` may be None, in which case the aggregated embedding is the
    output (used for the attention summary function).
    """

    embed: MlpSpec
    classifier: MlpSpec | None = None
    aggregation: str = "mean"

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")

    @property
    def latent_width(self) -> int:
        """Width of the embedding space the aggregation acts on."""
        return self.embed.output_width

    @property
    def output_width(self) -> int:
        return self.latent_width if self.classifier is None else self.classifier.output_width


def aggregate(embeddings, kind: str):
    """Elementwise reduction of a non-empty collection of equal-length vectors."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValidationError("aggregation requires a non-empty list of vectors")
    if kind == "mean":
        return mean_rows(arr)
    if kind == "sum":
        return sum_rows(arr)
    if kind == "max":
        return max_rows(arr)
    raise ConfigError(f"unknown aggregation {kind!r}")


def _pool(h, kind: str):
    if kind == "mean":
        return mean_rows(h)
    if kind == "sum":
        return sum_rows(h)
    return max_rows(h)


def init_set_function_params(spec: SetFunctionSpec, rng, prefix: str = "") -> dict:
    params = init_mlp_params(spec.embed, rng, prefix=prefix + "embed.")
    if spec.classifier is not None:
        params.update(init_mlp_params(spec.classifier, rng, prefix=prefix + "classifier."))
    return params


def apply_set_function(x, spec: SetFunctionSpec, params, prefix: str = "",
                       train: bool = False, rng=None):
    """Run the set function on an (M, input_width) feature matrix.

    Accepts tape nodes or plain arrays; the pooled reduction uses compensated
    summation so element order only matters at the last bit.
    """
    h = mlp_apply(x, spec.embed, params, prefix=prefix + "embed.", train=train, rng=rng)
    pooled = _pool(h, spec.aggregation)
    if spec.classifier is None:
        return pooled
    return mlp_apply(pooled, spec.classifier, params, prefix=prefix + "classifier.",
                     train=train, rng=rng)
