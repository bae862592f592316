"""Model assembly: featurization plus either plain pooling or attention heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionSpec,
    AttentionTrace,
    attention_forward_core,
    attention_weights_core,
    init_attention_params,
)
from .data import TimeSeriesSet
from .encoding import TimeEncodingSpec, feature_matrix
from .errors import ConfigError, ShapeError
from .numerics import Tape, backward, binary_cross_entropy, mlp_apply, value_of
from .setfunction import SetFunctionSpec, apply_set_function, init_set_function_params


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to run the classifier on featurized observation sets."""

    encoding: TimeEncodingSpec
    channels: int
    set_function: SetFunctionSpec
    attention: AttentionSpec | None = None

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("the model needs at least one observable channel")
        if self.set_function.classifier is None:
            raise ConfigError("the top-level set function needs a classifier head")
        fw = self.feature_width
        if self.set_function.embed.input_width != fw:
            raise ConfigError(
                f"embedding input width {self.set_function.embed.input_width} != feature width {fw}"
            )
        expected = self.set_function.latent_width
        if self.attention is not None:
            if self.attention.summary.embed.input_width != fw:
                raise ConfigError("summary network input width does not match the feature width")
            expected = self.attention.heads * self.set_function.latent_width
        if self.set_function.classifier.input_width != expected:
            raise ConfigError(
                f"classifier input width {self.set_function.classifier.input_width} != {expected}"
            )

    @property
    def feature_width(self) -> int:
        return self.encoding.dims + 1 + self.channels


def init_params(model: ModelSpec, rng) -> dict:
    """All trainable weights, keyed by role; insertion order is deterministic."""
    params = init_set_function_params(model.set_function, rng)
    if model.attention is not None:
        params.update(init_attention_params(model.attention, model.feature_width, rng))
    return params


def features(series: TimeSeriesSet, model: ModelSpec) -> np.ndarray:
    """Featurize an instance in canonical (time, modality) order."""
    return feature_matrix(series.sorted_observations(), model.encoding, model.channels)


def _forward_core(x, params, model: ModelSpec, train: bool = False, rng=None):
    if model.attention is not None:
        rstar, weights = attention_forward_core(
            x, model.set_function.embed, params, model.attention, train=train, rng=rng
        )
        logits = mlp_apply(rstar, model.set_function.classifier, params,
                           prefix="classifier.", train=train, rng=rng)
        return logits, weights
    logits = apply_set_function(x, model.set_function, params, train=train, rng=rng)
    return logits, None


def forward(series: TimeSeriesSet, params: dict, model: ModelSpec) -> np.ndarray:
    """Deterministic eval-mode logits for one instance."""
    logits, _ = _forward_core(features(series, model), params, model)
    return logits


def forward_with_trace(series: TimeSeriesSet, params: dict, model: ModelSpec):
    """Eval-mode logits plus the attention trace (attention models only)."""
    if model.attention is None:
        raise ConfigError("attention traces require an attention model")
    x = features(series, model)
    logits, weights = _forward_core(x, params, model)
    trace = AttentionTrace(series.sorted_observations(), weights)
    return logits, trace


def attention_weights(series: TimeSeriesSet, params: dict, model: ModelSpec) -> AttentionTrace:
    """Per-head, per-observation weights for one instance."""
    if model.attention is None:
        raise ConfigError("attention weights require an attention model")
    x = features(series, model)
    summary = apply_set_function(x, model.attention.summary, params, prefix="summary.")
    weights = attention_weights_core(x, summary, params, model.attention)
    return AttentionTrace(series.sorted_observations(), weights)


def attend_aggregate(series: TimeSeriesSet, params: dict, model: ModelSpec) -> np.ndarray:
    """Concatenated per-head representations r* of length heads * latent width."""
    if model.attention is None:
        raise ConfigError("attend_aggregate requires an attention model")
    rstar, _ = attention_forward_core(
        features(series, model), model.set_function.embed, params, model.attention
    )
    return rstar


def binary_target(label: int) -> float:
    """Class 1 is the positive class of a binary task."""
    return 1.0 if label == 1 else 0.0


def loss_tape(series: TimeSeriesSet, target: float, params: dict, model: ModelSpec,
              train: bool = True, rng=None):
    """Record a full forward pass ending in the BCE loss; returns (tape, loss)."""
    x = features(series, model)
    tape = Tape()
    leaves = {name: tape.leaf(v, name=name) for name, v in params.items()}
    logits, _ = _forward_core(x, leaves, model, train=train, rng=rng)
    if value_of(logits).shape != (1,):
        raise ShapeError("binary loss expects a single-logit classifier head")
    loss = binary_cross_entropy(logits, target)
    return tape, float(value_of(loss)[0])


def loss_gradient(series: TimeSeriesSet, label: int, params: dict, model: ModelSpec,
                  train: bool = False, rng=None):
    """Loss and parameter gradients for one labeled instance.

    ``train=False`` skips dropout so the result is deterministic, which is
    what gradient checking needs.
    """
    tape, loss = loss_tape(series, binary_target(label), params, model, train=train, rng=rng)
    grads = backward(tape, np.ones(1))
    return loss, grads
