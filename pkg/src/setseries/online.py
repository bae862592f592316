"""Streaming prefix prediction with O(1) per-event accumulator updates.

Every key logit splits into a term from the set summary, shared by all
elements of the prefix, plus a term that depends only on the element itself.
The shared term cancels inside each head's softmax, so the running
numerator/denominator pair only has to track the per-element part; that keeps
ingestion O(1) per head while staying exactly equivalent to evaluating the
full model on the prefix set.  Running-max rescaling keeps the exponentials
finite for arbitrarily spread logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import KEY_WEIGHTS, QUERY, AttentionTrace
from .data import Observation
from .errors import ConfigError, StateError, StreamOrderError, ValidationError
from .encoding import featurize
from .model import ModelSpec
from .numerics import mlp_apply, _sigmoid_values


@dataclass
class PrefixPrediction:
    """Model output after the k-th observation of a stream."""

    time: float
    logits: np.ndarray
    score: float
    trace: AttentionTrace | None = None


@dataclass
class OnlineState:
    """Cumulative per-head accumulators for one monotone observation stream.

    The state after ingesting s_1..s_k is a pure function of those k
    observations; nothing later can influence it.  Accumulators carry
    Neumaier compensation terms, and ``max_logit`` tracks the running maximum
    used to rescale the exponentials.
    """

    params: dict
    model: ModelSpec
    element_query: np.ndarray  # (feature_width, heads): key element block folded with Q
    numerator: np.ndarray  # (heads, latent)
    numerator_comp: np.ndarray
    denominator: np.ndarray  # (heads,)
    denominator_comp: np.ndarray
    max_logit: np.ndarray  # (heads,)
    count: int = 0
    last_time: float = -math.inf
    modalities_at_last_time: set = field(default_factory=set)
    ingested: list = field(default_factory=list)  # observations, arrival order
    element_logits: list = field(default_factory=list)  # per-element (heads,) rows
    summary_policy: str = "prefix"

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "count": self.count,
            "last_time": self.last_time,
            "modalities_at_last_time": sorted(self.modalities_at_last_time),
            "numerator": self.numerator.tolist(),
            "numerator_comp": self.numerator_comp.tolist(),
            "denominator": self.denominator.tolist(),
            "denominator_comp": self.denominator_comp.tolist(),
            "max_logit": self.max_logit.tolist(),
            "ingested": [[o.time, o.value, o.modality] for o in self.ingested],
            "element_logits": [row.tolist() for row in self.element_logits],
            "summary_policy": self.summary_policy,
        }


def _fold_element_query(params: dict, model: ModelSpec) -> np.ndarray:
    """Element rows of the key projection contracted with the queries.

    The summary rows of the key matrix shift all logits of a prefix equally
    and therefore never change the softmax weights, so they are not needed
    here.
    """
    spec = model.attention
    block = params[KEY_WEIGHTS][spec.summary_width :, :]
    per_head = block.reshape(model.feature_width, spec.heads, spec.dot_dim)
    return np.einsum("fhd,hd->fh", per_head, params[QUERY]) / math.sqrt(spec.dot_dim)


def online_init(params: dict, model: ModelSpec) -> OnlineState:
    """Zeroed accumulators bound to a frozen parameter set."""
    if model.attention is None:
        raise ConfigError("online prediction requires an attention model")
    heads = model.attention.heads
    latent = model.set_function.latent_width
    return OnlineState(
        params=params,
        model=model,
        element_query=_fold_element_query(params, model),
        numerator=np.zeros((heads, latent)),
        numerator_comp=np.zeros((heads, latent)),
        denominator=np.zeros(heads),
        denominator_comp=np.zeros(heads),
        max_logit=np.full(heads, -math.inf),
    )


def online_restore(snapshot: dict, params: dict, model: ModelSpec) -> OnlineState:
    """Rebuild a state from :meth:`OnlineState.to_dict` output."""
    if snapshot.get("format_version") != 1:
        raise ValidationError(f"unsupported online state version {snapshot.get('format_version')}")
    state = online_init(params, model)
    state.count = int(snapshot["count"])
    state.last_time = float(snapshot["last_time"])
    state.modalities_at_last_time = set(snapshot["modalities_at_last_time"])
    state.numerator = np.array(snapshot["numerator"], dtype=np.float64)
    state.numerator_comp = np.array(snapshot["numerator_comp"], dtype=np.float64)
    state.denominator = np.array(snapshot["denominator"], dtype=np.float64)
    state.denominator_comp = np.array(snapshot["denominator_comp"], dtype=np.float64)
    state.max_logit = np.array(snapshot["max_logit"], dtype=np.float64)
    state.ingested = [Observation(t, v, int(m)) for t, v, m in snapshot["ingested"]]
    state.element_logits = [np.array(row, dtype=np.float64) for row in snapshot["element_logits"]]
    state.summary_policy = snapshot.get("summary_policy", "prefix")
    return state


def _compensated_accumulate(total, comp, delta):
    t = total + delta
    comp += np.where(np.abs(total) >= np.abs(delta), (total - t) + delta, (delta - t) + total)
    return t, comp


def online_ingest(state: OnlineState, obs: Observation) -> OnlineState:
    """Fold one observation (already normalized) into the accumulators."""
    if obs.time < state.last_time:
        raise StreamOrderError(
            f"event at t={obs.time} arrived after t={state.last_time}; the stream must be monotone"
        )
    if obs.time == state.last_time and obs.modality in state.modalities_at_last_time:
        raise StreamOrderError(
            f"duplicate observation for modality {obs.modality} at t={obs.time}"
        )
    model, params = state.model, state.params
    x = featurize(obs, model.encoding, model.channels)
    h = mlp_apply(x[None, :], model.set_function.embed, params, prefix="embed.")[0]
    v = x @ state.element_query  # (heads,)

    new_max = np.maximum(state.max_logit, v)
    rescale = np.exp(state.max_logit - new_max)  # 0.0 before the first event
    weight = np.exp(v - new_max)

    state.numerator *= rescale[:, None]
    state.numerator_comp *= rescale[:, None]
    state.numerator, state.numerator_comp = _compensated_accumulate(
        state.numerator, state.numerator_comp, weight[:, None] * h[None, :]
    )
    state.denominator *= rescale
    state.denominator_comp *= rescale
    state.denominator, state.denominator_comp = _compensated_accumulate(
        state.denominator, state.denominator_comp, weight
    )
    state.max_logit = new_max

    if obs.time > state.last_time:
        state.last_time = obs.time
        state.modalities_at_last_time = {obs.modality}
    else:
        state.modalities_at_last_time.add(obs.modality)
    state.count += 1
    state.ingested.append(obs)
    state.element_logits.append(v)
    return state


def online_predict(state: OnlineState, include_trace: bool = False) -> PrefixPrediction:
    """Logits for the prefix ingested so far; equals the batch model on that set."""
    if state.count == 0:
        raise StateError("cannot predict before any observation was ingested")
    model, params = state.model, state.params
    numer = state.numerator + state.numerator_comp
    denom = state.denominator + state.denominator_comp
    rstar = (numer / denom[:, None]).reshape(-1)
    logits = mlp_apply(rstar, model.set_function.classifier, params, prefix="classifier.")
    score = float(_sigmoid_values(logits)[0]) if logits.shape == (1,) else float("nan")
    trace = None
    if include_trace:
        stacked = np.vstack(state.element_logits)
        weights = np.exp(stacked - state.max_logit[None, :]) / denom[None, :]
        trace = AttentionTrace(tuple(state.ingested), weights)
    return PrefixPrediction(time=state.last_time, logits=logits, score=score, trace=trace)
