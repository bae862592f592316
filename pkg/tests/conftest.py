"""Shared fixtures: tiny model builders, random instances, gradient checking."""

import numpy as np
import pytest

from setseries.attention import AttentionSpec
from setseries.data import Observation, TimeSeriesSet
from setseries.encoding import TimeEncodingSpec
from setseries.model import ModelSpec, init_params
from setseries.numerics import MlpSpec
from setseries.setfunction import SetFunctionSpec


def make_tiny_model(channels=2, tau=2, latent=3, heads=2, dot_dim=3,
                    attention=True, aggregation="mean", encoder_dropout=0.0,
                    attention_dropout=0.0, classifier_dropout=0.0,
                    max_timescale=10.0):
    """Small but complete model (encoder, summary, keys, queries, classifier)."""
    enc = TimeEncodingSpec(dims=tau, max_timescale=max_timescale)
    feature_width = tau + 1 + channels
    embed = MlpSpec(widths=(feature_width, 4, latent), dropout=encoder_dropout)
    attn = None
    classifier_input = latent
    if attention:
        summary = SetFunctionSpec(
            embed=MlpSpec(widths=(feature_width, 4, 4)),
            classifier=None,
            aggregation="mean",
        )
        attn = AttentionSpec(heads=heads, dot_dim=dot_dim, summary=summary,
                             dropout=attention_dropout)
        classifier_input = heads * latent
    classifier = MlpSpec(widths=(classifier_input, 4, 1), dropout=classifier_dropout)
    set_function = SetFunctionSpec(embed=embed, classifier=classifier, aggregation=aggregation)
    return ModelSpec(encoding=enc, channels=channels, set_function=set_function, attention=attn)


def random_params(model, seed, query_scale=0.5):
    """Initialized parameters with a non-zero query so attention is active."""
    rng = np.random.default_rng(seed)
    params = init_params(model, rng)
    if model.attention is not None and query_scale:
        params["attention.query"] = rng.normal(0.0, query_scale,
                                               params["attention.query"].shape)
    return params


def random_instance(rng, channels=2, min_obs=2, max_obs=8, horizon=10.0, label=None):
    """Random valid instance with unique (time, modality) pairs."""
    m = int(rng.integers(min_obs, max_obs + 1))
    seen = set()
    obs = []
    while len(obs) < m:
        t = float(np.round(rng.uniform(0.0, horizon), 6))
        c = int(rng.integers(1, channels + 1))
        if (t, c) in seen:
            continue
        seen.add((t, c))
        obs.append(Observation(t, float(rng.normal()), c))
    if label is None:
        label = int(rng.integers(1, 3))
    return TimeSeriesSet(id=f"r{rng.integers(1e9)}", observations=tuple(obs), label=label)


def fd_gradient(loss_fn, params, step=1e-5):
    """Central-difference gradients of a scalar function over a parameter dict."""
    grads = {}
    for key, value in params.items():
        g = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            perturbed = {k: v.copy() for k, v in params.items()}
            perturbed[key][idx] = value[idx] + step
            up = loss_fn(perturbed)
            perturbed[key][idx] = value[idx] - step
            down = loss_fn(perturbed)
            g[idx] = (up - down) / (2.0 * step)
        grads[key] = g
    return grads


def max_gradient_error(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Largest violation of |a - n| <= atol + rtol * max(|a|, |n|), as a ratio."""
    worst = 0.0
    for key in analytic:
        a, n = analytic[key], numeric[key]
        tol = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        worst = max(worst, float((np.abs(a - n) / tol).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
