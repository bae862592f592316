"""Streaming prefix prediction: equivalence with batch evaluation, no leakage."""

import json

import numpy as np
import pytest

from setseries.data import Observation, TimeSeriesSet
from setseries.errors import ConfigError, StateError, StreamOrderError
from setseries.model import attention_weights, forward
from setseries.online import online_ingest, online_init, online_predict, online_restore

from conftest import make_tiny_model, random_instance, random_params


def _stream(rng, channels=2, n=10, horizon=20.0):
    """Monotone event stream with unique (t, m)."""
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    obs = []
    seen = set()
    for t in times:
        c = int(rng.integers(1, channels + 1))
        while (float(t), c) in seen:
            t = t + 1e-6
        seen.add((float(t), c))
        obs.append(Observation(float(t), float(rng.normal()), c))
    return obs


@pytest.fixture
def setup(rng):
    model = make_tiny_model()
    params = random_params(model, 21, query_scale=0.8)
    return model, params


def test_singleton_prediction_equals_batch(setup, rng):
    model, params = setup
    obs = _stream(rng, n=1)
    state = online_init(params, model)
    state = online_ingest(state, obs[0])
    pred = online_predict(state)
    batch = forward(TimeSeriesSet(id="s", observations=tuple(obs)), params, model)
    np.testing.assert_array_equal(pred.logits, batch)


def test_two_inits_identical(setup):
    model, params = setup
    a = online_init(params, model)
    b = online_init(params, model)
    np.testing.assert_array_equal(a.numerator, b.numerator)
    np.testing.assert_array_equal(a.denominator, b.denominator)
    np.testing.assert_array_equal(a.max_logit, b.max_logit)
    assert a.count == b.count == 0


def test_predict_before_ingest_raises(setup):
    model, params = setup
    state = online_init(params, model)
    with pytest.raises(StateError):
        online_predict(state)


def test_plain_model_rejected(rng):
    model = make_tiny_model(attention=False)
    params = random_params(model, 0)
    with pytest.raises(ConfigError):
        online_init(params, model)


def test_non_monotone_stream_rejected(setup):
    model, params = setup
    state = online_init(params, model)
    state = online_ingest(state, Observation(2.0, 0.1, 1))
    with pytest.raises(StreamOrderError):
        online_ingest(state, Observation(1.0, 0.2, 1))


def test_duplicate_time_modality_rejected(setup):
    model, params = setup
    state = online_init(params, model)
    state = online_ingest(state, Observation(2.0, 0.1, 1))
    state = online_ingest(state, Observation(2.0, 0.3, 2))  # same time, other channel: fine
    with pytest.raises(StreamOrderError):
        online_ingest(state, Observation(2.0, 0.2, 1))


def test_equal_logit_ingest_adds_one_to_denominator(setup):
    model, params = setup
    state = online_init(params, model)
    # Two observations engineered to share the same featurization except time,
    # with the element query zeroed so every logit is 0 = running max.
    state.element_query = np.zeros_like(state.element_query)
    state = online_ingest(state, Observation(1.0, 0.5, 1))
    before = state.denominator.copy()
    state = online_ingest(state, Observation(2.0, -0.3, 2))
    np.testing.assert_array_equal(state.denominator, before + 1.0)


def test_extreme_logits_do_not_overflow(setup):
    model, params = setup
    state = online_init(params, model)
    state.element_query = np.zeros_like(state.element_query)
    # Force the per-element logits directly: first huge, then tiny.
    state.element_query[model.encoding.dims, :] = 1.0  # logit = value
    state = online_ingest(state, Observation(0.5, 1000.0, 1))
    state = online_ingest(state, Observation(1.5, 0.0, 2))
    pred = online_predict(state, include_trace=True)
    assert np.all(np.isfinite(pred.logits))
    weights = pred.trace.weights
    from setseries.numerics import softmax_stable

    np.testing.assert_allclose(weights[:, 0], softmax_stable([1000.0, 0.0]), rtol=0, atol=1e-15)


def test_prefix_weights_match_batch(setup, rng):
    model, params = setup
    obs = _stream(rng, n=50)
    state = online_init(params, model)
    for k, o in enumerate(obs, start=1):
        state = online_ingest(state, o)
        pred = online_predict(state, include_trace=True)
        prefix = TimeSeriesSet(id="p", observations=tuple(obs[:k]))
        batch_trace = attention_weights(prefix, params, model)
        # align by observation identity: batch trace is in canonical order
        order = {(o2.time, o2.modality): i for i, o2 in enumerate(batch_trace.observations)}
        idx = [order[(o2.time, o2.modality)] for o2 in pred.trace.observations]
        np.testing.assert_allclose(pred.trace.weights, batch_trace.weights[idx],
                                   rtol=0, atol=1e-9)


def test_full_stream_prediction_matches_batch(setup, rng):
    model, params = setup
    obs = _stream(rng, n=30)
    state = online_init(params, model)
    for o in obs:
        state = online_ingest(state, o)
    pred = online_predict(state)
    batch = forward(TimeSeriesSet(id="f", observations=tuple(obs)), params, model)
    np.testing.assert_allclose(pred.logits, batch, rtol=0, atol=1e-7)


def test_every_prefix_matches_independent_batch_runs(setup, rng):
    model, params = setup
    obs = _stream(rng, n=30)
    state = online_init(params, model)
    for k, o in enumerate(obs, start=1):
        state = online_ingest(state, o)
        pred = online_predict(state)
        batch = forward(TimeSeriesSet(id="p", observations=tuple(obs[:k])), params, model)
        np.testing.assert_allclose(pred.logits, batch, rtol=0, atol=1e-7)


def test_future_mutation_leaves_prefix_predictions_bit_identical(setup, rng):
    model, params = setup
    obs = _stream(rng, n=12)
    k = 6

    def run_prefix(events):
        state = online_init(params, model)
        outputs = []
        for o in events[:k]:
            state = online_ingest(state, o)
            outputs.append(online_predict(state).logits.copy())
        return outputs

    base = run_prefix(obs)
    mutated = list(obs)
    for j in range(k, len(obs)):
        mutated[j] = Observation(obs[j].time, obs[j].value + 100.0, obs[j].modality)
    after = run_prefix(mutated)
    for a, b in zip(base, after):
        np.testing.assert_array_equal(a, b)


def test_state_serialization_round_trip(setup, rng):
    model, params = setup
    obs = _stream(rng, n=8)
    state = online_init(params, model)
    for o in obs[:5]:
        state = online_ingest(state, o)
    snapshot = json.loads(json.dumps(state.to_dict()))
    restored = online_restore(snapshot, params, model)
    for o in obs[5:]:
        state = online_ingest(state, o)
        restored = online_ingest(restored, o)
        np.testing.assert_array_equal(
            online_predict(state).logits, online_predict(restored).logits
        )


def test_ingest_cost_flat_in_stream_length(setup):
    import time

    model, params = setup
    state = online_init(params, model)
    t = 0.0

    def ingest_block(n):
        nonlocal t, state
        start = time.perf_counter()
        for i in range(n):
            t += 0.001
            state = online_ingest(state, Observation(t, 0.1, 1 + (i % 2)))
        return (time.perf_counter() - start) / n

    ingest_block(200)  # warm up
    early = min(ingest_block(200) for _ in range(3))
    for _ in range(20):
        ingest_block(200)  # grow the stream to several thousand events
    late = min(ingest_block(200) for _ in range(3))
    assert late < 2.0 * early, (early, late)
