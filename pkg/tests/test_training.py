"""Loss, early stopping, training loop determinism, checkpoints, hypersearch."""

import dataclasses
import json
import math

import numpy as np
import pytest

from setseries.data import (
    SyntheticSpec,
    fit_normalization,
    generate_synthetic,
    normalize,
    split_stratified,
)
from setseries.errors import CompatibilityError, ConfigError, ValidationError
from setseries.model import forward
from setseries.training import (
    Checkpoint,
    EarlyStopper,
    SearchSpace,
    TrainConfig,
    bce_loss,
    build_model,
    evaluate,
    hypersearch,
    load_checkpoint,
    load_config,
    sample_config,
    save_checkpoint,
    save_config,
    save_log,
    train,
)

TINY = TrainConfig(
    learning_rate=0.003,
    batch_size=32,
    max_epochs=8,
    patience=30,
    seed=11,
    encoder_layers=2,
    encoder_width=16,
    encoder_dropout=0.1,
    latent_width=8,
    summary_layers=1,
    summary_width=8,
    summary_latent_width=8,
    dot_dim=8,
    heads=2,
    attention_dropout=0.1,
    classifier_layers=1,
    classifier_width=16,
    positional_dims=4,
    max_timescale=100.0,
)


def make_splits(n=240, amplitude=3.0, seed=3, mean_obs=12.0):
    ds = generate_synthetic(
        SyntheticSpec(n_instances=n, channels=3, prevalence=0.25,
                      mean_observations=mean_obs, amplitude=amplitude),
        seed=seed,
    )
    train_split, val_split = split_stratified(ds, (0.75, 0.25), seed=1)
    meta = fit_normalization(train_split)
    return normalize(train_split, meta), normalize(val_split, meta)


# ---------------------------------------------------------------------------
# loss


def test_bce_at_zero_logit():
    loss, grad = bce_loss(0.0, 1)
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)
    assert grad == -0.5
    loss, grad = bce_loss(0.0, 0)
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)
    assert grad == 0.5


def test_bce_large_logit_no_overflow():
    loss, grad = bce_loss(100.0, 0)
    assert loss == pytest.approx(100.0, abs=1e-10)  # softplus(100) ~ 100
    assert grad == pytest.approx(1.0, abs=1e-12)
    loss, _ = bce_loss(-100.0, 1)
    assert loss == pytest.approx(100.0, abs=1e-10)


def test_bce_validation():
    with pytest.raises(ValidationError):
        bce_loss(float("inf"), 1)
    with pytest.raises(ValidationError):
        bce_loss(0.0, 2)


# ---------------------------------------------------------------------------
# early stopping


def test_early_stopper_monotone_then_flat_trace():
    # Rises for 5 epochs, then flat: must stop exactly `patience` epochs later.
    patience = 7
    stopper = EarlyStopper(patience=patience)
    trace = [0.1, 0.2, 0.3, 0.4, 0.5] + [0.5] * 40
    stopped_at = None
    for epoch, value in enumerate(trace):
        stopper.update(epoch, value)
        if stopper.should_stop(epoch):
            stopped_at = epoch
            break
    assert stopper.best_epoch == 4
    assert stopped_at == 4 + patience


def test_early_stopper_ties_do_not_count_as_improvement():
    stopper = EarlyStopper(patience=2)
    assert stopper.update(0, 0.5)
    assert not stopper.update(1, 0.5)
    assert not stopper.should_stop(1)
    assert stopper.should_stop(2)


# ---------------------------------------------------------------------------
# config


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "c.json"
    save_config(TINY, path)
    assert load_config(path) == TINY


def test_config_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"learning_rate": 0.1, "bogus": 3}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(monitor="loss")
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(aggregation="median")


def test_default_config_mirrors_selected_hyperparameters():
    config = TrainConfig()
    assert config.learning_rate == 0.00081
    assert config.batch_size == 512
    assert (config.encoder_layers, config.encoder_width, config.encoder_dropout) == (4, 128, 0.2)
    assert (config.summary_layers, config.summary_width, config.summary_latent_width) == (2, 64, 128)
    assert (config.dot_dim, config.heads, config.attention_dropout) == (128, 4, 0.5)
    assert (config.classifier_layers, config.classifier_width, config.classifier_dropout) == (2, 512, 0.0)
    assert config.latent_width == 32
    assert (config.max_timescale, config.positional_dims) == (100.0, 4)
    assert config.patience == 30
    assert config.monitor == "auprc"


# ---------------------------------------------------------------------------
# training loop


def test_training_learns_separable_signal():
    train_split, val_split = make_splits(n=320, amplitude=3.0)
    with pytest.warns(UserWarning):  # tiny latent width < max set size
        ckpt, log = train(train_split, val_split, TINY)
    assert ckpt is not None
    best_from_log = max(r["monitor_value"] for r in log)
    assert ckpt.best_value == best_from_log
    assert log[-1]["val_auroc"] >= 0.85 or ckpt.best_value >= 0.6


def test_training_is_deterministic():
    train_split, val_split = make_splits(n=160, mean_obs=8.0)
    config = dataclasses.replace(TINY, max_epochs=3)
    with pytest.warns(UserWarning):
        _, log_a = train(train_split, val_split, config)
    with pytest.warns(UserWarning):
        _, log_b = train(train_split, val_split, config)
    assert log_a == log_b


def test_training_rejects_single_class():
    train_split, val_split = make_splits(n=160, mean_obs=8.0)
    only_neg = [ts for ts in train_split.instances if ts.label == 2]
    from setseries.data import Dataset

    bad = Dataset(instances=tuple(only_neg), meta=train_split.meta)
    with pytest.raises(ValidationError):
        train(bad, val_split, TINY)


def test_training_aborts_on_divergence():
    from setseries.errors import DivergenceError

    train_split, val_split = make_splits(n=160, mean_obs=8.0)
    config = dataclasses.replace(TINY, learning_rate=1e300, max_epochs=3)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(DivergenceError), pytest.warns(UserWarning):
            train(train_split, val_split, config)


def test_zero_signal_training_stays_near_chance():
    train_split, val_split = make_splits(n=200, amplitude=0.0, mean_obs=8.0)
    config = dataclasses.replace(TINY, patience=3, max_epochs=40)
    with pytest.warns(UserWarning):
        ckpt, log = train(train_split, val_split, config)
    assert len(log) < 40  # early stopping triggered
    assert log[-1]["epoch"] - ckpt.epoch == config.patience
    best_auroc = max(r["val_auroc"] for r in log)
    assert 0.35 <= best_auroc <= 0.75  # wide band: the val split is small


# ---------------------------------------------------------------------------
# checkpoints


def _trained_pair():
    train_split, val_split = make_splits(n=160, mean_obs=8.0)
    config = dataclasses.replace(TINY, max_epochs=2)
    with pytest.warns(UserWarning):
        ckpt, log = train(train_split, val_split, config)
    return ckpt, log, train_split, val_split


def test_checkpoint_round_trip_bit_identical_predictions(tmp_path):
    ckpt, _, train_split, _ = _trained_pair()
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.config == ckpt.config
    assert back.meta == ckpt.meta
    model = ckpt.model()
    for ts in train_split.instances[:10]:
        np.testing.assert_array_equal(
            forward(ts, ckpt.params, model), forward(ts, back.params, model)
        )


def test_checkpoint_save_is_byte_stable(tmp_path):
    ckpt, _, _, _ = _trained_pair()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, a)
    save_checkpoint(ckpt, b)
    assert a.read_bytes() == b.read_bytes()


def test_evaluate_checks_fingerprint(tmp_path):
    ckpt, _, train_split, val_split = _trained_pair()
    report = evaluate(val_split, ckpt)
    assert 0.0 <= report.auroc <= 1.0
    assert report.n == len(val_split)
    # a dataset normalized with different statistics must be rejected
    other_meta = fit_normalization(val_split)
    mismatched = normalize(val_split, other_meta)
    with pytest.raises(CompatibilityError):
        evaluate(mismatched, ckpt)


def test_evaluate_report_round_trip(tmp_path):
    from setseries.metrics import EvalReport

    ckpt, _, _, val_split = _trained_pair()
    report = evaluate(val_split, ckpt)
    blob = json.dumps(report.to_dict())
    assert EvalReport.from_dict(json.loads(blob)) == report


def test_log_file_round_trip(tmp_path):
    _, log, _, _ = _trained_pair()
    path = tmp_path / "log.jsonl"
    save_log(log, path)
    back = [json.loads(line) for line in path.read_text().splitlines()]
    assert back == log


# ---------------------------------------------------------------------------
# hypersearch


def test_sample_config_deterministic_and_in_ranges():
    space = SearchSpace()
    base = TINY
    rng_a = np.random.default_rng(5)
    rng_b = np.random.default_rng(5)
    for _ in range(20):
        a = sample_config(space, rng_a, base)
        b = sample_config(space, rng_b, base)
        assert a == b
        assert space.layer_range[0] <= a.encoder_layers <= space.layer_range[1]
        assert a.encoder_width in space.widths
        assert a.encoder_dropout in space.dropouts
        assert a.latent_width in space.latent_widths
        assert a.attention_dropout in space.attention_dropouts
        assert space.learning_rate_range[0] <= a.learning_rate <= space.learning_rate_range[1]
        assert a.batch_size in space.batch_sizes
        assert a.positional_dims in space.positional_dims
        assert a.max_timescale in space.max_timescales
        # fixed attention architecture is inherited from the base config
        assert (a.heads, a.dot_dim) == (base.heads, base.dot_dim)
        assert (a.summary_layers, a.summary_width) == (base.summary_layers, base.summary_width)


def test_hypersearch_single_trial_equals_train():
    import warnings

    train_split, val_split = make_splits(n=120, mean_obs=6.0)
    base = dataclasses.replace(TINY, max_epochs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        results = hypersearch(train_split, val_split, base, n=1, seed=9)
        assert len(results) == 1
        config = results[0]["config"]
        ckpt, _ = train(train_split, val_split, config)
    assert ckpt.best_value == results[0]["value"]


def test_hypersearch_ranked_descending():
    import warnings

    train_split, val_split = make_splits(n=120, mean_obs=6.0)
    base = dataclasses.replace(TINY, max_epochs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        results = hypersearch(train_split, val_split, base, n=3, seed=2)
    values = [r["value"] for r in results]
    assert values == sorted(values, reverse=True)
