"""Loss, balanced-batch training loop, early stopping, checkpoints, hypersearch."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, DatasetMeta, balanced_batches
from .encoding import TimeEncodingSpec
from .errors import (
    CompatibilityError,
    ConfigError,
    DivergenceError,
    ValidationError,
)
from .metrics import EvalReport, ScoredLabels, evaluate_scores
from .model import ModelSpec, _forward_core, binary_target, features, init_params
from .numerics import (
    AdamState,
    MlpSpec,
    Tape,
    _sigmoid_values,
    adam_step,
    backward,
    binary_cross_entropy,
    init_adam,
    mlp_apply,
    require_finite,
    stack_rows,
    sum_all,
    value_of,
)
from .attention import AttentionSpec, attention_forward_core
from .setfunction import SetFunctionSpec, _pool

MONITORS = ("auprc", "balanced_accuracy")


def bce_loss(logit: float, label: int) -> tuple[float, float]:
    """Stable binary cross-entropy from a logit: softplus(x) - y*x.

    Returns (loss, gradient with respect to the logit); the gradient is
    sigmoid(logit) - label.
    """
    if not math.isfinite(logit):
        raise ValidationError(f"logit must be finite, got {logit}")
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    x = float(logit)
    loss = float(np.logaddexp(0.0, x)) - label * x
    grad = float(_sigmoid_values(np.array([x]))[0]) - label
    return loss, grad


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters plus the architecture they instantiate.

    Defaults are the selected mortality-task values: a 4x128 relu encoder
    projecting to a 32-wide embedding, a fixed 2x64 summary network with a
    128-wide output, 4 heads over a 128-dimensional dot-product space, and a
    2x512 classifier head.
    """

    learning_rate: float = 0.00081
    batch_size: int = 512
    max_epochs: int = 300
    patience: int = 30
    monitor: str = "auprc"
    threshold: float = 0.5
    seed: int = 0
    aggregation: str = "attention"  # attention | mean | sum | max
    encoder_layers: int = 4
    encoder_width: int = 128
    encoder_dropout: float = 0.2
    latent_width: int = 32
    summary_layers: int = 2
    summary_width: int = 64
    summary_latent_width: int = 128
    dot_dim: int = 128
    heads: int = 4
    attention_dropout: float = 0.5
    classifier_layers: int = 2
    classifier_width: int = 512
    classifier_dropout: float = 0.0
    positional_dims: int = 4
    max_timescale: float = 100.0

    def __post_init__(self):
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {MONITORS}, got {self.monitor!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be >= 1")
        if self.aggregation not in ("attention", "mean", "sum", "max"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(raw)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_model(config: TrainConfig, meta: DatasetMeta) -> ModelSpec:
    """Instantiate the architecture for a dataset's channel count."""
    encoding = TimeEncodingSpec(config.positional_dims, config.max_timescale)
    feature_width = encoding.dims + 1 + meta.total_channels
    embed = MlpSpec(
        widths=(feature_width,) + (config.encoder_width,) * config.encoder_layers + (config.latent_width,),
        dropout=config.encoder_dropout,
    )
    if meta.class_count != 2:
        raise ValidationError("training currently supports binary tasks only")
    attention = None
    classifier_input = config.latent_width
    if config.aggregation == "attention":
        summary = SetFunctionSpec(
            embed=MlpSpec(
                widths=(feature_width,)
                + (config.summary_width,) * config.summary_layers
                + (config.summary_latent_width,),
            ),
            classifier=None,
            aggregation="mean",
        )
        attention = AttentionSpec(
            heads=config.heads,
            dot_dim=config.dot_dim,
            summary=summary,
            dropout=config.attention_dropout,
        )
        classifier_input = config.heads * config.latent_width
    classifier = MlpSpec(
        widths=(classifier_input,) + (config.classifier_width,) * config.classifier_layers + (1,),
        dropout=config.classifier_dropout,
    )
    set_function = SetFunctionSpec(
        embed=embed,
        classifier=classifier,
        aggregation="mean" if config.aggregation == "attention" else config.aggregation,
    )
    return ModelSpec(
        encoding=encoding,
        channels=meta.total_channels,
        set_function=set_function,
        attention=attention,
    )


# ---------------------------------------------------------------------------
# Early stopping


@dataclass
class EarlyStopper:
    """Stop once the monitored value has not improved for ``patience`` epochs."""

    patience: int
    best_value: float = -math.inf
    best_epoch: int = -1

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when the value strictly improved."""
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"SSETCKPT"
_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    """Best-epoch parameters with enough context to reproduce predictions."""

    config: TrainConfig
    meta: DatasetMeta
    params: dict
    adam: AdamState
    epoch: int
    best_value: float

    def model(self) -> ModelSpec:
        return build_model(self.config, self.meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, version, JSON header, little-endian float64 payload."""
    arrays = []
    manifest = []
    offset = 0
    groups = [("param", ckpt.params), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)]
    for group, mapping in groups:
        for name, arr in mapping.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            arrays.append(a)
            manifest.append(
                {"group": group, "name": name, "shape": list(a.shape), "offset": offset}
            )
            offset += a.size
    header = {
        "format_version": _VERSION,
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta.to_dict(),
        "meta_fingerprint": ckpt.meta.fingerprint(),
        "epoch": ckpt.epoch,
        "best_value": ckpt.best_value,
        "adam": {
            "learning_rate": ckpt.adam.learning_rate,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon,
            "step": ckpt.adam.step,
        },
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValidationError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    config = TrainConfig.from_dict(header["config"])
    meta = DatasetMeta.from_dict(header["meta"])
    if meta.fingerprint() != header["meta_fingerprint"]:
        raise ValidationError("checkpoint metadata fingerprint mismatch")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    data = np.frombuffer(payload, dtype="<f8")
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.array(data[start : start + size], dtype=np.float64).reshape(entry["shape"])
        require_finite(arr, f"checkpoint array {entry['name']}")
        groups[entry["group"]][entry["name"]] = arr
    adam_info = header["adam"]
    adam = AdamState(
        learning_rate=float(adam_info["learning_rate"]),
        beta1=float(adam_info["beta1"]),
        beta2=float(adam_info["beta2"]),
        epsilon=float(adam_info["epsilon"]),
        step=int(adam_info["step"]),
        m=groups["adam_m"],
        v=groups["adam_v"],
    )
    return Checkpoint(
        config=config,
        meta=meta,
        params=groups["param"],
        adam=adam,
        epoch=int(header["epoch"]),
        best_value=float(header["best_value"]),
    )


# ---------------------------------------------------------------------------
# Training and evaluation


def _scores_for(dataset: Dataset, params: dict, model: ModelSpec,
                feature_cache: list | None = None) -> ScoredLabels:
    scores = []
    labels = []
    for i, ts in enumerate(dataset.instances):
        x = feature_cache[i] if feature_cache is not None else features(ts, model)
        logits, _ = _forward_core(x, params, model)
        scores.append(float(_sigmoid_values(logits)[0]))
        labels.append(1 if ts.label == 1 else 0)
    return ScoredLabels(tuple(scores), tuple(labels))


def evaluate(dataset: Dataset, ckpt: Checkpoint) -> EvalReport:
    """Metrics of a checkpoint on a split prepared with the same metadata."""
    if dataset.meta.fingerprint() != ckpt.meta.fingerprint():
        raise CompatibilityError(
            "dataset metadata does not match the checkpoint; normalize with the stored meta"
        )
    dataset.labels()
    model = ckpt.model()
    sl = _scores_for(dataset, ckpt.params, model)
    return evaluate_scores(sl, ckpt.config.threshold)


def train(train_data: Dataset, val_data: Dataset, config: TrainConfig):
    """Balanced-batch training with early stopping on the validation monitor.

    Returns (checkpoint of the best epoch, per-epoch log records).  Fully
    deterministic given (data, config): all randomness flows from
    ``config.seed``.
    """
    labels = train_data.labels()
    val_data.labels()
    if len(np.unique(labels)) < 2:
        raise ValidationError("training data must contain both classes")
    meta = train_data.meta
    if meta.fingerprint() != val_data.meta.fingerprint():
        raise CompatibilityError("train and validation splits carry different metadata")
    model = build_model(config, meta)

    max_set_size = max(len(ts) for ts in train_data.instances)
    if config.latent_width < max_set_size:
        warnings.warn(
            f"latent width {config.latent_width} is below the largest set size "
            f"{max_set_size}; universal representation is no longer guaranteed",
            UserWarning,
            stacklevel=2,
        )

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(model, np.random.default_rng(seeds[0]))
    adam = init_adam(params, config.learning_rate)
    plan = balanced_batches(train_data, config.batch_size, seed=seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    train_features = [features(ts, model) for ts in train_data.instances]
    train_targets = [binary_target(ts.label) for ts in train_data.instances]
    val_features = [features(ts, model) for ts in val_data.instances]

    stopper = EarlyStopper(patience=config.patience)
    best = None
    log = []
    for epoch in range(config.max_epochs):
        epoch_losses = []
        for batch in plan.epoch():
            batch_loss, grads = _batch_gradients(
                [train_features[i] for i in batch],
                [train_targets[i] for i in batch],
                params,
                model,
                dropout_rng,
            )
            if not math.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            params, adam = adam_step(adam, params, grads)
            epoch_losses.append(batch_loss)

        val_scores = _scores_for(val_data, params, model, feature_cache=val_features)
        report = evaluate_scores(val_scores, config.threshold)
        monitored = getattr(report, config.monitor)
        improved = stopper.update(epoch, monitored)
        if improved:
            best = Checkpoint(
                config=config,
                meta=meta,
                params={k: v.copy() for k, v in params.items()},
                adam=AdamState(
                    learning_rate=adam.learning_rate,
                    beta1=adam.beta1,
                    beta2=adam.beta2,
                    epsilon=adam.epsilon,
                    step=adam.step,
                    m={k: v.copy() for k, v in adam.m.items()},
                    v={k: v.copy() for k, v in adam.v.items()},
                ),
                epoch=epoch,
                best_value=monitored,
            )
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_accuracy": report.accuracy,
                "val_balanced_accuracy": report.balanced_accuracy,
                "val_auroc": report.auroc,
                "val_auprc": report.auprc,
                "monitor": config.monitor,
                "monitor_value": monitored,
                "improved": improved,
            }
        )
        if stopper.should_stop(epoch):
            break
    return best, log


_CHUNK = 128  # instances recorded per tape; bounds activation memory per sweep


def _batch_gradients(feature_list, target_list, params, model, rng):
    """Mean loss and mean gradients over one balanced batch.

    Per-instance set computations are recorded on a shared tape per chunk, so
    the classifier (and its weight gradients) run as one matrix pass over the
    chunk instead of once per instance.
    """
    n = len(feature_list)
    total_loss = 0.0
    grad_sum = None
    for start in range(0, n, _CHUNK):
        chunk_features = feature_list[start : start + _CHUNK]
        chunk_targets = target_list[start : start + _CHUNK]
        tape = Tape()
        leaves = {name: tape.leaf(v, name=name) for name, v in params.items()}
        pooled = []
        for x in chunk_features:
            if model.attention is not None:
                rstar, _ = attention_forward_core(
                    x, model.set_function.embed, leaves, model.attention,
                    train=True, rng=rng,
                )
            else:
                h = mlp_apply(x, model.set_function.embed, leaves, prefix="embed.",
                              train=True, rng=rng)
                rstar = _pool(h, model.set_function.aggregation)
            pooled.append(rstar)
        logits = mlp_apply(stack_rows(pooled), model.set_function.classifier, leaves,
                           prefix="classifier.", train=True, rng=rng)
        targets = np.asarray(chunk_targets, dtype=np.float64).reshape(-1, 1)
        loss = sum_all(binary_cross_entropy(logits, targets))
        total_loss += float(value_of(loss))
        grads = backward(tape, np.asarray(1.0))
        if grad_sum is None:
            grad_sum = grads
        else:
            for key in grad_sum:
                grad_sum[key] += grads[key]
    return total_loss / n, {k: g / n for k, g in grad_sum.items()}


def save_log(log: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Hyperparameter search


@dataclass(frozen=True)
class SearchSpace:
    """Uniform sampling ranges for the random search."""

    layer_range: tuple[int, int] = (1, 5)
    widths: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    dropouts: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    latent_widths: tuple[int, ...] = (32, 64, 128, 256, 512, 1024, 2048)
    attention_dropouts: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5)
    learning_rate_range: tuple[float, float] = (0.0001, 0.01)
    batch_sizes: tuple[int, ...] = (32, 64, 128, 256, 512)
    positional_dims: tuple[int, ...] = (4, 8, 16)
    max_timescales: tuple[float, ...] = (10.0, 100.0, 1000.0)


def sample_config(space: SearchSpace, rng: np.random.Generator, base: TrainConfig) -> TrainConfig:
    """One uniform draw from the search space, inheriting fixed fields from base."""
    lo, hi = space.learning_rate_range
    lr = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return replace(
        base,
        learning_rate=lr,
        batch_size=int(rng.choice(space.batch_sizes)),
        encoder_layers=int(rng.integers(space.layer_range[0], space.layer_range[1] + 1)),
        encoder_width=int(rng.choice(space.widths)),
        encoder_dropout=float(rng.choice(space.dropouts)),
        latent_width=int(rng.choice(space.latent_widths)),
        attention_dropout=float(rng.choice(space.attention_dropouts)),
        classifier_layers=int(rng.integers(space.layer_range[0], space.layer_range[1] + 1)),
        classifier_width=int(rng.choice(space.widths)),
        classifier_dropout=float(rng.choice(space.dropouts)),
        positional_dims=int(rng.choice(space.positional_dims)),
        max_timescale=float(rng.choice(space.max_timescales)),
    )


def hypersearch(train_data: Dataset, val_data: Dataset, base: TrainConfig,
                n: int = 20, seed: int = 0, space: SearchSpace | None = None):
    """Train ``n`` uniformly sampled configs; returns (config, value, epoch) ranked."""
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)
    trial_seeds = np.random.SeedSequence(seed).spawn(n)
    results = []
    for trial in range(n):
        config = sample_config(space, rng, base)
        config = replace(config, seed=int(trial_seeds[trial].generate_state(1)[0]))
        ckpt, _ = train(train_data, val_data, config)
        results.append({"config": config, "value": ckpt.best_value, "epoch": ckpt.epoch})
    results.sort(key=lambda r: -r["value"])
    return results
