"""Irregular time-series data model, file I/O, normalization, batching, synthesis.

A time series is an unordered set of (time, value, modality) observations;
instances in one dataset may have different cardinalities and need not share
observation times.  Channels are 1-based.  Class labels are integers in
1..class_count; for binary tasks class 1 is the positive (minority, signal)
class.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, ValidationError

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Core types


@dataclass(frozen=True, order=True)
class Observation:
    """One measurement: time in hours, raw or normalized value, 1-based channel."""

    time: float
    value: float
    modality: int

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time >= 0.0):
            raise ValidationError(f"observation time must be finite and >= 0, got {self.time}")
        if not math.isfinite(self.value):
            raise ValidationError(f"observation value must be finite, got {self.value}")
        if not (isinstance(self.modality, int) and self.modality >= 1):
            raise ValidationError(f"modality must be a positive integer, got {self.modality}")


@dataclass(frozen=True)
class TimeSeriesSet:
    """One instance: a set of observations plus optional statics and label."""

    id: str
    observations: tuple[Observation, ...]
    statics: dict[str, float] = field(default_factory=dict)
    label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.observations) == 0:
            raise ValidationError(f"instance {self.id!r} has no observations")
        seen = set()
        for obs in self.observations:
            key = (obs.time, obs.modality)
            if key in seen:
                raise ValidationError(
                    f"instance {self.id!r} has duplicate observation at (t={obs.time}, m={obs.modality})"
                )
            seen.add(key)
        if self.label is not None and (not isinstance(self.label, int) or self.label < 1):
            raise ValidationError(f"label must be a positive integer, got {self.label!r}")
        for name, value in self.statics.items():
            if not math.isfinite(float(value)):
                raise ValidationError(f"static {name!r} of instance {self.id!r} is not finite")

    def __len__(self) -> int:
        return len(self.observations)

    def sorted_observations(self) -> tuple[Observation, ...]:
        """Canonical (time, modality) order used for deterministic reductions."""
        return tuple(sorted(self.observations, key=lambda o: (o.time, o.modality)))


@dataclass(frozen=True)
class DatasetMeta:
    """Schema and training-split statistics shared by every split of a dataset.

    ``modality_count`` counts the raw channels in the files; statics occupy
    the extra channels modality_count+1 .. total_channels after injection.
    Normalization statistics are fitted on the training split only.
    """

    modality_count: int
    class_count: int
    static_fields: tuple[str, ...] = ()
    channel_mean: tuple[float, ...] | None = None
    channel_std: tuple[float, ...] | None = None
    max_time: float = 0.0
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.modality_count < 1:
            raise ValidationError("modality count must be >= 1")
        if self.class_count < 2:
            raise ValidationError("class count must be >= 2")
        if self.format_version != FORMAT_VERSION:
            raise ValidationError(f"unsupported format version {self.format_version}")
        if (self.channel_mean is None) != (self.channel_std is None):
            raise ValidationError("channel mean and std must be fitted together")
        if self.channel_std is not None:
            if len(self.channel_mean) != self.total_channels or len(self.channel_std) != self.total_channels:
                raise ValidationError("normalization statistics must cover every channel")
            if any(s <= 0 for s in self.channel_std):
                raise ValidationError("channel std must be positive")

    @property
    def total_channels(self) -> int:
        return self.modality_count + len(self.static_fields)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "modality_count": self.modality_count,
            "class_count": self.class_count,
            "static_fields": list(self.static_fields),
            "channel_mean": None if self.channel_mean is None else list(self.channel_mean),
            "channel_std": None if self.channel_std is None else list(self.channel_std),
            "max_time": self.max_time,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetMeta":
        return DatasetMeta(
            modality_count=int(d["modality_count"]),
            class_count=int(d["class_count"]),
            static_fields=tuple(d.get("static_fields") or ()),
            channel_mean=None if d.get("channel_mean") is None else tuple(d["channel_mean"]),
            channel_std=None if d.get("channel_std") is None else tuple(d["channel_std"]),
            max_time=float(d.get("max_time", 0.0)),
            format_version=int(d.get("format_version", FORMAT_VERSION)),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Dataset:
    """A list of instances together with the metadata they were read under."""

    instances: tuple[TimeSeriesSet, ...]
    meta: DatasetMeta

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))

    def __len__(self) -> int:
        return len(self.instances)

    def labels(self) -> np.ndarray:
        missing = [ts.id for ts in self.instances if ts.label is None]
        if missing:
            raise ValidationError(f"instances without labels: {missing[:5]}")
        return np.array([ts.label for ts in self.instances], dtype=np.int64)


# ---------------------------------------------------------------------------
# File I/O


def _parse_record(record: dict, line_no: int, meta: DatasetMeta | None) -> TimeSeriesSet:
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object", line=line_no)
    if record.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {record.get('format_version')}", line=line_no)
    if "id" not in record:
        raise ParseError("record is missing 'id'", line=line_no)
    events = record.get("events")
    if not isinstance(events, list) or len(events) == 0:
        raise ParseError(f"record {record.get('id')!r} has no events", line=line_no)
    observations = []
    for ev in events:
        if not (isinstance(ev, (list, tuple)) and len(ev) == 3):
            raise ParseError(f"event {ev!r} is not a [t, value, modality] triple", line=line_no)
        t, value, modality = ev
        if not (isinstance(modality, int) or (isinstance(modality, float) and modality.is_integer())):
            raise ParseError(f"modality {modality!r} is not an integer", line=line_no)
        try:
            observations.append(Observation(float(t), float(value), int(modality)))
        except (ValidationError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), line=line_no) from exc
    label = record.get("label")
    if label is not None:
        if not (isinstance(label, int) and label >= 1):
            raise ParseError(f"label {label!r} is not a 1-based class index", line=line_no)
    statics = record.get("statics") or {}
    if not isinstance(statics, dict):
        raise ParseError("'statics' must be an object", line=line_no)
    try:
        ts = TimeSeriesSet(
            id=str(record["id"]),
            observations=tuple(observations),
            statics={str(k): float(v) for k, v in statics.items()},
            label=label,
        )
    except ValidationError as exc:
        raise ParseError(str(exc), line=line_no) from exc
    if meta is not None:
        for obs in ts.observations:
            if obs.modality > meta.modality_count:
                raise ParseError(
                    f"modality {obs.modality} exceeds declared count {meta.modality_count}",
                    line=line_no,
                )
        if ts.label is not None and ts.label > meta.class_count:
            raise ParseError(f"label {ts.label} exceeds class count {meta.class_count}", line=line_no)
        for name in ts.statics:
            if name not in meta.static_fields:
                raise ParseError(f"unknown static field {name!r}", line=line_no)
    return ts


def parse_dataset(path, meta: DatasetMeta | None = None) -> Dataset:
    """Read a JSON-lines dataset file; infer metadata when none is supplied."""
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=line_no) from exc
            instances.append(_parse_record(record, line_no, meta))
    if not instances:
        raise ParseError(f"{path}: dataset file is empty")
    if meta is None:
        max_modality = max(o.modality for ts in instances for o in ts.observations)
        labels = [ts.label for ts in instances if ts.label is not None]
        static_fields = sorted({name for ts in instances for name in ts.statics})
        meta = DatasetMeta(
            modality_count=max_modality,
            class_count=max([2] + labels),
            static_fields=tuple(static_fields),
            max_time=max(o.time for ts in instances for o in ts.observations),
        )
    return Dataset(instances=tuple(instances), meta=meta)


def save_dataset(dataset: Dataset, path) -> None:
    """Write one JSON record per instance; numbers round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for ts in dataset.instances:
            record = {
                "format_version": FORMAT_VERSION,
                "id": ts.id,
                "label": ts.label,
                "statics": ts.statics,
                "events": [[o.time, o.value, o.modality] for o in ts.sorted_observations()],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def save_meta(meta: DatasetMeta, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_meta(path) -> DatasetMeta:
    with open(path, "r", encoding="utf-8") as fh:
        return DatasetMeta.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Static variables and normalization


def inject_static_observations(dataset: Dataset) -> Dataset:
    """Fold statics into the observation set as t=0 pseudo-observations.

    Static field i (in meta order) becomes channel modality_count + 1 + i, so
    the model stays a pure set function over one observation domain.
    """
    meta = dataset.meta
    if not meta.static_fields:
        return dataset
    index = {name: meta.modality_count + 1 + i for i, name in enumerate(meta.static_fields)}
    out = []
    for ts in dataset.instances:
        if not ts.statics:
            out.append(ts)
            continue
        extra = tuple(
            Observation(0.0, float(value), index[name]) for name, value in sorted(ts.statics.items())
        )
        out.append(replace(ts, observations=ts.observations + extra, statics={}))
    return Dataset(instances=tuple(out), meta=meta)


def fit_normalization(train: Dataset) -> DatasetMeta:
    """Two-pass per-channel mean/std over the training split.

    Channels with no or constant values fall back to std 1 so normalization
    never divides by zero.  Call after static injection so static channels
    get statistics too.
    """
    meta = train.meta
    total = meta.total_channels
    values = [[] for _ in range(total)]
    for ts in train.instances:
        for obs in ts.observations:
            if obs.modality > total:
                raise ValidationError(f"modality {obs.modality} outside channel range 1..{total}")
            values[obs.modality - 1].append(obs.value)
    means, stds = [], []
    for channel_values in values:
        if not channel_values:
            means.append(0.0)
            stds.append(1.0)
            continue
        arr = np.array(channel_values)
        mean = float(arr.mean())
        std = float(arr.std())
        means.append(mean)
        stds.append(std if std > 0.0 else 1.0)
    return replace(meta, channel_mean=tuple(means), channel_std=tuple(stds))


def normalize_observation(obs: Observation, meta: DatasetMeta) -> Observation:
    if meta.channel_mean is None:
        return obs
    if obs.modality > meta.total_channels:
        raise ValidationError(
            f"modality {obs.modality} outside channel range 1..{meta.total_channels}"
        )
    c = obs.modality - 1
    return replace(obs, value=(obs.value - meta.channel_mean[c]) / meta.channel_std[c])


def normalize(dataset: Dataset, meta: DatasetMeta) -> Dataset:
    """Z-score observation values with the (training-split) statistics in meta."""
    if meta.channel_mean is None:
        raise ValidationError("meta has no fitted normalization statistics")
    out = []
    for ts in dataset.instances:
        obs = tuple(normalize_observation(o, meta) for o in ts.observations)
        out.append(replace(ts, observations=obs))
    return Dataset(instances=tuple(out), meta=meta)


def identity_normalization(meta: DatasetMeta) -> DatasetMeta:
    """Statistics that leave values unchanged (mean 0, std 1 per channel)."""
    total = meta.total_channels
    return replace(meta, channel_mean=(0.0,) * total, channel_std=(1.0,) * total)


# ---------------------------------------------------------------------------
# Non-synchronization predicate


def has_unsynchronized_timepoint(ts: TimeSeriesSet, modality_count: int) -> bool:
    """True if some observed time point does not carry all modalities."""
    counts: dict[float, int] = {}
    for obs in ts.observations:
        counts[obs.time] = counts.get(obs.time, 0) + 1
    return any(c != modality_count for c in counts.values())


# ---------------------------------------------------------------------------
# Balanced batching


def steps_per_epoch(n_majority: int, n_minority: int, batch_size: int) -> int:
    """Optimizer steps per epoch for balanced batches of size B.

    The minimum of the steps needed to see every majority sample once and the
    steps needed to see every minority sample three times, at B/2 samples of
    each class per batch.
    """
    maj = -(-2 * n_majority // batch_size)
    mino = -(-6 * n_minority // batch_size)
    return min(maj, mino)


class _ClassStream:
    """Reshuffle-and-repeat sampler over one class's instance indices."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.rng = rng
        self.order = self.rng.permutation(self.indices)
        self.cursor = 0

    def draw(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            available = len(self.order) - self.cursor
            take = min(k, available)
            out.append(self.order[self.cursor : self.cursor + take])
            self.cursor += take
            k -= take
            if self.cursor == len(self.order):
                self.order = self.rng.permutation(self.indices)
                self.cursor = 0
        return np.concatenate(out)


class BatchPlan:
    """Deterministic class-balanced batch stream over a labeled dataset.

    Binary batches hold ceil(B/2) majority and floor(B/2) minority samples;
    minority samples recycle by reshuffled repetition.  Streams persist across
    epochs so every sample is eventually visited.
    """

    def __init__(self, labels, batch_size: int, seed: int):
        labels = np.asarray(labels)
        if batch_size < 2:
            raise ValidationError(f"batch size must be >= 2, got {batch_size}")
        classes, counts = np.unique(labels, return_counts=True)
        if len(classes) < 2:
            raise ValidationError("balanced batching needs at least two classes")
        if len(classes) > 2 and batch_size < len(classes):
            raise ValidationError("batch size smaller than the number of classes")
        self.batch_size = int(batch_size)
        # Larger classes first; ties broken by class index for determinism.
        order = sorted(range(len(classes)), key=lambda i: (-counts[i], classes[i]))
        self.classes = [int(classes[i]) for i in order]
        self.counts = [int(counts[i]) for i in order]
        base, extra = divmod(self.batch_size, len(self.classes))
        self.slots = [base + (1 if i < extra else 0) for i in range(len(self.classes))]
        if len(self.classes) == 2:
            self.steps = steps_per_epoch(self.counts[0], self.counts[1], self.batch_size)
        else:
            self.steps = min(
                -(-self.counts[0] // self.slots[0]),
                -(-3 * self.counts[-1] // self.slots[-1]),
            )
        rng = np.random.default_rng(seed)
        self.streams = [
            _ClassStream(np.flatnonzero(labels == c), rng) for c in self.classes
        ]

    @property
    def steps_per_epoch(self) -> int:
        return self.steps

    def epoch(self):
        """Yield ``steps_per_epoch`` index arrays, one per optimizer step."""
        for _ in range(self.steps):
            parts = [stream.draw(k) for stream, k in zip(self.streams, self.slots)]
            yield np.concatenate(parts)


def balanced_batches(dataset: Dataset, batch_size: int, seed: int) -> BatchPlan:
    return BatchPlan(dataset.labels(), batch_size, seed)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator for non-synchronized binary datasets with a plantable signal.

    Class 1 (positive) instances get a level shift of ``amplitude`` channel
    standard deviations in the signal channels after a random onset time;
    class 2 instances are pure baseline.
    """

    n_instances: int
    channels: int = 3
    prevalence: float = 0.14
    mean_observations: float = 40.0
    amplitude: float = 3.0
    signal_channels: tuple[int, ...] | None = None
    time_horizon: float = 48.0
    max_onset_fraction: float = 0.5
    include_statics: bool = False

    def __post_init__(self):
        if self.n_instances < 1:
            raise ValidationError("need at least one instance")
        if not 0.0 < self.prevalence < 1.0:
            raise ValidationError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.channels < 1:
            raise ValidationError("need at least one channel")
        if self.mean_observations <= 0:
            raise ValidationError("mean observation count must be positive")
        if self.time_horizon <= 0:
            raise ValidationError("time horizon must be positive")
        if self.signal_channels is not None:
            bad = [c for c in self.signal_channels if not 1 <= c <= self.channels]
            if bad:
                raise ValidationError(f"signal channels {bad} outside 1..{self.channels}")

    def resolved_signal_channels(self) -> tuple[int, ...]:
        if self.signal_channels is not None:
            return tuple(self.signal_channels)
        return tuple(range(1, -(-self.channels // 2) + 1))


def _channel_profile(channel: int) -> tuple[float, float]:
    # Distinct raw scales per channel so normalization actually does work.
    return 10.0 * channel, 1.0 + 0.25 * (channel - 1)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Draw a reproducible synthetic dataset; labels are Bernoulli(prevalence)."""
    rng = np.random.default_rng(seed)
    signal = set(spec.resolved_signal_channels())
    per_channel = spec.mean_observations / spec.channels
    instances = []
    for i in range(spec.n_instances):
        label = 1 if rng.random() < spec.prevalence else 2
        onset = rng.uniform(0.0, spec.max_onset_fraction * spec.time_horizon)
        observations = []
        for channel in range(1, spec.channels + 1):
            count = int(rng.poisson(per_channel))
            if count == 0:
                continue
            times = np.unique(rng.uniform(0.0, spec.time_horizon, size=count))
            mean, std = _channel_profile(channel)
            values = rng.normal(mean, std, size=len(times))
            if label == 1 and channel in signal:
                values = values + spec.amplitude * std * (times > onset)
            observations.extend(
                Observation(float(t), float(v), channel) for t, v in zip(times, values)
            )
        if not observations:
            mean, std = _channel_profile(1)
            observations.append(
                Observation(float(rng.uniform(0.0, spec.time_horizon)), float(rng.normal(mean, std)), 1)
            )
        statics = {"age": float(rng.normal(60.0, 10.0))} if spec.include_statics else {}
        instances.append(
            TimeSeriesSet(id=f"syn-{i:06d}", observations=tuple(observations), statics=statics, label=label)
        )
    meta = DatasetMeta(
        modality_count=spec.channels,
        class_count=2,
        static_fields=("age",) if spec.include_statics else (),
        max_time=spec.time_horizon,
    )
    return Dataset(instances=tuple(instances), meta=meta)


# ---------------------------------------------------------------------------
# Stratified splitting


def split_stratified(dataset: Dataset, fractions, seed: int) -> tuple[Dataset, ...]:
    """Split into disjoint covering parts with per-class largest-remainder counts."""
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {sum(fractions)}")
    if any(f <= 0.0 for f in fractions):
        raise ValidationError("every requested split must be non-empty (fraction > 0)")
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n = len(idx)
        exact = [f * n for f in fractions]
        counts = [int(e) for e in exact]
        remainder = n - sum(counts)
        by_frac = sorted(range(len(fractions)), key=lambda k: (-(exact[k] - counts[k]), k))
        for k in by_frac[:remainder]:
            counts[k] += 1
        start = 0
        for part, count in zip(parts, counts):
            part.extend(idx[start : start + count].tolist())
            start += count
    out = []
    for part in parts:
        if not part:
            raise ValidationError("a requested split received no instances")
        chosen = tuple(dataset.instances[i] for i in sorted(part))
        out.append(Dataset(instances=chosen, meta=dataset.meta))
    return tuple(out)
