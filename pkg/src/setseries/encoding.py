"""Observation featurization: sinusoidal time encoding, value, one-hot channel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Observation
from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class TimeEncodingSpec:
    """Sinusoidal encoding of scalar time into ``dims`` components.

    Component pair k uses divisor max_timescale**(2k / dims), so wavelengths
    grow geometrically from 2*pi upward and every entry stays in [-1, 1].
    """

    dims: int
    max_timescale: float

    def __post_init__(self):
        if self.dims <= 0 or self.dims % 2 != 0:
            raise ConfigError(f"encoding dims must be a positive even integer, got {self.dims}")
        if not self.max_timescale > 0:
            raise ConfigError(f"max timescale must be positive, got {self.max_timescale}")

    @property
    def divisors(self) -> np.ndarray:
        k = np.arange(self.dims // 2)
        return self.max_timescale ** (2.0 * k / self.dims)


def time_encode(t: float, spec: TimeEncodingSpec) -> np.ndarray:
    """Encode one non-negative time value into ``spec.dims`` sin/cos components."""
    if not t >= 0.0:
        raise ValidationError(f"time must be non-negative, got {t}")
    phases = t / spec.divisors
    out = np.empty(spec.dims)
    out[0::2] = np.sin(phases)
    out[1::2] = np.cos(phases)
    return out


def featurize(obs: Observation, spec: TimeEncodingSpec, channels: int) -> np.ndarray:
    """Model input for one observation: [time encoding | value | one-hot channel]."""
    if not 1 <= obs.modality <= channels:
        raise ValidationError(
            f"modality {obs.modality} outside declared channel range 1..{channels}"
        )
    out = np.zeros(spec.dims + 1 + channels)
    out[: spec.dims] = time_encode(obs.time, spec)
    out[spec.dims] = obs.value
    out[spec.dims + 1 + (obs.modality - 1)] = 1.0
    return out


def feature_matrix(observations, spec: TimeEncodingSpec, channels: int) -> np.ndarray:
    """Stack featurized observations into an (M, dims + 1 + channels) matrix.

    Row-for-row identical to calling :func:`featurize` on each observation.
    """
    m = len(observations)
    out = np.zeros((m, spec.dims + 1 + channels))
    times = np.array([o.time for o in observations])
    if times.size and times.min() < 0:
        raise ValidationError("time must be non-negative")
    phases = times[:, None] / spec.divisors[None, :]
    out[:, 0 : spec.dims : 2] = np.sin(phases)
    out[:, 1 : spec.dims : 2] = np.cos(phases)
    out[:, spec.dims] = [o.value for o in observations]
    for i, o in enumerate(observations):
        if not 1 <= o.modality <= channels:
            raise ValidationError(
                f"modality {o.modality} outside declared channel range 1..{channels}"
            )
        out[i, spec.dims + 1 + (o.modality - 1)] = 1.0
    return out
