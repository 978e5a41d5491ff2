"""Localization error and per-round reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FingerprintSet
from .errors import ConfigError, DimensionError
from .model import FusedParams, route_and_classify


@dataclass(frozen=True)
class ErrorStats:
    mean_m: float
    best_m: float
    worst_m: float
    per_sample: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_errors(cls, errors: np.ndarray) -> "ErrorStats":
        errors = np.asarray(errors, dtype=np.float64)
        if errors.size == 0:
            raise DimensionError("no samples to score")
        return cls(float(errors.mean()), float(errors.min()), float(errors.max()), errors)


def localization_error(logits: np.ndarray, true_labels: np.ndarray, rp_coords: np.ndarray) -> ErrorStats:
    """Euclidean distance between argmax-predicted and true RP coordinates.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    true_labels = np.asarray(true_labels)
    rp_coords = np.asarray(rp_coords, dtype=np.float64)
    if logits.ndim != 2 or true_labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {true_labels.shape}")
    if logits.shape[1] > rp_coords.shape[0] or true_labels.max(initial=0) >= rp_coords.shape[0]:
        raise ConfigError("classes without RP coordinates")
    pred = logits.argmax(axis=1)
    a, b = rp_coords[pred], rp_coords[true_labels]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ConfigError("missing coordinate for a predicted or true RP")
    return ErrorStats.from_errors(np.sqrt(((a - b) ** 2).sum(axis=1)))


def evaluate(params: FusedParams, test_sets: list[FingerprintSet], tau: float) -> tuple[ErrorStats, dict[str, ErrorStats]]:
    """Overall and per-device error of the routed model on held-out sets."""
    per_device, all_err = {}, []
    for ts in test_sets:
        out = route_and_classify(ts.features, params, tau)
        stats = localization_error(out.logits, ts.labels, ts.rp_coords)
        per_device[ts.device_id] = stats
        all_err.append(stats.per_sample)
    return ErrorStats.from_errors(np.concatenate(all_err)), per_device


@dataclass
class ClientRecord:
    client_id: str
    device_id: str
    malicious: bool
    attack: str
    samples: int
    denoise_count: int
    rce_mean: float
    rce_max: float
    trained_samples: int = 0


@dataclass
class RoundReport:
    round_index: int
    aggregation: str
    error: ErrorStats
    per_device: dict[str, ErrorStats]
    clients: list[ClientRecord] = field(default_factory=list)

    def __post_init__(self):
        e = self.error
        if not (0 <= e.best_m <= e.mean_m + 1e-12 and e.mean_m <= e.worst_m + 1e-12):
            raise ValueError("error stats violate 0 <= best <= mean <= worst")

    @property
    def mean_error_m(self) -> float:
        return self.error.mean_m

    @property
    def best_error_m(self) -> float:
        return self.error.best_m

    @property
    def worst_error_m(self) -> float:
        return self.error.worst_m

    @property
    def rce_mean(self) -> float:
        if not self.clients:
            return 0.0
        n = sum(c.samples for c in self.clients)
        return sum(c.rce_mean * c.samples for c in self.clients) / n

    @property
    def rce_max(self) -> float:
        return max((c.rce_max for c in self.clients), default=0.0)

    @property
    def denoise_trigger_counts(self) -> dict[str, int]:
        return {c.client_id: c.denoise_count for c in self.clients}
