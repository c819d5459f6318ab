"""Energy-based OOD scoring: energy, uncertainty score, threshold, NLL.

The energy of a logit vector is -Temp * logsumexp(logits); the uncertainty
score is a logistic transform of the negated, phi-scaled energy, so higher
scores mean more ID-like. A sample is classified ID when its score is at
least the calibrated threshold gamma.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import log_sum_exp, ShapeError

__all__ = [
    "ScoringConfig",
    "OodScoreRecord",
    "energy",
    "uncertainty_score",
    "score_ensemble",
    "calibrate_gamma",
    "classify",
    "nll",
]

AGGREGATIONS = ("mean_score", "score_of_mean_logits")


@dataclass
class ScoringConfig:
    temperature: float = 1.0
    phi: float = 1.0
    aggregation: str = "mean_score"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.phi <= 0:
            raise ValueError("phi must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class OodScoreRecord:
    sample_id: int
    energy_mean: float
    score: float
    score_std: float
    is_id_truth: bool
    predicted_class: int
    predicted_box: np.ndarray | None = None


def energy(logits: np.ndarray, temperature: float = 1.0) -> float:
    """-Temp * log(sum(exp(logits))); finite for any finite logits."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return -temperature * log_sum_exp(logits)


def uncertainty_score(e: float, phi: float = 1.0) -> float:
    """Logistic of -phi*E: strictly decreasing in E, range (0, 1)."""
    if phi <= 0:
        raise ValueError("phi must be positive")
    x = -phi * e
    # overflow-safe logistic
    if x >= 0:
        s = 1.0 / (1.0 + math.exp(-x))
    else:
        ex = math.exp(x)
        s = ex / (1.0 + ex)
    # keep the range open: saturation would otherwise round to exactly 0 or 1
    return min(max(s, 5e-324), 1.0 - 2.0 ** -53)


def score_ensemble(samples: list, cfg: ScoringConfig,
                   sample_id: int = 0, is_id_truth: bool = True) -> OodScoreRecord:
    """Fold an MC ensemble of (logits, box) pairs into one score record.

    mean_score: mean of per-sample scores; score_of_mean_logits: one score
    on the ensemble-mean logits. score_std is always the population standard
    deviation of the per-sample scores.
    """
    if not samples:
        raise ValueError("empty ensemble")
    energies = np.array([energy(logits, cfg.temperature) for logits, _ in samples])
    per_sample = np.array([uncertainty_score(e, cfg.phi) for e in energies])
    degenerate = bool(np.all(per_sample == per_sample[0]))
    if cfg.aggregation == "mean_score":
        # a collapsed ensemble must score exactly like a single pass
        score = float(per_sample[0]) if degenerate else float(per_sample.mean())
    else:
        stacked = np.stack([logits for logits, _ in samples])
        mean_logits = stacked[0] if degenerate else stacked.mean(axis=0)
        score = uncertainty_score(energy(mean_logits, cfg.temperature), cfg.phi)
    stacked = np.stack([logits for logits, _ in samples])
    mean_logits = stacked[0] if degenerate else stacked.mean(axis=0)
    mean_box = None
    if samples[0][1] is not None:
        boxes = np.stack([b for _, b in samples])
        mean_box = boxes[0] if degenerate else boxes.mean(axis=0)
    return OodScoreRecord(
        sample_id=sample_id,
        energy_mean=float(energies[0]) if degenerate else float(energies.mean()),
        score=score,
        score_std=0.0 if degenerate else float(per_sample.std()),  # population estimator
        is_id_truth=is_id_truth,
        predicted_class=int(np.argmax(mean_logits)),
        predicted_box=mean_box,
    )


def calibrate_gamma(id_scores, tpr_target: float = 0.95) -> float:
    """Largest observed score gamma such that the fraction of ID scores >=
    gamma is at least tpr_target (count threshold ceil(tpr_target * n))."""
    scores = np.asarray(list(id_scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score list")
    if not 0 < tpr_target <= 1:
        raise ValueError("tpr_target must be in (0, 1]")
    k = math.ceil(tpr_target * scores.size)
    return float(np.sort(scores)[::-1][k - 1])


def classify(score: float, gamma: float) -> str:
    """ID iff score >= gamma (the boundary counts as ID)."""
    return "ID" if score >= gamma else "OOD"


def nll(probabilities) -> float:
    """Mean negative log probability of the true labels.

    probabilities: iterable of (probability vector, true label index).
    Probabilities are clamped below at 1e-300 before the log.
    """
    items = list(probabilities)
    if not items:
        raise ValueError("empty probability list")
    total = 0.0
    for probs, label in items:
        probs = np.asarray(probs, dtype=np.float64).reshape(-1)
        if not 0 <= label < probs.size:
            raise IndexError(f"label {label} out of range")
        total -= math.log(max(float(probs[label]), 1e-300))
    return total / len(items)
