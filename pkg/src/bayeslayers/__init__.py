"""Post-hoc Bayesian-layer OOD detection at desk scale.

Selected layers of a pretrained network get Gaussian weight posteriors,
weights are sampled from the low-density region of those Gaussians, Monte
Carlo ensemble predictions are scored with an energy-based rule, and ID/OOD
separation is evaluated with FPR95 and AUROC.
"""

__version__ = "0.1.0"

from .numerics import Rng
from .network import Model, LayerSpec, TrainConfig, build_model, train_sgd
from .bayes import (SelectionPolicy, GaussianLayerPosterior, EnsembleConfig,
                    select_layers, build_posteriors, mc_predict)
from .scoring import ScoringConfig, energy, uncertainty_score, calibrate_gamma
from .metrics import ScoreSet, auroc, fpr_at_tpr

__all__ = [
    "Rng", "Model", "LayerSpec", "TrainConfig", "build_model", "train_sgd",
    "SelectionPolicy", "GaussianLayerPosterior", "EnsembleConfig",
    "select_layers", "build_posteriors", "mc_predict",
    "ScoringConfig", "energy", "uncertainty_score", "calibrate_gamma",
    "ScoreSet", "auroc", "fpr_at_tpr",
]
