"""Gaussian weight posteriors on selected layers and Monte-Carlo ensembles.

Selected layers of a pretrained model get an isotropic Gaussian posterior
centered on the pretrained weights. Weights are drawn by rejection from the
low-density region of that Gaussian: a draw is accepted when its squared
Mahalanobis radius exceeds the chi-square quantile at level q (q = 0
disables the constraint, so the expected acceptance rate is 1 - q).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc, ndtri

from .network import Model, LayerSpec, LEARNABLE, forward_batch
from .numerics import Rng, softmax

__all__ = [
    "POLICIES",
    "SelectionPolicy",
    "GaussianLayerPosterior",
    "EnsembleConfig",
    "SamplerExhaustedError",
    "select_layers",
    "build_posteriors",
    "chi_square_quantile",
    "sample_layer_weights",
    "mc_predict",
    "predictive_mean",
]

POLICIES = ("none", "conv_backbone", "linear_backbone", "conv_all",
            "linear_all", "full")


class SamplerExhaustedError(RuntimeError):
    """Rejection sampler hit its attempt cap."""


@dataclass
class SelectionPolicy:
    name: str = "none"
    layers: list | None = None  # explicit layer names override the policy

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ValueError(f"unknown selection policy {self.name!r}")


def select_layers(model: Model, policy) -> list:
    """Resolve a policy to an ordered list of layer names.

    Only parameter-carrying layers are selectable; batchnorm affines only
    under the `full` policy (or an explicit list).
    """
    if isinstance(policy, str):
        policy = SelectionPolicy(policy)
    if policy.layers is not None:
        for name in policy.layers:
            layer = _find_layer(model, name)
            if not LEARNABLE[layer.kind]:
                raise ValueError(f"layer {name!r} carries no weight parameters")
        return [l.name for l in model.layers if l.name in set(policy.layers)]
    selected = []
    for idx, layer in enumerate(model.layers):
        in_backbone = idx < model.backbone_end
        if policy.name == "none":
            continue
        if policy.name == "conv_backbone" and layer.kind == "conv2d" and in_backbone:
            selected.append(layer.name)
        elif policy.name == "linear_backbone" and layer.kind == "linear" and in_backbone:
            selected.append(layer.name)
        elif policy.name == "conv_all" and layer.kind == "conv2d":
            selected.append(layer.name)
        elif policy.name == "linear_all" and layer.kind == "linear":
            selected.append(layer.name)
        elif policy.name == "full" and LEARNABLE[layer.kind]:
            selected.append(layer.name)
    return selected


def _find_layer(model: Model, name: str) -> LayerSpec:
    for layer in model.layers:
        if layer.name == name:
            return layer
    raise ValueError(f"no layer named {name!r}")


@dataclass
class GaussianLayerPosterior:
    """Isotropic Gaussian over one layer's learnable parameters.

    mean is a flat copy of the pretrained values (bit-identical at
    construction); sigma scales an identity covariance; threshold is the
    squared-radius acceptance bound implied by epsilon_quantile.
    """
    layer_name: str
    mean: np.ndarray
    sigma: float
    epsilon_quantile: float
    tensor_shapes: list = field(default_factory=list)  # [(name, shape), ...]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if self.mean.size < 1:
            raise ValueError(f"layer {self.layer_name!r} has no parameters")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.epsilon_quantile < 1:
            raise ValueError("epsilon_quantile must be in [0, 1)")
        self.m = self.mean.size
        self.threshold = chi_square_quantile(self.m, self.epsilon_quantile)

    def split_tensors(self, flat: np.ndarray) -> dict:
        """Slice a flat parameter vector back into named tensors."""
        out = {}
        pos = 0
        for name, shape in self.tensor_shapes:
            size = int(np.prod(shape)) if shape else 1
            out[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        return out


@dataclass
class EnsembleConfig:
    sample_count: int = 30
    seed: int = 0
    max_rejection_attempts: int | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def _default_attempt_cap(q: float) -> int:
    return max(100, math.ceil(50.0 / max(1.0 - q, 1e-12)))


def chi_square_quantile(m: int, q: float) -> float:
    """r^2 with P(chi2_m <= r^2) = q, to 1e-6 absolute.

    Wilson-Hilferty starting bracket refined by bisection on the regularized
    incomplete gamma.
    """
    if not 0 <= q < 1:
        raise ValueError("q must be in [0, 1)")
    if q == 0:
        return 0.0
    # Wilson-Hilferty approximation as a bracket seed
    z = ndtri(q)
    wh = m * (1.0 - 2.0 / (9.0 * m) + z * math.sqrt(2.0 / (9.0 * m))) ** 3
    hi = max(wh * 2.0, 1.0)
    while gammainc(m / 2.0, hi / 2.0) < q:
        hi *= 2.0
    lo = 0.0
    while hi - lo > 1e-8:
        mid = 0.5 * (lo + hi)
        if gammainc(m / 2.0, mid / 2.0) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def build_posteriors(model: Model, selection: list, alpha: float,
                     epsilon_quantile: float = 0.05) -> list:
    """One posterior per selected layer: mean = pretrained weights,
    sigma = alpha * RMS of those weights (floored at alpha * 1e-6)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    posteriors = []
    for name in selection:
        layer = _find_layer(model, name)
        tensors = [(t, layer.params[t].shape) for t in LEARNABLE[layer.kind]]
        flat = np.concatenate([layer.params[t].reshape(-1) for t in LEARNABLE[layer.kind]])
        if flat.size == 0:
            raise ValueError(f"layer {name!r} has no parameters")
        rms = float(np.sqrt(np.mean(flat * flat)))
        sigma = alpha * rms if rms > 0 else alpha * 1e-6
        posteriors.append(GaussianLayerPosterior(
            layer_name=name, mean=flat.copy(), sigma=sigma,
            epsilon_quantile=epsilon_quantile, tensor_shapes=tensors))
    return posteriors


def sample_layer_weights(post: GaussianLayerPosterior, rng: Rng,
                         max_attempts: int | None = None) -> np.ndarray:
    """Draw a flat weight vector from N(mean, sigma^2 I), accepting only
    draws whose squared Mahalanobis radius exceeds the chi-square bound."""
    cap = max_attempts if max_attempts is not None else _default_attempt_cap(post.epsilon_quantile)
    for _ in range(cap):
        z = rng.normals(post.m)
        if post.threshold == 0.0 or float(z @ z) > post.threshold:
            return post.mean + post.sigma * z
    raise SamplerExhaustedError(
        f"layer {post.layer_name!r}: no accepted draw in {cap} attempts "
        f"(q={post.epsilon_quantile})")


def mc_predict(model: Model, posteriors: list, x: np.ndarray,
               cfg: EnsembleConfig, stream: tuple = ()) -> list:
    """T_mc forward passes with independently sampled selected-layer weights.

    For sample index t, the weights of each selected layer come from the
    child generator split at (seed, *stream, t, layer-index), so results are
    identical under any parallel schedule. Returns [(logits, box), ...].
    """
    base = Rng(cfg.seed)
    by_name = {p.layer_name: p for p in posteriors}
    layer_index = {l.name: i for i, l in enumerate(model.layers)}
    x = np.asarray(x, dtype=np.float64)[None]
    results = []
    for t in range(cfg.sample_count):
        layers = []
        for layer in model.layers:
            post = by_name.get(layer.name)
            if post is None:
                layers.append(layer)
                continue
            rng = base.split(*stream, t, layer_index[layer.name])
            flat = sample_layer_weights(post, rng, cfg.max_rejection_attempts)
            params = dict(layer.params)
            params.update(post.split_tensors(flat))
            layers.append(LayerSpec(layer.name, layer.kind, params,
                                    stride=layer.stride, padding=layer.padding))
        sampled = Model(layers, model.backbone_end, model.class_count,
                        model.has_box_head)
        logits, boxes, _ = forward_batch(sampled, x)
        results.append((logits[0], boxes[0] if boxes is not None else None))
    return results


def predictive_mean(samples: list):
    """Ensemble summary: (mean softmax vector, mean box or None,
    per-logit variance). Variance is the unbiased estimator (zero for a
    single sample)."""
    if not samples:
        raise ValueError("empty sample list")
    probs = np.stack([softmax(logits) for logits, _ in samples])
    logits = np.stack([logits for logits, _ in samples])
    # a collapsed ensemble must summarize exactly like a single pass
    degenerate = bool(np.all(logits == logits[0]))
    boxes = None
    if samples[0][1] is not None:
        stacked = np.stack([b for _, b in samples])
        boxes = stacked[0] if degenerate else stacked.mean(axis=0)
    if len(samples) == 1 or degenerate:
        var = np.zeros(logits.shape[1])
    else:
        var = logits.var(axis=0, ddof=1)
    mean_probs = probs[0] if degenerate else probs.mean(axis=0)
    return mean_probs, boxes, var
