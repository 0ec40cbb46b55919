"""Content and style objectives over captured feature maps.

All losses work on feature matrices: a layer's ``(C, H, W)`` activation
flattened to ``N x M`` with ``N`` channels and ``M = H * W`` positions.

* content loss: ``0.5 * sum((P - F)^2)`` against a target feature matrix P;
* style representation: the Gram matrix ``G = F F^T`` (no normalization
  inside G -- all normalization lives in the per-layer loss denominator);
* per-layer style loss: ``sum((A - G)^2) / (4 N^2 M^2)`` against a target
  Gram matrix A;
* total: ``alpha * content + beta * sum_l w_l * E_l``.

Each loss returns its exact gradient with respect to F, so the whole
objective is checkable against finite differences to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import CaptureError, ConfigError, ShapeError
from .tensorcore import Tensor

__all__ = [
    "LossWeights",
    "LossTargets",
    "TotalLoss",
    "feature_matrix",
    "gram",
    "content_loss_grad",
    "style_layer_loss_grad",
    "total_style_loss",
    "total_loss_grad",
]


def feature_matrix(features: Tensor) -> Tensor:
    """Flatten a (C, H, W) feature map to its C x (H*W) feature matrix."""
    if features.ndim == 2:
        return features
    if features.ndim == 3:
        c, h, w = features.shape
        return features.reshape((c, h * w))
    raise ShapeError(f"expected rank 2 or 3 features, got {features.shape}")


def gram(fm: Tensor) -> Tensor:
    """Gram matrix ``F F^T`` of an N x M feature matrix; exactly symmetric."""
    if fm.ndim != 2:
        raise ShapeError(f"gram expects a rank-2 feature matrix, got {fm.shape}")
    f = fm.array
    g = f @ f.T
    # Mirror the upper triangle so G == G^T holds bit-for-bit.
    g = np.triu(g) + np.triu(g, 1).T
    return Tensor._wrap(g)


def content_loss_grad(target: Tensor, fm: Tensor) -> tuple[float, Tensor]:
    """Loss ``0.5 * sum((P - F)^2)`` and its exact gradient ``F - P``."""
    if target.shape != fm.shape:
        raise ShapeError(f"content shapes disagree: {target.shape} vs {fm.shape}")
    diff = fm.array - target.array
    loss = 0.5 * float(np.dot(diff.ravel(), diff.ravel()))
    return loss, Tensor._wrap(diff)


def style_layer_loss_grad(target_gram: Tensor, fm: Tensor) -> tuple[float, Tensor]:
    """Per-layer style loss against a target Gram matrix, with exact gradient.

    For F of shape N x M and target A:
    ``E = sum((A - G)^2) / (4 N^2 M^2)`` with ``G = F F^T``, and
    ``dE/dF = ((G - A) @ F) / (N^2 M^2)`` (using the symmetry of G and A).
    """
    if fm.ndim != 2:
        raise ShapeError(f"style features must be rank-2, got {fm.shape}")
    n, m = fm.shape
    if target_gram.shape != (n, n):
        raise ShapeError(
            f"target Gram is {target_gram.shape}, features need ({n}, {n})"
        )
    g = gram(fm).array
    diff = g - target_gram.array
    denom = float(n * n) * float(m * m)
    loss = float(np.dot(diff.ravel(), diff.ravel())) / (4.0 * denom)
    grad = (diff @ fm.array) / denom
    return loss, Tensor._wrap(grad)


def total_style_loss(
    per_layer: Mapping[str, float], weights: Mapping[str, float]
) -> float:
    """Weighted sum ``sum_l w_l E_l``; the two key sets must match exactly."""
    if set(per_layer) != set(weights):
        raise ConfigError(
            f"style layers {sorted(per_layer)} vs weights {sorted(weights)}"
        )
    return float(sum(weights[name] * per_layer[name] for name in sorted(per_layer)))


@dataclass(frozen=True)
class LossWeights:
    """Blend factors: alpha on content, beta on style, w_l per style layer."""

    alpha: float
    beta: float
    layer_weights: Mapping[str, float]

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ConfigError("alpha + beta must be positive")
        if any(w < 0 for w in self.layer_weights.values()):
            raise ConfigError("layer weights must be nonnegative")


@dataclass(frozen=True)
class LossTargets:
    """Frozen per-run targets: content features P and style Gram matrices A."""

    content_layer: str
    content_target: Tensor
    style_targets: Mapping[str, Tensor]


@dataclass(frozen=True)
class TotalLoss:
    loss: float
    content_part: float
    style_part: float
    feature_grads: dict[str, Tensor]


def total_loss_grad(
    targets: LossTargets,
    features_x: Mapping[str, Tensor],
    weights: LossWeights,
) -> TotalLoss:
    """Combined objective and feature-space gradients for one evaluation.

    ``loss == alpha * content_part + beta * style_part`` holds exactly.
    Gradients are accumulated per captured layer (a layer serving both roles
    receives the sum), shaped like the corresponding entry of ``features_x``.
    """
    style_layers = set(targets.style_targets)
    if set(weights.layer_weights) != style_layers:
        raise ConfigError(
            f"layer weights {sorted(weights.layer_weights)} do not match "
            f"style targets {sorted(style_layers)}"
        )
    needed = {targets.content_layer} | style_layers
    missing = sorted(needed - set(features_x))
    if missing:
        raise CaptureError(missing[0])

    grads: dict[str, np.ndarray] = {}

    def accumulate(name: str, g: np.ndarray) -> None:
        flat = features_x[name]
        g = g.reshape(flat.shape)
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    fm_c = feature_matrix(features_x[targets.content_layer])
    content_part, content_grad = content_loss_grad(targets.content_target, fm_c)
    accumulate(targets.content_layer, weights.alpha * content_grad.array)

    per_layer: dict[str, float] = {}
    for name in sorted(style_layers):
        fm = feature_matrix(features_x[name])
        e_l, style_grad = style_layer_loss_grad(targets.style_targets[name], fm)
        per_layer[name] = e_l
        w_l = weights.layer_weights[name]
        accumulate(name, (weights.beta * w_l) * style_grad.array)

    style_part = total_style_loss(per_layer, dict(weights.layer_weights))
    loss = weights.alpha * content_part + weights.beta * style_part
    return TotalLoss(
        loss=loss,
        content_part=content_part,
        style_part=style_part,
        feature_grads={name: Tensor._wrap(g) for name, g in grads.items()},
    )
