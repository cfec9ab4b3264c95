"""Class-aware regularization losses and the primary cross-entropy."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .centers import (
    ClassCenters,
    LabelMask,
    NoSupervisedPixels,
    distribute_centers,
    extract_centers,
    flatten_features,
    update_moving_centers,
)
from .tensor import Tensor, absolute, log_softmax, matmul, relu_max, softmax, square

LOSS_NAMES = ("ce", "intra_c2p", "inter_c2c", "inter_c2p")


class DegenerateBatchWarning(UserWarning):
    """A loss was evaluated on a batch with nothing to supervise."""


@dataclass(frozen=True)
class CarThresholds:
    eps0: float = 0.5
    eps1: float = 0.25

    def __post_init__(self):
        if self.eps0 < 0 or self.eps1 < 0:
            raise ValueError(f"thresholds must be >= 0, got eps0={self.eps0}, eps1={self.eps1}")


@dataclass
class SimilarityMatrix:
    """Pairwise class similarity over the present classes (``classes`` maps rows to ids)."""

    values: Tensor
    classes: np.ndarray
    normalized: bool


@dataclass
class LossBundle:
    ce: Tensor
    intra_c2p: Tensor
    inter_c2c: Tensor
    inter_c2p: Tensor
    weights: Tuple[float, float, float, float]
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        out = {name: float(getattr(self, name).data) for name in LOSS_NAMES}
        out["total"] = float(self.total.data)
        return out


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _degenerate(name: str, dtype) -> Tensor:
    warnings.warn(f"{name}: no supervised pixels, loss defined as 0", DegenerateBatchWarning, stacklevel=3)
    return _zero(dtype)


def intra_c2p_loss(features: Tensor, mask: LabelMask, centers: ClassCenters) -> Tensor:
    """Mean squared distance between each supervised pixel feature and its class center.

    ``features`` is HW x C, flattened in the same order as ``mask``.
    """
    hw, c = features.shape
    if hw != mask.flat.size:
        raise ValueError(f"features have {hw} rows, mask has {mask.flat.size} pixels")
    n_valid = mask.valid_index.size
    if n_valid == 0:
        return _degenerate("intra_c2p", features.dtype)
    keep = Tensor((1 - mask.sigma).astype(features.dtype)[:, None])
    diff = keep * absolute(distribute_centers(centers, mask) - features)
    return square(diff).sum() / float(n_valid * c)


def class_similarity(centers: ClassCenters, scaled: bool = True, normalized: bool = True) -> SimilarityMatrix:
    """Center Gram matrix over present classes, optionally scaled by 1/sqrt(C) and row-softmaxed."""
    idx = centers.present_index
    mu = centers.mu[idx]
    gram = matmul(mu, mu.T)
    if scaled:
        gram = gram / math.sqrt(centers.channels)
    if normalized:
        gram = softmax(gram, axis=1)
    return SimilarityMatrix(gram, idx, normalized)


def margin_penalty(similarity: Tensor, keep: Tensor, margin: float) -> Tensor:
    """Mean over rows of (sum of kept similarities above ``margin``) squared."""
    excess = relu_max(similarity * keep, margin)
    return square(excess.sum(axis=1)).mean()


def inter_c2c_loss(centers: ClassCenters, eps0: float = 0.5) -> Tensor:
    """Penalize row-softmax similarity between distinct class centers above eps0 / (n - 1)."""
    n = centers.present_index.size
    if n < 2:
        return _zero(centers.mu.dtype)
    sim = class_similarity(centers).values
    off_diag = Tensor((1.0 - np.eye(n)).astype(sim.dtype))
    return margin_penalty(sim, off_diag, eps0 / (n - 1))


def inter_c2p_loss(
    features: Tensor,
    mask: LabelMask,
    centers: ClassCenters,
    eps1: float = 0.25,
    replacement: str = "masked",
) -> Tensor:
    """Penalize softmax similarity between each pixel and the centers of other classes.

    The ground-truth logit of each pixel is replaced by its center's self dot
    product (``masked``), or, with ``literal``, the self dot products are added
    to every column after zeroing the ground-truth entry.
    """
    if replacement not in ("masked", "literal"):
        raise ValueError(f"unknown replacement mode {replacement!r}")
    hw, _ = features.shape
    if hw != mask.flat.size:
        raise ValueError(f"features have {hw} rows, mask has {mask.flat.size} pixels")
    valid = mask.valid_index
    if valid.size == 0:
        return _degenerate("inter_c2p", features.dtype)
    present = centers.present_index
    n = present.size
    if n < 2:
        return _zero(features.dtype)

    column = np.full(centers.num_classes, -1, dtype=np.int64)
    column[present] = np.arange(n)
    gt = column[mask.flat[valid]]
    if np.any(gt < 0):
        raise ValueError("a supervised pixel belongs to a class without a center")
    y = np.zeros((valid.size, n), dtype=features.dtype)
    y[np.arange(valid.size), gt] = 1
    y = Tensor(y)
    not_y = 1.0 - y

    x = features[valid]
    mu = centers.mu[present]
    dots = matmul(x, mu.T)
    self_dots = (mu * mu).sum(axis=1)
    if replacement == "masked":
        logits = dots * not_y + y * self_dots
    else:
        logits = dots * not_y + self_dots
    return margin_penalty(softmax(logits, axis=1), not_y, eps1 / (n - 1))


def cross_entropy_loss(logits: Tensor, mask: LabelMask) -> Tensor:
    """Mean negative log-likelihood of the ground-truth class over supervised pixels."""
    valid = mask.valid_index
    if valid.size == 0:
        raise NoSupervisedPixels("no supervised pixels")
    logp = log_softmax(logits[valid], axis=1)
    picked = logp[(np.arange(valid.size), mask.flat[valid])]
    return -picked.mean()


def combine(losses: Sequence[Tensor], weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> LossBundle:
    """Weighted sum of (ce, intra_c2p, inter_c2c, inter_c2p)."""
    if len(losses) != 4 or len(weights) != 4:
        raise ValueError("need exactly four losses and four weights")
    if any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be non-negative, got {tuple(weights)}")
    total = None
    for loss, w in zip(losses, weights):
        if w == 0:
            continue
        term = loss * float(w)
        total = term if total is None else total + term
    if total is None:
        total = _zero(losses[0].dtype)
    return LossBundle(*losses, weights=tuple(float(w) for w in weights), total=total)


@dataclass
class CenterTracker:
    """Holds the configuration for center scope plus the moving-average state."""

    scope: str = "batch"
    decay: float = 0.9
    detach: bool = False
    state: Optional[ClassCenters] = field(default=None, repr=False)

    def __post_init__(self):
        if self.scope not in ("image", "batch", "moving"):
            raise ValueError(f"unknown center scope {self.scope!r}")


def car_losses(
    features: Tensor,
    masks: Sequence[LabelMask],
    tracker: CenterTracker,
    thresholds: CarThresholds = CarThresholds(),
    replacement: str = "masked",
) -> Tuple[Tensor, Tensor, Tensor]:
    """The three regularizers on a B x H x W x C feature batch.

    Image scope averages the per-image losses over images with supervised
    pixels. A batch without any supervised pixel yields zeros.
    """
    b, h, w, c = features.shape
    if all(m.valid_index.size == 0 for m in masks):
        warnings.warn("batch has no supervised pixels; CAR losses are 0", DegenerateBatchWarning, stacklevel=2)
        z = _zero(features.dtype)
        return z, z, z

    if tracker.scope == "image":
        per_image = extract_centers(features, masks, "image", detach=tracker.detach)
        terms = []
        for i, centers in enumerate(per_image):
            if centers is None:
                continue
            x = features[i].reshape(h * w, c)
            terms.append((
                intra_c2p_loss(x, masks[i], centers),
                inter_c2c_loss(centers, thresholds.eps0),
                inter_c2p_loss(x, masks[i], centers, thresholds.eps1, replacement),
            ))
        k = float(len(terms))
        return tuple(_sum(t[j] for t in terms) / k for j in range(3))

    centers = extract_centers(features, masks, "batch", detach=tracker.detach)
    if tracker.scope == "moving":
        tracker.state = update_moving_centers(tracker.state, centers, tracker.decay)
        centers = tracker.state
    x = flatten_features(features)
    mask = LabelMask.stack(masks)
    return (
        intra_c2p_loss(x, mask, centers),
        inter_c2c_loss(centers, thresholds.eps0),
        inter_c2p_loss(x, mask, centers, thresholds.eps1, replacement),
    )


def _sum(items):
    total = None
    for t in items:
        total = t if total is None else total + t
    return total
