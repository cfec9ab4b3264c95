"""Ground-truth class centers: one-hot masks, center extraction, moving averages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor, matmul, reshape

IGNORE_VALUE = 255


class NoSupervisedPixels(ValueError):
    """Every pixel in the batch carries the ignore label."""


class LabelMask:
    """Per-pixel class labels with a flattened one-hot view and an ignore mask.

    ``labels`` may be any integer array; pixels are flattened in C order.
    """

    def __init__(self, labels, num_classes: int, ignore_value: int = IGNORE_VALUE):
        labels = np.asarray(labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError(f"labels must be integers, got {labels.dtype}")
        valid = labels != ignore_value
        if np.any(labels[valid] < 0) or np.any(labels[valid] >= num_classes):
            bad = labels[valid & ((labels < 0) | (labels >= num_classes))]
            raise ValueError(f"label id {int(bad[0])} outside [0, {num_classes})")
        self.labels = labels.astype(np.int64)
        self.num_classes = int(num_classes)
        self.ignore_value = int(ignore_value)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    @property
    def sigma(self) -> np.ndarray:
        """1 where the pixel is ignored, else 0."""
        return (self.flat == self.ignore_value).astype(np.int64)

    @property
    def valid_index(self) -> np.ndarray:
        return np.flatnonzero(self.flat != self.ignore_value)

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """Y_flat: HW x N one-hot; ignored rows are all zero."""
        flat = self.flat
        y = np.zeros((flat.size, self.num_classes), dtype=dtype)
        idx = self.valid_index
        y[idx, flat[idx]] = 1
        return y

    @classmethod
    def stack(cls, masks: Sequence["LabelMask"]) -> "LabelMask":
        """Concatenate masks row-wise so the flat view spans the whole batch."""
        first = masks[0]
        labels = np.concatenate([m.labels.reshape(-1, m.labels.shape[-1]) for m in masks], axis=0)
        return cls(labels, first.num_classes, first.ignore_value)

    def __repr__(self) -> str:
        return f"LabelMask(shape={self.labels.shape}, num_classes={self.num_classes})"


def resize_nearest(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize of an integer label map (no mixed labels)."""
    h, w = labels.shape
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


@dataclass
class ClassCenters:
    """Class-center matrix ``mu`` (N x C) with per-class pixel counts."""

    mu: Tensor
    counts: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def present_index(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def channels(self) -> int:
        return self.mu.shape[1]

    def detach(self) -> "ClassCenters":
        return ClassCenters(self.mu.detach(), self.counts.copy())


def _centers_from_flat(x_flat: Tensor, mask: LabelMask, detach: bool = False) -> ClassCenters:
    y = mask.one_hot(dtype=x_flat.dtype)
    counts = y.sum(axis=0).astype(np.int64)
    if counts.sum() == 0:
        raise NoSupervisedPixels("no supervised pixels")
    denom = np.maximum(counts, 1).astype(x_flat.dtype)[:, None]
    src = x_flat.detach() if detach else x_flat
    # absent classes have all-zero Y columns, so their rows stay exactly zero
    mu = matmul(Tensor(y.T), src) / Tensor(denom)
    return ClassCenters(mu, counts)


def flatten_features(features: Tensor) -> Tensor:
    """(..., C) -> (prod(...), C)."""
    return reshape(features, (-1, features.shape[-1]))


def extract_centers(
    features: Tensor,
    masks: Sequence[LabelMask],
    scope: str = "batch",
    detach: bool = False,
):
    """Average the features of each ground-truth class.

    ``features`` is B x H x W x C and ``masks`` holds B label masks already at
    feature resolution. ``scope="batch"`` returns one ClassCenters shared by the
    batch; ``scope="image"`` returns a list with one entry per image (images
    without supervised pixels get ``None``).
    """
    if features.ndim != 4:
        raise ValueError(f"features must be B x H x W x C, got {features.shape}")
    b, h, w, c = features.shape
    if len(masks) != b:
        raise ValueError(f"{len(masks)} masks for a batch of {b}")
    for m in masks:
        if m.labels.shape != (h, w):
            raise ValueError(f"mask shape {m.labels.shape} does not match features {(h, w)}")
    if all(m.valid_index.size == 0 for m in masks):
        raise NoSupervisedPixels("no supervised pixels")

    if scope == "batch":
        return _centers_from_flat(flatten_features(features), LabelMask.stack(masks), detach)
    if scope == "image":
        out: List[Optional[ClassCenters]] = []
        for i, m in enumerate(masks):
            if m.valid_index.size == 0:
                out.append(None)
                continue
            out.append(_centers_from_flat(reshape(features[i], (h * w, c)), m, detach))
        return out
    raise ValueError(f"unknown center scope {scope!r}")


def update_moving_centers(state: Optional[ClassCenters], fresh: ClassCenters, decay: float) -> ClassCenters:
    """Exponential moving average of centers; the result never carries gradients.

    Classes present in ``fresh`` become ``decay * old + (1 - decay) * fresh``;
    a class seen for the first time takes the fresh value; classes absent from
    ``fresh`` keep their old value.
    """
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    new = fresh.mu.data.copy()
    if state is None:
        return ClassCenters(Tensor(new), fresh.counts.copy())
    if state.mu.shape != fresh.mu.shape:
        raise ValueError(f"center shapes differ: {state.mu.shape} vs {fresh.mu.shape}")
    old = state.mu.data
    seen = state.present
    hit = fresh.present
    both = seen & hit
    new[both] = decay * old[both] + (1.0 - decay) * new[both]
    new[seen & ~hit] = old[seen & ~hit]
    counts = state.counts + fresh.counts
    return ClassCenters(Tensor(new.astype(old.dtype)), counts)


def distribute_centers(centers: ClassCenters, mask: LabelMask) -> Tensor:
    """Y_flat @ mu: each valid pixel receives its class center, ignored rows are zero."""
    if mask.num_classes > centers.num_classes:
        raise ValueError(f"mask has {mask.num_classes} classes, centers only {centers.num_classes}")
    flat = mask.flat
    valid = flat != mask.ignore_value
    if np.any(flat[valid] >= centers.num_classes):
        raise ValueError("label id exceeds number of centers")
    rows = np.where(valid, flat, 0)
    gathered = centers.mu[rows]
    return gathered * Tensor(valid.astype(centers.mu.dtype)[:, None])
