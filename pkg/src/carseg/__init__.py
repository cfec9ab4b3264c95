"""Class-aware regularization losses for semantic segmentation, with a toy trainer."""

from .centers import ClassCenters, LabelMask, extract_centers
from .losses import (
    CarThresholds,
    LossBundle,
    combine,
    cross_entropy_loss,
    inter_c2c_loss,
    margin_penalty,
    inter_c2p_loss,
    intra_c2p_loss,
)
from .tensor import Tensor

__all__ = [
    "CarThresholds",
    "ClassCenters",
    "LabelMask",
    "LossBundle",
    "Tensor",
    "combine",
    "cross_entropy_loss",
    "extract_centers",
    "inter_c2c_loss",
    "margin_penalty",
    "inter_c2p_loss",
    "intra_c2p_loss",
]
