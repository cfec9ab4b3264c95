"""Central finite-difference checks of analytic gradients at float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .centers import LabelMask
from .losses import CarThresholds, CenterTracker, car_losses, combine, cross_entropy_loss
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# entries whose magnitude is below this are compared in absolute terms
FLOOR = 1e-6


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, FLOOR)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return np.abs(analytic - numeric) / scale


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    f(t).backward()
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = STEP) -> float:
    """Max elementwise relative error between backprop and central differences."""
    a = analytic_grad(f, x)
    n = numeric_grad(lambda arr: float(f(Tensor(arr)).data), x, step)
    return float(relative_error(a, n).max())


@dataclass
class CarInstance:
    features: np.ndarray  # B x H x W x C
    masks: List[LabelMask]
    logits_weight: np.ndarray  # C x N, maps features to logits for the combined loss


def random_instance(rng: np.random.Generator, max_pixels: int = 12, max_classes: int = 4,
                    max_channels: int = 5, ignore_frac: float = 0.15) -> CarInstance:
    """A small batch (HW <= max_pixels per image) with at least two present classes."""
    n = int(rng.integers(2, max_classes + 1))
    c = int(rng.integers(2, max_channels + 1))
    h = int(rng.integers(2, 4))
    w = int(rng.integers(2, max_pixels // h + 1))
    b = int(rng.integers(1, 3))
    masks = []
    for _ in range(b):
        while True:
            labels = rng.integers(0, n, size=(h, w))
            labels[rng.random((h, w)) < ignore_frac] = 255
            if len(np.unique(labels[labels != 255])) >= 2:
                break
        masks.append(LabelMask(labels, n))
    feats = rng.normal(size=(b, h, w, c))
    return CarInstance(feats, masks, rng.normal(size=(c, n)))


def loss_functions(inst: CarInstance, scope: str = "batch", eps0: float = 0.5, eps1: float = 0.25
                   ) -> Dict[str, Callable[[Tensor], Tensor]]:
    """Scalar functions of the feature batch for each CAR loss and the weighted total."""
    th = CarThresholds(eps0, eps1)

    def parts(x: Tensor):
        return car_losses(x, inst.masks, CenterTracker(scope), th)

    def total(x: Tensor):
        intra, c2c, c2p = parts(x)
        b, h, w, c = x.shape
        logits = x.reshape(-1, c) @ Tensor(inst.logits_weight)
        ce = cross_entropy_loss(logits, LabelMask.stack(inst.masks))
        return combine((ce, intra, c2c, c2p), (1.0, 0.7, 1.3, 0.9)).total

    return {
        "intra_c2p": lambda x: parts(x)[0],
        "inter_c2c": lambda x: parts(x)[1],
        "inter_c2p": lambda x: parts(x)[2],
        "total": total,
    }


def run_suite(seed: int = 0, instances: int = 20) -> Dict[str, float]:
    """Max relative error per loss over ``instances`` random problems."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for k in range(instances):
        inst = random_instance(rng)
        scope = "image" if k % 4 == 3 else "batch"
        for name, f in loss_functions(inst, scope, eps0=0.2, eps1=0.1).items():
            worst[name] = max(worst.get(name, 0.0), check(f, inst.features))
    return worst
