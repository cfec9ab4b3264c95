"""Deterministic SGD training with poly decay, and mIOU evaluation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .centers import LabelMask, NoSupervisedPixels, resize_nearest
from .losses import (
    CarThresholds,
    CenterTracker,
    DegenerateBatchWarning,
    car_losses,
    combine,
    cross_entropy_loss,
)
from .model import Model
from .synth import Sample
from .tensor import NonFiniteError

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "ce", "intra", "inter_c2c", "inter_c2p", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    power: float = 0.9
    weight_decay: float = 1e-3
    momentum: float = 0.9
    eps0: float = 0.5
    eps1: float = 0.25
    w_ce: float = 1.0
    w_intra: float = 1.0
    w_c2c: float = 1.0
    w_c2p: float = 1.0
    center_scope: str = "batch"  # image | batch | moving
    decay: float = 0.9
    detach_centers: bool = False
    replacement: str = "masked"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lr", "power", "weight_decay", "momentum", "decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.center_scope not in ("image", "batch", "moving"):
            raise ValueError(f"unknown center scope {self.center_scope!r}")
        if self.replacement not in ("masked", "literal"):
            raise ValueError(f"unknown replacement mode {self.replacement!r}")

    @property
    def thresholds(self) -> CarThresholds:
        return CarThresholds(self.eps0, self.eps1)

    @property
    def weights(self) -> tuple:
        return (self.w_ce, self.w_intra, self.w_c2c, self.w_c2p)

    @property
    def uses_car(self) -> bool:
        return any(w > 0 for w in self.weights[1:])

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def poly_lr(step: int, total: int, base: float, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base * (1.0 - step / total) ** power


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= np.asarray(lr, dtype=p.dtype) * v
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged("parameter update produced non-finite weights")


@dataclass
class TrainResult:
    model: Model
    log: List[tuple] = field(default_factory=list)


def _masks_at(masks: Sequence[LabelMask], h: int, w: int) -> List[LabelMask]:
    out = []
    for m in masks:
        if m.labels.shape != (h, w):
            m = LabelMask(resize_nearest(m.labels, h, w), m.num_classes, m.ignore_value)
        out.append(m)
    return out


def batch_order(n: int, iterations: int, batch_size: int, seed: int) -> List[np.ndarray]:
    """Index batches from successive seeded permutations of the dataset."""
    rng = np.random.default_rng([seed, 1])
    batches = []
    pool = np.empty(0, dtype=np.int64)
    for _ in range(iterations):
        while pool.size < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        batches.append(pool[:batch_size])
        pool = pool[batch_size:]
    return batches


def train_step(model: Model, images: np.ndarray, masks: Sequence[LabelMask], tc: TrainConfig,
               tracker: CenterTracker):
    """Forward + backward for one batch. Returns the LossBundle, or None when nothing is supervised."""
    features, logits = model.forward(images)
    b, h, w, _ = features.shape
    masks = _masks_at(masks, h, w)
    stacked = LabelMask.stack(masks)
    try:
        ce = cross_entropy_loss(logits.reshape(-1, logits.shape[-1]), stacked)
    except NoSupervisedPixels:
        return None
    if tc.uses_car:
        intra, c2c, c2p = car_losses(features, masks, tracker, tc.thresholds, tc.replacement)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateBatchWarning)
            intra, c2c, c2p = car_losses(features.detach(), masks, tracker, tc.thresholds, tc.replacement)
    bundle = combine((ce, intra, c2c, c2p), tc.weights)
    model.zero_grad()
    bundle.total.backward()
    return bundle


def train(model: Model, data: Sequence[Sample], tc: TrainConfig, log_path=None) -> TrainResult:
    """Train in place. With ``log_path`` the per-iteration losses are also written as CSV."""
    if not data:
        raise ValueError("empty training set")
    images = np.stack([s.image for s in data])
    masks = [s.mask for s in data]
    opt = SGD(model.parameters(), tc.momentum, tc.weight_decay)
    tracker = CenterTracker(tc.center_scope, tc.decay, tc.detach_centers)
    result = TrainResult(model)

    for step, idx in enumerate(batch_order(len(data), tc.iterations, tc.batch_size, tc.seed)):
        lr = poly_lr(step, tc.iterations, tc.lr, tc.power)
        try:
            bundle = train_step(model, images[idx], [masks[i] for i in idx], tc, tracker)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        if bundle is None:
            logger.warning("step %d: batch has no supervised pixels, skipped", step)
            result.log.append((step, lr, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        opt.step(lr)
        v = bundle.as_floats()
        result.log.append((step, lr, v["ce"], v["intra_c2p"], v["inter_c2c"], v["inter_c2p"], v["total"]))
        if step % 200 == 0:
            logger.info("step %d lr %.5f total %.4f", step, lr, v["total"])

    if log_path is not None:
        write_log(result.log, log_path)
    return result


def write_log(rows, path) -> None:
    lines = [",".join(LOG_FIELDS)]
    for row in rows:
        lines.append(",".join([str(row[0])] + [repr(float(x)) for x in row[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_log(path) -> List[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, map(float, line.split(",")))) for line in lines[1:]]


# -- evaluation ----------------------------------------------------------------


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_value: int = 255) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignored pixels are dropped."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    keep = gt != ignore_value
    return np.bincount(
        gt[keep] * num_classes + pred[keep], minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)


@dataclass
class MiouResult:
    iou: np.ndarray  # NaN for classes absent from the ground truth
    miou: float
    confusion: np.ndarray


def miou_from_confusion(cm: np.ndarray) -> MiouResult:
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    union = gt_count + cm.sum(axis=0) - tp
    iou = np.full(cm.shape[0], np.nan)
    present = gt_count > 0
    iou[present] = tp[present] / union[present]
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return MiouResult(iou, miou, cm)


def evaluate_miou(model: Model, samples: Sequence[Sample], batch_size: int = 16) -> MiouResult:
    if not samples:
        raise ValueError("no samples to evaluate")
    n = samples[0].mask.num_classes
    images = np.stack([s.image for s in samples])
    pred = model.predict(images, batch_size)
    cm = np.zeros((n, n), dtype=np.int64)
    for p, s in zip(pred, samples):
        cm += confusion_matrix(p, s.mask.labels, n, s.mask.ignore_value)
    return miou_from_confusion(cm)
