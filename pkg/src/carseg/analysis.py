"""Class-dependency and pixel-relation maps, rendered as PPM heatmaps with CSV beside them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .centers import LabelMask, extract_centers, resize_nearest
from .netpbm import write_ppm
from .tensor import Tensor


@dataclass
class DependencyMap:
    values: np.ndarray
    class_names: Tuple[str, ...]
    present: np.ndarray
    cosine: bool = True

    def mean_off_diagonal(self) -> float:
        idx = np.flatnonzero(self.present)
        sub = self.values[np.ix_(idx, idx)]
        off = ~np.eye(idx.size, dtype=bool)
        return float(sub[off].mean())


@dataclass
class RelationMap:
    anchor: Tuple[int, int]
    values: np.ndarray
    sample_id: int = 0


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows; zero vectors give 0."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    denom = na * nb.T
    dots = a @ b.T
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def dataset_centers(model, samples: Sequence, batch_size: int = 16):
    """Ground-truth class centers over a whole sample set (same code path as the losses)."""
    feats = model.features(np.stack([s.image for s in samples]), batch_size)
    feats = feats.astype(np.float64)
    h, w = feats.shape[1:3]
    masks = [
        s.mask if s.mask.labels.shape == (h, w)
        else LabelMask(resize_nearest(s.mask.labels, h, w), s.mask.num_classes, s.mask.ignore_value)
        for s in samples
    ]
    return extract_centers(Tensor(feats), masks, scope="batch", detach=True)


def dependency_from_centers(mu: np.ndarray, present: np.ndarray, raw: bool = False,
                            class_names: Optional[Sequence[str]] = None) -> DependencyMap:
    present = np.asarray(present, dtype=bool)
    if present.sum() < 2:
        raise ValueError("dependency map needs at least two present classes")
    values = mu @ mu.T if raw else cosine_matrix(mu, mu)
    values = np.where(present[:, None] & present[None, :], values, 0.0)
    names = tuple(class_names) if class_names else tuple(f"class{k}" for k in range(len(mu)))
    return DependencyMap(values, names, present, cosine=not raw)


def compute_dependency_map(model, samples: Sequence, raw: bool = False,
                           class_names: Optional[Sequence[str]] = None) -> DependencyMap:
    centers = dataset_centers(model, samples)
    return dependency_from_centers(centers.mu.data, centers.present, raw, class_names)


def relation_from_features(feats: np.ndarray, anchor: Tuple[int, int], raw: bool = False) -> np.ndarray:
    h, w, c = feats.shape
    r, col = anchor
    if not (0 <= r < h and 0 <= col < w):
        raise IndexError(f"anchor {anchor} outside {h}x{w} image")
    flat = feats.reshape(-1, c)
    ref = feats[r, col][None, :]
    vals = flat @ ref.T if raw else cosine_matrix(flat, ref)
    return vals.reshape(h, w)


def compute_relation_map(model, sample, anchor: Tuple[int, int], sample_id: int = 0,
                         raw: bool = False) -> RelationMap:
    feats = model.features(sample.image[None])[0].astype(np.float64)
    return RelationMap(tuple(anchor), relation_from_features(feats, anchor, raw), sample_id)


# -- rendering -----------------------------------------------------------------


def _color_table() -> np.ndarray:
    # blue -> white -> red
    t = np.linspace(0.0, 1.0, 256)
    lo = np.clip(2.0 * t, 0.0, 1.0)
    hi = np.clip(2.0 - 2.0 * t, 0.0, 1.0)
    rgb = np.stack([lo, np.minimum(lo, hi), hi], axis=1)
    return np.round(rgb * 255.0).astype(np.uint8)


COLOR_TABLE = _color_table()
MID_INDEX = 128


def colorize(matrix: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Min-max normalize into the color table. A constant matrix maps to the mid color."""
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap values must be finite")
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        idx = np.round((m - lo) / (hi - lo) * 255.0).astype(np.int64)
    else:
        idx = np.full(m.shape, MID_INDEX, dtype=np.int64)
    return COLOR_TABLE[idx], lo, hi


def render_heatmap(matrix: np.ndarray, path, scale: int = 1) -> Path:
    """Write ``path`` (PPM) and ``path`` with a .csv suffix holding the exact values."""
    path = Path(path)
    rgb, lo, hi = colorize(matrix)
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    write_ppm(path, rgb)
    csv_path = path.with_suffix(".csv")
    lines = [f"# normalization=minmax min={lo:.9g} max={hi:.9g}"]
    for row in np.atleast_2d(matrix):
        lines.append(",".join(f"{float(v):.9g}" for v in row))
    csv_path.write_text("\n".join(lines) + "\n")
    return csv_path


def read_matrix_csv(path) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in Path(path).read_text().splitlines()
        if line and not line.startswith("#")
    ]
    return np.asarray(rows)
