"""Synthetic segmentation scenes with biased foreground/background pairings.

Each image is one background class filling the frame and one foreground shape
(ellipse or rectangle) of another class, separated by a thin ignore band.
Pairings follow a row-stochastic co-occurrence matrix: row ``fg`` is the
distribution of the background class given the foreground class. Classes that
look alike locally but appear with different partners reproduce the
cow-on-grass failure: a model leaning on context mislabels the foreground when
it appears with an unusual partner.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .centers import IGNORE_VALUE, LabelMask
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

SPLITS = ("train", "test_common", "test_rare")
RARE_THRESHOLD = 0.05
BAND = 2


@dataclass(frozen=True)
class ClassStyle:
    color: Tuple[float, float, float]
    texture_amp: float
    texture_period: float = 4.0
    texture_angle: float = 0.0  # radians


def _default_palette() -> Tuple[ClassStyle, ...]:
    # 0 and 2 differ by a faint color offset, their usual partners 1 and 3 by
    # a clear one, so near a boundary the partner is the easier cue
    warm, green = (0.62, 0.48, 0.34), (0.36, 0.56, 0.40)
    return (
        ClassStyle(warm, 0.0),
        ClassStyle(green, 0.0),
        ClassStyle(tuple(v + 0.03 for v in warm), 0.0),
        ClassStyle(tuple(v + 0.12 for v in green), 0.0),
    )


def _default_cooccurrence() -> Tuple[Tuple[float, ...], ...]:
    return (
        (0.00, 0.94, 0.03, 0.03),
        (0.94, 0.00, 0.03, 0.03),
        (0.03, 0.03, 0.00, 0.94),
        (0.03, 0.03, 0.94, 0.00),
    )


@dataclass(frozen=True)
class SceneSpec:
    height: int = 48
    width: int = 48
    num_classes: int = 4
    palette: Tuple[ClassStyle, ...] = field(default_factory=_default_palette)
    cooccurrence: Tuple[Tuple[float, ...], ...] = field(default_factory=_default_cooccurrence)
    noise_std: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.palette) != self.num_classes:
            raise ValueError(f"palette has {len(self.palette)} entries for {self.num_classes} classes")
        co = np.asarray(self.cooccurrence, dtype=np.float64)
        if co.shape != (self.num_classes, self.num_classes):
            raise ValueError(f"cooccurrence must be {self.num_classes}x{self.num_classes}, got {co.shape}")
        if np.any(co < 0) or not np.allclose(co.sum(axis=1), 1.0):
            raise ValueError("cooccurrence rows must be probability distributions")
        if np.any(np.diag(co) > 0):
            raise ValueError("a class cannot be its own background")

    @property
    def cooc(self) -> np.ndarray:
        return np.asarray(self.cooccurrence, dtype=np.float64)

    def rare_pairs(self) -> List[Tuple[int, int]]:
        co = self.cooc
        return [
            (fg, bg)
            for fg in range(self.num_classes)
            for bg in range(self.num_classes)
            if fg != bg and co[fg, bg] < RARE_THRESHOLD
        ]


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32, multiples of 1/255
    mask: LabelMask
    combo: Tuple[int, int]

    @property
    def pixels(self) -> np.ndarray:
        return np.round(self.image * 255.0).astype(np.uint8)


def _texture(style: ClassStyle, yy: np.ndarray, xx: np.ndarray, phase: float) -> np.ndarray:
    proj = xx * np.cos(style.texture_angle) + yy * np.sin(style.texture_angle)
    return style.texture_amp * np.sin(2.0 * np.pi * proj / style.texture_period + phase)


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, r)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= padded[r + dy:r + dy + h, r + dx:r + dx + w]
    return out


def _shape(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    total = h * w
    while True:
        frac = rng.uniform(0.07, 0.40)
        aspect = rng.uniform(0.6, 1.6)
        ellipse = rng.random() < 0.5
        area = frac * total
        if ellipse:
            ry = np.sqrt(area * aspect / np.pi)
            rx = area / (np.pi * ry)
        else:
            ry = np.sqrt(area * aspect) / 2.0
            rx = area / (4.0 * ry)
        if 2 * ry + 2 * BAND >= h or 2 * rx + 2 * BAND >= w:
            continue
        cy = rng.uniform(ry, h - 1 - ry)
        cx = rng.uniform(rx, w - 1 - rx)
        if ellipse:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        fg_frac = inside.sum() / total
        if 0.05 <= fg_frac <= 0.60:
            return inside


def _split_code(split: str) -> int:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    return SPLITS.index(split)


def _draw_pair(rng: np.random.Generator, spec: SceneSpec, split: str) -> Tuple[int, int]:
    if split == "test_rare":
        rare = spec.rare_pairs()
        return rare[int(rng.integers(len(rare)))]
    fg = int(rng.integers(spec.num_classes))
    bg = int(rng.choice(spec.num_classes, p=spec.cooc[fg]))
    return fg, bg


def render_sample(spec: SceneSpec, split: str, index: int) -> Sample:
    """Sample ``index`` of ``split``; depends only on (spec, split, index)."""
    rng = np.random.default_rng([spec.seed, _split_code(split), index])
    fg, bg = _draw_pair(rng, spec, split)
    h, w = spec.height, spec.width
    inside = _shape(rng, h, w)
    band = _dilate(inside, BAND) & ~inside

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3), dtype=np.float64)
    for cls, region in ((bg, ~inside), (fg, inside)):
        style = spec.palette[cls]
        tex = _texture(style, yy, xx, rng.uniform(0.0, 2.0 * np.pi))
        layer = np.asarray(style.color)[None, None, :] + tex[:, :, None]
        img[region] = layer[region]
    img += rng.normal(0.0, spec.noise_std, size=img.shape)
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

    labels = np.full((h, w), bg, dtype=np.int64)
    labels[inside] = fg
    labels[band] = IGNORE_VALUE
    return Sample(pixels.astype(np.float32) / 255.0, LabelMask(labels, spec.num_classes), (fg, bg))


def generate(spec: SceneSpec, count: int, split: str = "train") -> List[Sample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    _split_code(split)
    if split == "test_rare" and not spec.rare_pairs():
        raise ValueError("test_rare requested but no (fg, bg) pair has training probability below 0.05")
    return [render_sample(spec, split, i) for i in range(count)]


# -- persistence ---------------------------------------------------------------


def write_sample(sample: Sample, image_path, mask_path) -> None:
    write_ppm(image_path, sample.pixels)
    labels = sample.mask.labels
    gray = np.where(labels == sample.mask.ignore_value, 255, labels).astype(np.uint8)
    write_pgm(mask_path, gray)


def read_sample(image_path, mask_path, num_classes: int, combo: Tuple[int, int] = (-1, -1)) -> Sample:
    pixels = read_ppm(image_path)
    gray = read_pgm(mask_path)
    if gray.shape != pixels.shape[:2]:
        raise ValueError(f"mask {gray.shape} and image {pixels.shape[:2]} sizes differ")
    labels = gray.astype(np.int64)
    labels[gray == 255] = IGNORE_VALUE
    return Sample(pixels.astype(np.float32) / 255.0, LabelMask(labels, num_classes), tuple(combo))


INDEX_FIELDS = ("split", "image_path", "mask_path", "fg", "bg")


def write_dataset(root, spec: SceneSpec, counts: dict) -> Path:
    """Write every split in ``counts`` under ``root`` plus ``index.csv`` and ``scene.cfg``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        n = counts.get(split, 0)
        if not n:
            continue
        for i, sample in enumerate(generate(spec, n, split)):
            img = f"images/{split}_{i:05d}.ppm"
            msk = f"masks/{split}_{i:05d}.pgm"
            write_sample(sample, root / img, root / msk)
            rows.append((split, img, msk, sample.combo[0], sample.combo[1]))
    with open(root / "index.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(INDEX_FIELDS)
        writer.writerows(rows)
    (root / "scene.cfg").write_text(
        f"num_classes = {spec.num_classes}\nheight = {spec.height}\nwidth = {spec.width}\n"
        f"noise_std = {spec.noise_std!r}\nseed = {spec.seed}\n"
    )
    return root / "index.csv"


def read_dataset(root, split: str) -> List[Sample]:
    root = Path(root)
    num_classes = None
    for line in (root / "scene.cfg").read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "num_classes":
            num_classes = int(value)
    if num_classes is None:
        raise ValueError(f"{root}/scene.cfg lacks num_classes")
    samples = []
    with open(root / "index.csv", newline="") as f:
        for row in csv.DictReader(f):
            if row["split"] != split:
                continue
            samples.append(read_sample(
                root / row["image_path"], root / row["mask_path"], num_classes,
                (int(row["fg"]), int(row["bg"])),
            ))
    if not samples:
        raise ValueError(f"no samples for split {split!r} under {root}")
    return samples


def batch_arrays(samples: Sequence[Sample]) -> Tuple[np.ndarray, List[LabelMask]]:
    return np.stack([s.image for s in samples]), [s.mask for s in samples]
