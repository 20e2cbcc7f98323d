"""Pointing game and mask-segmentation mAP."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Grounder, GroundingModel
from .scenes import SceneSample, downsample_max, write_pgm

THRESHOLDS = (0.3, 0.4, 0.5)


@dataclass
class PointingRecord:
    image: np.ndarray = field(repr=False)
    phrase: tuple[str, ...]
    box: tuple[float, float, float, float]  # top, left, bottom, right

    def __post_init__(self):
        h, w = self.image.shape[:2]
        top, left, bottom, right = self.box
        if not (0 <= top < bottom <= h and 0 <= left < right <= w):
            raise ValueError(f"box {self.box} lies outside the {h}x{w} image")


@dataclass
class PointingResult:
    hits: list[bool]

    @property
    def n_hits(self) -> int:
        return int(sum(self.hits))

    @property
    def n_misses(self) -> int:
        return len(self.hits) - self.n_hits

    @property
    def accuracy(self) -> float:
        return pointing_accuracy(self.n_hits, self.n_misses)

    def to_json(self) -> dict:
        return {"pointing": {"hits": self.n_hits, "misses": self.n_misses, "accuracy": self.accuracy}}


def pointing_accuracy(hits: int, misses: int) -> float:
    total = hits + misses
    return hits / total if total else 0.0


def records_from_scenes(samples: Sequence[SceneSample]) -> list[PointingRecord]:
    """One record per object: phrase ``a <color> <shape>`` with the object's box."""
    return [PointingRecord(s.image, tuple(o.phrase), o.box) for s in samples for o in s.objects]


def argmax_cell(mask: np.ndarray, tie_break: str = "first", rng=None) -> tuple[int, int]:
    flat = np.asarray(mask).reshape(-1)
    if tie_break == "first":
        i = int(np.argmax(flat))
    elif tie_break == "random":
        best = np.flatnonzero(flat == flat.max())
        i = int(best[rng.integers(len(best))])
    else:
        raise ValueError(f"unknown tie_break {tie_break!r}")
    return divmod(i, mask.shape[1])


def point_hit(mask: np.ndarray, box, delta: int, tie_break: str = "first", rng=None) -> bool:
    """Map the mask argmax cell centre to image pixels and test it against ``box`` (inclusive)."""
    r, c = argmax_cell(mask, tie_break, rng)
    y, x = (r + 0.5) * delta, (c + 0.5) * delta
    top, left, bottom, right = box
    return top <= y <= bottom and left <= x <= right


def _group_by_image(records):
    groups: dict[int, list[int]] = {}
    images = {}
    for i, rec in enumerate(records):
        key = id(rec.image)
        groups.setdefault(key, []).append(i)
        images[key] = rec.image
    return [(images[k], idx) for k, idx in groups.items()]


def pointing_game(model: GroundingModel, records: Sequence[PointingRecord], tie_break="first", rng=None) -> PointingResult:
    g = Grounder(model)
    hits = [False] * len(records)
    for image, idx in _group_by_image(records):
        # sigmoid is monotone, so its argmax is the logits' argmax; using
        # logits avoids ties where float64 saturates at exactly 1.0
        masks = g.logits(image, [records[i].phrase for i in idx])
        for m, i in zip(masks, idx):
            hits[i] = point_hit(m, records[i].box, model.config.delta, tie_break, rng)
    return PointingResult(hits)


def random_baseline(records: Sequence[PointingRecord]) -> float:
    """Expected pointing accuracy of a uniformly random point: mean box area fraction."""
    fracs = []
    for rec in records:
        h, w = rec.image.shape[:2]
        top, left, bottom, right = rec.box
        fracs.append((bottom - top) * (right - left) / (h * w))
    return float(np.mean(fracs)) if fracs else 0.0


# ------------------------------------------------------------ segmentation


def binarize_mask(mask: np.ndarray, threshold: str = "midpoint") -> tuple[np.ndarray, float]:
    """Foreground ``mask > theta`` and the mean attention over the foreground.

    ``midpoint``: theta = min + (max - min) / 2. ``half-range``:
    theta = (max - min) / 2 compared against absolute values.
    """
    mask = np.asarray(mask, dtype=np.float64)
    lo, hi = float(mask.min()), float(mask.max())
    if threshold == "midpoint":
        theta = lo + 0.5 * (hi - lo)
    elif threshold == "half-range":
        theta = 0.5 * (hi - lo)
    else:
        raise ValueError(f"unknown threshold rule {threshold!r}")
    fg = mask > theta
    score = float(mask[fg].mean()) if fg.any() else 0.0
    return fg, score


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, gt).sum() / union)


def average_precision(scores: Sequence[float], relevant: Sequence[bool]) -> float:
    """All-point interpolated AP of a ranked list; 0 when nothing is relevant."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    n_rel = int(relevant.sum())
    if n_rel == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    rel = relevant[order]
    tp = np.cumsum(rel)
    precision = tp / np.arange(1, len(rel) + 1)
    recall = tp / n_rel
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


@dataclass
class SegmentationResult:
    per_category: dict[str, dict[str, float]]
    map: dict[str, float]
    avg_map: float
    excluded: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"segmentation": {
            "per_category": self.per_category,
            "map": self.map,
            "avg_map": self.avg_map,
            "excluded": self.excluded,
        }}


def map_from_predictions(predictions: dict[str, list[tuple[float, float, bool]]], thresholds=THRESHOLDS) -> SegmentationResult:
    """mAP from per-category ``(score, iou, category_present)`` predictions, one per image."""
    per_category: dict[str, dict[str, float]] = {}
    excluded = []
    for cat, preds in sorted(predictions.items()):
        if not any(present for _, _, present in preds):
            excluded.append(cat)
            continue
        scores = [s for s, _, _ in preds]
        ious = np.array([v for _, v, _ in preds])
        per_category[cat] = {str(t): average_precision(scores, ious >= t) for t in thresholds}
    maps = {}
    for t in thresholds:
        vals = [ap[str(t)] for ap in per_category.values()]
        maps[str(t)] = float(np.mean(vals)) if vals else 0.0
    avg = float(np.mean(list(maps.values()))) if maps else 0.0
    return SegmentationResult(per_category, maps, avg, excluded)


def category_masks(sample: SceneSample, delta: int) -> dict[str, np.ndarray]:
    """Per-shape ground truth: instances merged, max-pooled to the attention grid."""
    out: dict[str, np.ndarray] = {}
    for obj in sample.objects:
        coarse = downsample_max(obj.mask, delta)
        out[obj.shape] = coarse | out[obj.shape] if obj.shape in out else coarse
    return out


def segmentation_map(
    model: GroundingModel,
    samples: Sequence[SceneSample],
    categories: Sequence[str] = ("circle", "square", "triangle"),
    thresholds=THRESHOLDS,
    threshold_rule: str = "midpoint",
) -> SegmentationResult:
    """Query every image with every category word and rank images per category."""
    g = Grounder(model)
    delta = model.config.delta
    preds: dict[str, list[tuple[float, float, bool]]] = {c: [] for c in categories}
    phrases = [(c,) for c in categories]
    for s in samples:
        masks = g.masks(s.image, phrases)
        gts = category_masks(s, delta)
        for cat, m in zip(categories, masks):
            fg, score = binarize_mask(m, threshold_rule)
            gt = gts.get(cat, np.zeros_like(fg))
            preds[cat].append((score, iou(fg, gt), cat in gts))
    return map_from_predictions(preds, thresholds)


# ------------------------------------------------------------------ export


def slugify(tokens) -> str:
    text = tokens if isinstance(tokens, str) else " ".join(tokens)
    slug = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")
    return slug or "phrase"


def export_masks(model: GroundingModel, image: np.ndarray, phrases: Sequence[Sequence[str]], out_dir) -> list[Path]:
    """Write one 8-bit PGM per phrase (mask values scaled to 0-255)."""
    if not phrases:
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks = Grounder(model).masks(image, [tuple(p) for p in phrases])
    paths = []
    for phrase, m in zip(phrases, masks):
        path = out / f"{slugify(phrase)}.pgm"
        write_pgm(path, np.clip(np.round(m * 255.0), 0, 255).astype(np.uint8))
        paths.append(path)
    return paths


def mask_distinctness(model: GroundingModel, samples: Sequence[SceneSample]) -> list[bool]:
    """For two-object scenes: is each object phrase's mean mask value higher inside
    its own (grid-pooled) region than inside its sibling's region?"""
    g = Grounder(model)
    delta = model.config.delta
    out = []
    for s in samples:
        if len(s.objects) != 2:
            continue
        masks = g.masks(s.image, [tuple(o.phrase) for o in s.objects])
        regions = [downsample_max(o.mask, delta) for o in s.objects]
        for k in range(2):
            own, other = regions[k], regions[1 - k]
            out.append(bool(masks[k][own].mean() > masks[k][other].mean()))
    return out
