"""Deterministic toy scenes: coloured shapes, template captions and their parses.

Boxes are ``[top, left, bottom, right]`` in continuous pixel coordinates:
pixel ``(r, c)`` covers ``[r, r+1) x [c, c+1)``, so a box spans the mask's
rows ``top .. bottom-1``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
RELATIONS = ("above", "below", "left of", "right of")
MAX_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    image_size: int = 80
    object_count: int = 2
    noise: float = 0.05
    min_size: int = 16
    max_size: int = 24
    delta: int = 4  # grid factor used for the downsampled-disjointness check

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 1 <= self.object_count <= 3:
            raise ValueError(f"object_count must be 1..3, got {self.object_count}")
        if not 0.0 <= self.noise <= 0.2:
            raise ValueError(f"noise must be in [0, 0.2], got {self.noise}")
        if not 1 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 1 <= min_size <= max_size <= image_size")


@dataclass
class SceneObject:
    shape: str
    color: str
    box: tuple[int, int, int, int]
    mask: np.ndarray = field(repr=False)

    @property
    def phrase(self) -> list[str]:
        return ["a", self.color, self.shape]


@dataclass
class SceneSample:
    id: str
    image: np.ndarray = field(repr=False)
    caption: list[str]
    parse: str
    objects: list[SceneObject]
    relation: str | None = None

    @property
    def caption_text(self) -> str:
        return " ".join(self.caption)


def render_shape(shape: str, size: int, top: int, left: int, image_size: int) -> np.ndarray:
    """Boolean mask of ``shape`` inscribed in a ``size`` x ``size`` square."""
    rows = np.arange(image_size)[:, None] + 0.5 - top
    cols = np.arange(image_size)[None, :] + 0.5 - left
    inside = (rows >= 0) & (rows < size) & (cols >= 0) & (cols < size)
    if shape == "square":
        return inside
    if shape == "circle":
        r = size / 2.0
        return inside & ((rows - r) ** 2 + (cols - r) ** 2 <= r * r)
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        half = (rows / size) * (size / 2.0)
        return inside & (np.abs(cols - size / 2.0) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def downsample_max(mask: np.ndarray, delta: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // delta, delta, w // delta, delta).max(axis=(1, 3))


def _relation_holds(relation: str, a, b) -> bool:
    at, al, ab, ar = a
    bt, bl, bb, br = b
    if relation == "above":
        return ab <= bt
    if relation == "below":
        return at >= bb
    if relation == "left of":
        return ar <= bl
    if relation == "right of":
        return al >= br
    raise ValueError(f"unknown relation {relation!r}")


def _np(color: str, shape: str) -> str:
    return f"(NP (DT a) (JJ {color}) (NN {shape}))"


def _pp(relation: str, inner: str) -> str:
    if " " in relation:
        word, prep = relation.split()
        return f"(PP (RB {word}) (IN {prep}) {inner})"
    return f"(PP (IN {relation}) {inner})"


def caption_and_parse(objects: list[tuple[str, str]], relation: str | None) -> tuple[list[str], str]:
    """Template caption for (color, shape) pairs and its bracketing."""
    words = [["a", c, s] for c, s in objects]
    nps = [_np(c, s) for c, s in objects]
    if len(objects) == 1:
        return words[0], nps[0]
    rel = relation.split()
    caption = words[0] + rel + words[1]
    if len(objects) == 2:
        return caption, f"(S {nps[0]} {_pp(relation, nps[1])})"
    caption = caption + ["and"] + words[2]
    return caption, f"(S (NP {nps[0]} {_pp(relation, nps[1])}) (CC and) {nps[2]})"


def generate_scene(seed: int, spec: SceneSpec | None = None, scene_id: str | None = None) -> SceneSample:
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    n = spec.object_count
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=n, replace=False)
    kinds = [combos[i] for i in picks]
    relation = RELATIONS[rng.integers(len(RELATIONS))] if n >= 2 else None
    size = spec.image_size
    for _ in range(MAX_ATTEMPTS):
        masks, boxes = [], []
        for color, shape in kinds:
            extent = int(rng.integers(spec.min_size, spec.max_size + 1))
            top = int(rng.integers(0, size - extent + 1))
            left = int(rng.integers(0, size - extent + 1))
            m = render_shape(shape, extent, top, left, size)
            masks.append(m)
            boxes.append(mask_box(m))
        if relation is not None and not _relation_holds(relation, boxes[0], boxes[1]):
            continue
        coarse = np.stack([downsample_max(m, spec.delta) for m in masks]) if size % spec.delta == 0 else np.stack(masks)
        if coarse.sum(axis=0).max() > 1:
            continue
        break
    else:
        raise PlacementError(f"could not place {n} objects without overlap in {MAX_ATTEMPTS} attempts")
    image = np.zeros((size, size, 3))
    for (color, _), m in zip(kinds, masks):
        image[m] = COLORS[color]
    if spec.noise > 0:
        image = np.clip(image + rng.uniform(-spec.noise, spec.noise, size=image.shape), 0.0, 1.0)
    caption, parse = caption_and_parse(kinds, relation)
    objects = [SceneObject(s, c, b, m) for (c, s), b, m in zip(kinds, boxes, masks)]
    return SceneSample(scene_id if scene_id is not None else str(seed), image, caption, parse, objects, relation)


def generate_dataset(seed: int, count: int, spec: SceneSpec | None = None, start: int = 0) -> list[SceneSample]:
    """Samples ``start .. start+count-1``; sample ``i`` uses seed ``seed ^ i``."""
    return [generate_scene(seed ^ i, spec, f"{i:06d}") for i in range(start, start + count)]


# ------------------------------------------------------------------- files


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields_, pos = [], 0
    while len(fields_) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields_.append(raw[pos:end])
        pos = end
    if fields_[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in fields_[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_dataset(samples, directory) -> list[dict]:
    """Write images, masks and ``scenes.jsonl``; returns the manifest entries."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in samples:
        image_file = f"images/{s.id}.grnd"
        tensorio.save_tensors(root / image_file, {"image": s.image})
        objs = []
        for k, obj in enumerate(s.objects):
            mask_file = f"masks/{s.id}_{k}.pgm"
            write_pgm(root / mask_file, obj.mask.astype(np.uint8) * 255)
            objs.append({"shape": obj.shape, "color": obj.color, "box": list(obj.box), "mask-file": mask_file})
        manifest.append({
            "id": s.id,
            "caption": s.caption_text,
            "parse": s.parse,
            "relation": s.relation,
            "image-file": image_file,
            "objects": objs,
        })
    with open(root / "scenes.jsonl", "w", encoding="utf-8") as fh:
        for entry in manifest:
            fh.write(json.dumps(entry) + "\n")
    logger.info("wrote %d scenes to %s", len(manifest), root)
    return manifest


def read_dataset(directory) -> list[SceneSample]:
    root = Path(directory)
    path = root / "scenes.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no scenes.jsonl in {os.fspath(root)}")
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            image = tensorio.load_tensors(root / entry["image-file"])["image"]
            h, w = image.shape[:2]
            objects = []
            for obj in entry["objects"]:
                box = tuple(int(v) for v in obj["box"])
                if not (0 <= box[0] < box[2] <= h and 0 <= box[1] < box[3] <= w):
                    raise ValueError(f"scene {entry['id']}: box {box} outside {h}x{w} image")
                mask = read_pgm(root / obj["mask-file"]) > 0
                objects.append(SceneObject(obj["shape"], obj["color"], box, mask))
            samples.append(SceneSample(
                entry["id"], image, entry["caption"].split(), entry["parse"], objects, entry.get("relation"),
            ))
    return samples
