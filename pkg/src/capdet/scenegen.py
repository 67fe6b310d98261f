"""Synthetic scene generation: colored shapes with exact boxes and captions.

Each scene holds 1-4 colored geometric shapes on a black background.  Boxes,
class labels, and five templated captions are exact by construction, so the
corpus plays the structural role of a captioned detection dataset (five
references per image, boxes + labels per image) at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .boxes import Box, iou

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "purple")

# 8-bit RGB fill per color; the background stays (0, 0, 0) so object pixels
# are recoverable by scanning.
COLOR_RGB = {
    "red": (230, 30, 30),
    "green": (30, 200, 60),
    "blue": (40, 70, 230),
    "yellow": (235, 220, 30),
    "purple": (160, 40, 220),
}

PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN)
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

_VOCAB_WORDS = (
    "a", "an", "the", "photo", "picture", "of", "and", "shows", "image",
    "there", "is", "are", "in", "this", "scene", "contains", "on", "its",
    "own", "with", "next", "to", "left", "right", "above", "below",
) + COLORS + SHAPES


class Vocabulary:
    """Token <-> id table with fixed reserved ids pad=0, start=1, end=2, unk=3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:4] != list(RESERVED):
            raise ValueError("first four tokens must be the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def start_id(self) -> int:
        return 1

    @property
    def end_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def default_vocabulary() -> Vocabulary:
    return Vocabulary(RESERVED + _VOCAB_WORDS)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenization to ids, unknown words -> <unk>, <end> appended."""
    ids = [vocab.index.get(w, vocab.unk_id) for w in text.split()]
    ids.append(vocab.end_id)
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Ids back to a space-joined string, dropping pad/start/end."""
    words = []
    for i in ids:
        if i in (vocab.pad_id, vocab.start_id, vocab.end_id):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: Box


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    image_size: int
    seed: int

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 4:
            raise ValueError(f"scene must have 1..4 objects, got {len(self.objects)}")
        for obj in self.objects:
            b = obj.box
            if b.x_max > self.image_size or b.y_max > self.image_size:
                raise ValueError(f"box {b} outside {self.image_size}px image")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if iou(a.box, b.box) > 0.25:
                    raise ValueError("object boxes overlap more than IoU 0.25")


@dataclass
class SceneRecord:
    """One dataset example: image, ground truth boxes/labels, 5 captions."""

    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: list[Box]
    labels: list[int]
    captions: list[str]

    def validate(self) -> None:
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"record {self.id}: {len(self.boxes)} boxes vs {len(self.labels)} labels")
        if len(self.captions) != 5:
            raise ValueError(f"record {self.id}: expected 5 captions, got {len(self.captions)}")


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 16
    max_size: int = 48
    margin: int = 4          # keep boxes off the border
    separation: int = 2      # min pixel gap between boxes
    placement_retries: int = 100
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS


def _place_boxes(rng: np.random.Generator, n: int, cfg: SceneConfig) -> list[Box]:
    # Boxes are kept pairwise disjoint (a gap of cfg.separation px), stricter
    # than the IoU <= 0.25 bound, so rendered shapes never occlude each other
    # and the pixel-tight-box contract holds unconditionally.
    placed: list[Box] = []
    for _ in range(n):
        for attempt in range(cfg.placement_retries):
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(np.clip(int(round(w * rng.uniform(0.6, 1.6))), cfg.min_size, cfg.max_size))
            x0 = int(rng.integers(cfg.margin, cfg.image_size - cfg.margin - w + 1))
            y0 = int(rng.integers(cfg.margin, cfg.image_size - cfg.margin - h + 1))
            cand = Box(float(x0), float(y0), float(x0 + w), float(y0 + h))
            s = cfg.separation
            grown = np.array([cand.x_min - s, cand.y_min - s, cand.x_max + s, cand.y_max + s])
            if all(iou(grown, p) == 0.0 for p in placed):
                placed.append(cand)
                break
        else:
            raise RuntimeError(
                f"could not place object {len(placed)} within IoU limit "
                f"after {cfg.placement_retries} retries"
            )
    return placed


def _object_phrase(obj: SceneObject) -> str:
    return f"a {obj.color} {obj.shape}"


def _listing(objs: Sequence[SceneObject]) -> str:
    return " and ".join(_object_phrase(o) for o in objs)


def _relation(a: SceneObject, b: SceneObject) -> str:
    # Objects are pre-sorted left-to-right, so the horizontal relation is
    # always "left of"; use above/below when the vertical offset dominates.
    ax = (a.box.x_min + a.box.x_max) / 2
    ay = (a.box.y_min + a.box.y_max) / 2
    bx = (b.box.x_min + b.box.x_max) / 2
    by = (b.box.y_min + b.box.y_max) / 2
    if abs(bx - ax) >= abs(by - ay):
        return "left of"
    return "above" if ay < by else "below"


def scene_captions(objects: Sequence[SceneObject]) -> list[str]:
    """Five deterministic captions, each naming every object's color and shape."""
    objs = sorted(objects, key=lambda o: (o.box.x_min, o.box.y_min))
    listing = _listing(objs)
    if len(objs) == 1:
        spatial = f"{_object_phrase(objs[0])} on its own"
    else:
        rest = "".join(f" with {_object_phrase(o)}" for o in objs[2:])
        spatial = f"{_object_phrase(objs[0])} {_relation(objs[0], objs[1])} {_object_phrase(objs[1])}{rest}"
    return [
        f"a photo of {listing}",
        f"the image shows {listing}",
        f"there is {listing}",
        spatial,
        f"this scene contains {listing}",
    ]


def _shape_mask(shape: str, box: Box, size: int) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers fall inside the shape."""
    ys, xs = np.mgrid[0:size, 0:size]
    cx = xs + 0.5
    cy = ys + 0.5
    x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
    inside = (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    if shape == "square":
        return inside
    w, h = box.width, box.height
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    if shape == "circle":
        # Ellipse inscribed in the box so the tight pixel box matches the spec box.
        return ((cx - mx) / (w / 2)) ** 2 + ((cy - my) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # Apex at top center, base along the bottom edge.
        frac = np.clip((cy - y0) / h, 0, 1)
        return inside & (np.abs(cx - mx) <= frac * (w / 2))
    if shape == "cross":
        bar_x = max(2.0, w / 4)
        bar_y = max(2.0, h / 4)
        return inside & ((np.abs(cx - mx) <= bar_x / 2) | (np.abs(cy - my) <= bar_y / 2))
    raise ValueError(f"unknown shape kind {shape!r}")


def render_image(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to (H, W, 3) float32 in [0, 1], hard edges, black background."""
    size = spec.image_size
    img = np.zeros((size, size, 3), dtype=np.uint8)
    for obj in spec.objects:
        mask = _shape_mask(obj.shape, obj.box, size)
        img[mask] = COLOR_RGB[obj.color]
    return img.astype(np.float32) / 255.0


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> SceneRecord:
    """Deterministic scene for (seed, config): image, boxes, labels, 5 captions."""
    if config.image_size % 32 != 0:
        raise ValueError(f"image_size {config.image_size} not divisible by 32")
    if not config.shapes or not config.colors:
        raise ValueError("shape and color palettes must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE4E, seed]))
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes = _place_boxes(rng, n, config)
    shapes = [config.shapes[int(rng.integers(len(config.shapes)))] for _ in range(n)]
    # Colors are drawn without replacement so objects in one scene are
    # distinguishable by color alone.
    color_ids = rng.permutation(len(config.colors))[:n]
    objects = tuple(
        SceneObject(shape=shapes[i], color=config.colors[int(color_ids[i])], box=boxes[i])
        for i in range(n)
    )
    spec = SceneSpec(objects=objects, image_size=config.image_size, seed=seed)
    spec.validate()
    order = sorted(range(n), key=lambda i: (boxes[i].x_min, boxes[i].y_min))
    record = SceneRecord(
        id=f"scene_{seed:010d}",
        image=render_image(spec),
        boxes=[boxes[i] for i in order],
        labels=[SHAPES.index(objects[i].shape) for i in order],
        captions=scene_captions(objects),
    )
    record.validate()
    return record


def generate_dataset(base_seed: int, count: int, config: SceneConfig = SceneConfig()) -> list[SceneRecord]:
    """Records i=0..count-1 generated from seeds base_seed+i (order independent)."""
    return [generate_scene(base_seed + i, config) for i in range(count)]


def class_names(config: SceneConfig = SceneConfig()) -> list[str]:
    return list(config.shapes)


def with_image_size(config: SceneConfig, image_size: int) -> SceneConfig:
    scale = image_size / config.image_size
    return replace(
        config,
        image_size=image_size,
        min_size=max(8, int(config.min_size * scale)),
        max_size=max(12, int(config.max_size * scale)),
    )
