"""Dataset serialization: P6 PPM images, JSON Lines manifests, COCO ingestion.

Manifest format, one JSON object per line:
    {"id": str, "image": relative path, "boxes": [[x1,y1,x2,y2],...],
     "labels": [int,...], "captions": [str x5]}
Images are binary PPM (P6), 8-bit RGB, loaded to float in [0, 1] by /255.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from .boxes import Box
from .scenegen import SceneRecord

log = logging.getLogger(__name__)


def write_ppm(path, image: np.ndarray) -> None:
    """Write (H, W, 3) float [0,1] or uint8 image as binary PPM (P6)."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into (H, W, 3) float32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    if pixels.size != h * w * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return pixels.reshape(h, w, 3).astype(np.float32) / 255.0


def _record_to_line(record: SceneRecord, image_rel: str) -> str:
    return json.dumps(
        {
            "id": record.id,
            "image": image_rel,
            "boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in record.boxes],
            "labels": list(record.labels),
            "captions": list(record.captions),
        }
    )


def write_dataset(records, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write records (images as PPM + manifest) under out_dir; returns manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for record in records:
        record.validate()
        rel = f"images/{record.id}.ppm"
        write_ppm(out_dir / rel, record.image)
        lines.append(_record_to_line(record, rel))
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def _parse_line(obj: dict, manifest_dir: Path, load_images: bool) -> SceneRecord:
    rec_id = obj.get("id", "<missing id>")
    boxes = [Box(*map(float, b)) for b in obj["boxes"]]
    labels = [int(x) for x in obj["labels"]]
    captions = [str(c) for c in obj["captions"]]
    if len(boxes) != len(labels):
        raise ValueError(f"record {rec_id}: boxes/labels length mismatch")
    if len(captions) != 5:
        raise ValueError(f"record {rec_id}: expected 5 captions, got {len(captions)}")
    image_path = manifest_dir / obj["image"]
    if load_images:
        if not image_path.is_file():
            raise ValueError(f"record {rec_id}: missing image file {image_path}")
        try:
            image = read_ppm(image_path)
        except ValueError as exc:
            raise ValueError(f"record {rec_id}: {exc}") from exc
    else:
        image = np.zeros((0, 0, 3), dtype=np.float32)
    return SceneRecord(id=str(obj["id"]), image=image, boxes=boxes, labels=labels, captions=captions)


def read_dataset(manifest_path, load_images: bool = True) -> list[SceneRecord]:
    """Load all records referenced by a manifest; errors name the offending record."""
    manifest_path = Path(manifest_path)
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            records.append(_parse_line(json.loads(line), manifest_path.parent, load_images))
    return records


def ingest_coco(annotation_file, image_dir, out_manifest) -> Path:
    """Convert COCO-style annotations to this package's manifest format.

    Expects one JSON file carrying both detection and caption annotations
    ("images", "categories", and a mixed "annotations" list where entries
    with a "bbox" are instances and entries with a "caption" are captions).
    Boxes convert from (x, y, w, h) to (x1, y1, x2, y2); caption lists are
    truncated/padded (duplicating the last) to exactly 5.  Images without
    captions are skipped with a logged warning count.
    """
    with open(annotation_file, encoding="utf-8") as fh:
        coco = json.load(fh)
    categories = sorted(coco.get("categories", []), key=lambda c: c["id"])
    cat_to_class = {c["id"]: i for i, c in enumerate(categories)}
    by_image_boxes: dict[int, list] = {}
    by_image_caps: dict[int, list] = {}
    for ann in coco.get("annotations", []):
        img_id = ann["image_id"]
        if "bbox" in ann:
            cat = ann["category_id"]
            if cat not in cat_to_class:
                raise ValueError(f"annotation references unknown category id {cat}")
            x, y, w, h = ann["bbox"]
            by_image_boxes.setdefault(img_id, []).append(
                ([float(x), float(y), float(x + w), float(y + h)], cat_to_class[cat])
            )
        elif "caption" in ann:
            by_image_caps.setdefault(img_id, []).append(str(ann["caption"]).strip())

    out_manifest = Path(out_manifest)
    out_manifest.parent.mkdir(parents=True, exist_ok=True)
    image_dir = Path(image_dir)
    skipped = 0
    lines = []
    for img in coco.get("images", []):
        img_id = img["id"]
        caps = by_image_caps.get(img_id, [])
        if not caps:
            skipped += 1
            continue
        caps = caps[:5]
        while len(caps) < 5:
            caps.append(caps[-1])
        entries = by_image_boxes.get(img_id, [])
        rel = os.path.relpath(image_dir / img["file_name"], out_manifest.parent)
        lines.append(
            json.dumps(
                {
                    "id": str(img_id),
                    "image": rel,
                    "boxes": [e[0] for e in entries],
                    "labels": [e[1] for e in entries],
                    "captions": caps,
                }
            )
        )
    if skipped:
        log.warning("ingest: skipped %d images without captions", skipped)
    with open(out_manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return out_manifest
