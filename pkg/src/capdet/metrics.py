"""Caption and detection metrics, plus whole-checkpoint evaluation.

Caption side: corpus BLEU-1..4 (modified n-gram precision, brevity penalty,
no smoothing), ROUGE-L (LCS F-measure, beta = 1.2, max over references),
and plain CIDEr (TF-IDF n-gram cosine, n = 1..4, scaled by 10, IDF from the
evaluation reference corpus).  Detection side: COCO-style AP averaged over
IoU thresholds 0.50:0.05:0.95 with 101-point interpolated precision and
size buckets rescaled to the evaluation image size.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import boxes as B
from . import checkpoint as ckpt
from .caption_head import beam_search
from .detect_head import detect
from .model import build_model
from .scenegen import UNK_TOKEN, Vocabulary, detokenize
from .dataset_io import read_dataset

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
ROUGE_BETA = 1.2
CIDER_MAX_N = 4


@dataclass(frozen=True)
class CaptionEvalSet:
    """Per image: one candidate token list and its reference token lists."""

    candidates: tuple[tuple, ...]
    references: tuple[tuple[tuple, ...], ...]

    def __post_init__(self):
        if len(self.candidates) != len(self.references):
            raise ValueError("one candidate per reference set required")
        if any(len(refs) == 0 for refs in self.references):
            raise ValueError("every image needs at least one reference")

    @classmethod
    def from_lists(cls, candidates, references) -> "CaptionEvalSet":
        return cls(tuple(tuple(c) for c in candidates),
                   tuple(tuple(tuple(r) for r in refs) for refs in references))

    def __len__(self) -> int:
        return len(self.candidates)


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(eval_set: CaptionEvalSet, n: int) -> float:
    """Corpus BLEU-n: geometric mean of clipped precisions times brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    num = [0] * n
    den = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(eval_set.candidates, eval_set.references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngram_counts(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                rc = ngram_counts(r, k)
                for g, c in rc.items():
                    max_ref[g] = max(max_ref[g], c)
            num[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            den[k - 1] += sum(counts.values())
    if any(d == 0 for d in den) or any(m == 0 for m in num):
        return 0.0
    log_p = sum(math.log(m / d) for m, d in zip(num, den)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def _lcs_len(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(eval_set: CaptionEvalSet) -> float:
    """Mean over images of the best LCS F-measure against any reference."""
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    b2 = ROUGE_BETA ** 2
    scores = []
    for cand, refs in zip(eval_set.candidates, eval_set.references):
        best = 0.0
        if cand:
            for r in refs:
                l = _lcs_len(cand, r)
                if l == 0 or not r:
                    continue
                p = l / len(cand)
                rc = l / len(r)
                best = max(best, (1 + b2) * p * rc / (rc + b2 * p))
        scores.append(best)
    return float(np.mean(scores))


def cider(eval_set: CaptionEvalSet) -> float:
    """Plain CIDEr: 10 x mean over n of mean-over-references TF-IDF cosine."""
    n_images = len(eval_set)
    if n_images < 2:
        raise ValueError("CIDEr needs a corpus of at least 2 images for IDF")
    df = [Counter() for _ in range(CIDER_MAX_N)]
    for refs in eval_set.references:
        for k in range(CIDER_MAX_N):
            seen = set()
            for r in refs:
                seen.update(ngram_counts(r, k + 1))
            for g in seen:
                df[k][g] += 1
    log_n = math.log(n_images)

    def tfidf(tokens, k):
        vec = {}
        for g, c in ngram_counts(tokens, k + 1).items():
            vec[g] = c * (log_n - math.log(max(1.0, df[k][g])))
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    scores = []
    for cand, refs in zip(eval_set.candidates, eval_set.references):
        per_n = []
        for k in range(CIDER_MAX_N):
            cvec, cnorm = tfidf(cand, k)
            sims = []
            for r in refs:
                rvec, rnorm = tfidf(r, k)
                if cnorm == 0 or rnorm == 0:
                    sims.append(0.0)
                    continue
                dot = sum(v * rvec.get(g, 0.0) for g, v in cvec.items())
                sims.append(dot / (cnorm * rnorm))
            per_n.append(float(np.mean(sims)))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class DetectionEvalSet:
    """Per image: predicted (box, class, score) triples and ground truth."""

    detections: tuple          # per image: list of (box(4,), class_id, score)
    gt_boxes: tuple            # per image: (M, 4) arrays
    gt_labels: tuple           # per image: (M,) arrays
    num_classes: int
    image_size: int = 640

    @classmethod
    def from_lists(cls, detections, gt_boxes, gt_labels, num_classes, image_size=640):
        return cls(tuple(tuple((np.asarray(b, dtype=np.float64), int(c), float(s))
                               for b, c, s in dets) for dets in detections),
                   tuple(np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in gt_boxes),
                   tuple(np.asarray(l, dtype=np.int64) for l in gt_labels),
                   num_classes, image_size)

    def __len__(self) -> int:
        return len(self.detections)


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated average precision."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def _class_dets(eval_set: DetectionEvalSet, cls: int):
    """All detections of one class, ordered score desc then (image, box)."""
    rows = []
    for i, dets in enumerate(eval_set.detections):
        for box, c, score in dets:
            if c == cls:
                rows.append((i, np.asarray(box, dtype=np.float64), float(score)))
    rows.sort(key=lambda r: (-r[2], r[0], tuple(r[1])))
    return rows


def _ap_single(eval_set: DetectionEvalSet, cls: int, thr: float,
               area_rng: tuple[float, float], dump=None) -> float | None:
    """AP for one (class, IoU threshold, area bucket); None when bucket empty."""
    lo, hi = area_rng
    gt_ignore, n_pos = [], 0
    for g, labels in zip(eval_set.gt_boxes, eval_set.gt_labels):
        sel = labels == cls
        areas = B.box_area(g[sel]) if sel.any() else np.zeros(0)
        ig = (areas < lo) | (areas >= hi)
        gt_ignore.append((np.flatnonzero(sel), ig))
        n_pos += int((~ig).sum())
    if n_pos == 0:
        return None
    matched = [set() for _ in range(len(eval_set))]
    tp, fp = [], []
    for img, box, score in _class_dets(eval_set, cls):
        idxs, ig = gt_ignore[img]
        gts = eval_set.gt_boxes[img][idxs]

        def best_match(use_ignored: bool) -> tuple[int, float]:
            bj, bi = -1, thr
            for j in range(len(idxs)):
                if j in matched[img] or ig[j] != use_ignored:
                    continue
                v = B.iou(box, gts[j])
                if v >= bi and (v > bi or bj == -1):
                    bj, bi = j, v
            return bj, bi

        # Prefer a countable gt; fall back to an ignored one (det then ignored).
        best_j, best_iou = best_match(use_ignored=False)
        hit_ignored = False
        if best_j < 0:
            best_j, best_iou = best_match(use_ignored=True)
            hit_ignored = best_j >= 0
        if best_j >= 0:
            matched[img].add(best_j)
            if dump is not None:
                dump.append({"image": img, "class": cls, "score": score,
                             "box": [float(x) for x in box],
                             "matched_gt": int(idxs[best_j]), "iou": float(best_iou)})
            if hit_ignored:
                continue
            tp.append(1.0)
            fp.append(0.0)
        else:
            if dump is not None:
                dump.append({"image": img, "class": cls, "score": score,
                             "box": [float(x) for x in box], "matched_gt": None, "iou": 0.0})
            area = float(B.box_area(box[None])[0])
            if area < lo or area >= hi:
                continue
            tp.append(0.0)
            fp.append(1.0)
    if not tp:
        return 0.0
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(fp)
    recalls = tp_c / n_pos
    precisions = tp_c / np.maximum(tp_c + fp_c, 1e-12)
    return _interpolated_ap(recalls, precisions)


def coco_map(eval_set: DetectionEvalSet, dump_path=None) -> dict[str, float]:
    """COCO-style AP summary over classes present in the ground truth."""
    for dets in eval_set.detections:
        for _, c, _ in dets:
            if not 0 <= c < eval_set.num_classes:
                raise ValueError(f"detection class {c} outside label space "
                                 f"[0, {eval_set.num_classes})")
    classes = sorted({int(c) for labels in eval_set.gt_labels for c in labels})
    scale = (eval_set.image_size / 640.0) ** 2
    buckets = {
        "all": (0.0, float("inf")),
        "S": (0.0, 32.0 ** 2 * scale),
        "M": (32.0 ** 2 * scale, 96.0 ** 2 * scale),
        "L": (96.0 ** 2 * scale, float("inf")),
    }
    dump = [] if dump_path is not None else None

    def mean_ap(thrs, bucket) -> float:
        vals = []
        for c in classes:
            for t in thrs:
                want_dump = dump is not None and bucket == "all" and t == IOU_THRESHOLDS[0]
                ap = _ap_single(eval_set, c, t, buckets[bucket], dump if want_dump else None)
                if ap is not None:
                    vals.append(ap)
        return float(np.mean(vals)) if vals else -1.0

    out = {
        "mAP": mean_ap(IOU_THRESHOLDS, "all"),
        "AP50": mean_ap([0.5], "all"),
        "AP75": mean_ap([0.75], "all"),
        "AP_S": mean_ap(IOU_THRESHOLDS, "S"),
        "AP_M": mean_ap(IOU_THRESHOLDS, "M"),
        "AP_L": mean_ap(IOU_THRESHOLDS, "L"),
    }
    if dump_path is not None:
        with open(dump_path, "w") as f:
            for row in dump:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return out


REPORT_COLUMNS = ["B1", "B2", "B3", "B4", "RougeL", "CIDEr",
                  "mAP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"]


def caption_to_words(ids: list[int], vocab: Vocabulary) -> list[str]:
    return detokenize(ids, vocab).split()


def reference_words(text: str, vocab: Vocabulary) -> list[str]:
    """Reference tokens under the training tokenizer (OOV collapses to <unk>)."""
    return [w if w in vocab.index else UNK_TOKEN for w in text.split()]


def load_eval_model(checkpoint_path, config_path=None):
    checkpoint_path = Path(checkpoint_path)
    config_path = Path(config_path) if config_path else checkpoint_path.parent / "config.json"
    cfg = json.loads(Path(config_path).read_text())
    vocab = Vocabulary.load(cfg["data"]["vocab"])
    model = build_model(cfg["model"]["vocab_size"], cfg["model"]["num_classes"],
                        preset=cfg["model"]["preset"])
    ckpt.load_checkpoint(checkpoint_path, model)
    model.eval()
    return model, vocab, cfg


def evaluate(checkpoint_path, manifest_path, beam: int = 5, config_path=None,
             match_dump=None) -> dict[str, float]:
    """Caption + detection metrics for a checkpoint over one manifest split."""
    model, vocab, _ = load_eval_model(checkpoint_path, config_path)
    records = read_dataset(manifest_path, load_images=True)
    if not records:
        raise ValueError(f"{manifest_path}: empty manifest")
    candidates, references = [], []
    detections, gt_boxes, gt_labels = [], [], []
    image_size = 0
    for rec in records:
        img = torch.from_numpy(rec.image).permute(2, 0, 1).contiguous()
        image_size = max(image_size, img.shape[-1], img.shape[-2])
        with torch.no_grad():
            fmap = model.backbone(img[None]).maps[-1]
        ids, _ = beam_search(model.decoder, fmap, beam=beam)
        candidates.append(caption_to_words(ids, vocab))
        references.append([reference_words(t, vocab) for t in rec.captions])
        dets = detect(img, model)
        detections.append([(d.box.as_array(), d.class_id, d.score) for d in dets])
        gt_boxes.append(np.array([b.as_array() for b in rec.boxes],
                                 dtype=np.float64).reshape(-1, 4))
        gt_labels.append(np.asarray(rec.labels, dtype=np.int64))

    cap_set = CaptionEvalSet.from_lists(candidates, references)
    det_set = DetectionEvalSet.from_lists(detections, gt_boxes, gt_labels,
                                          model.det_cfg.num_classes, image_size)
    row = {f"B{k}": bleu(cap_set, k) for k in (1, 2, 3, 4)}
    row["RougeL"] = rouge_l(cap_set)
    row["CIDEr"] = cider(cap_set)
    row.update(coco_map(det_set, dump_path=match_dump))
    return row


def write_report(row: dict[str, float], csv_path, extra_cols: dict | None = None) -> None:
    """One-row CSV with the fixed column set (prefixed by any extra columns)."""
    extra = extra_cols or {}
    cols = list(extra) + REPORT_COLUMNS
    with open(csv_path, "w") as f:
        f.write(",".join(cols) + "\n")
        cells = [str(extra[k]) for k in extra] + [f"{row[k]:.6f}" for k in REPORT_COLUMNS]
        f.write(",".join(cells) + "\n")
