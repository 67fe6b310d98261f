"""Independent brute-force oracles for metric and matching tests.

Everything here is written with plain Python loops and dicts, deliberately
avoiding the vectorized implementations under test.  Slow is fine; these run
on tiny instances only.
"""

import math
from collections import Counter


def ngrams(words, n):
    return [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]


def bleu_oracle(candidates, references, n):
    """Corpus BLEU-n: geometric mean of clipped modified precisions for
    orders 1..n, closest-ref brevity penalty, unsmoothed (any zero numerator
    or denominator gives 0)."""
    num = [0] * n
    den = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        for k in range(1, n + 1):
            counts = Counter(ngrams(cand, k))
            max_ref = Counter()
            for ref in refs:
                rc = Counter(ngrams(ref, k))
                for g, c in rc.items():
                    max_ref[g] = max(max_ref[g], c)
            for g, c in counts.items():
                num[k - 1] += min(c, max_ref.get(g, 0))
            den[k - 1] += max(0, len(cand) - k + 1)
        cand_len += len(cand)
        # closest reference length; ties go to the shorter reference
        best = None
        for ref in refs:
            key = (abs(len(ref) - len(cand)), len(ref))
            if best is None or key < best:
                best = key
        ref_len += best[1]
    if any(v == 0 for v in num) or any(v == 0 for v in den):
        return 0.0
    log_precision = sum(math.log(a / b) for a, b in zip(num, den)) / n
    if cand_len > ref_len:
        bp = 1.0
    elif cand_len == 0:
        return 0.0
    else:
        bp = math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision)


def lcs_oracle(a, b):
    """Quadratic LCS length by explicit table."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l_oracle(candidates, references, beta=1.2):
    """Mean over images of max-over-references LCS F-measure."""
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            if not cand or not ref:
                continue
            lcs = lcs_oracle(cand, ref)
            if lcs == 0:
                continue
            p = lcs / len(cand)
            r = lcs / len(ref)
            f = (1 + beta * beta) * r * p / (r + beta * beta * p)
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


def cider_oracle(candidates, references):
    """Plain CIDEr: mean over n=1..4 of mean-over-refs TF-IDF cosine, x10,
    averaged over images.  IDF from the reference corpus (per-image document
    frequency over the union of that image's reference n-grams)."""
    n_images = len(candidates)
    result_per_image = [0.0] * n_images
    for n in range(1, 5):
        df = Counter()
        for refs in references:
            seen = set()
            for ref in refs:
                seen.update(ngrams(ref, n))
            for g in seen:
                df[g] += 1

        def tfidf(words):
            vec = {}
            for g, c in Counter(ngrams(words, n)).items():
                vec[g] = c * (math.log(n_images) - math.log(max(1.0, df[g])))
            return vec

        def cosine(u, v):
            nu = math.sqrt(sum(x * x for x in u.values()))
            nv = math.sqrt(sum(x * x for x in v.values()))
            if nu == 0 or nv == 0:
                return 0.0
            dot = sum(u[g] * v.get(g, 0.0) for g in u)
            return dot / (nu * nv)

        for i, (cand, refs) in enumerate(zip(candidates, references)):
            cv = tfidf(cand)
            sim = sum(cosine(cv, tfidf(ref)) for ref in refs) / len(refs)
            result_per_image[i] += 10.0 * sim / 4.0
    return sum(result_per_image) / n_images


def iou_oracle(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_oracle(boxes, scores, classes, iou_thr):
    """Greedy NMS: descending score, ties broken by lexicographic box;
    suppress IoU > thr against kept detections of the same class."""
    order = sorted(range(len(boxes)),
                   key=lambda i: (-scores[i], tuple(boxes[i])))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if classes[i] == classes[j] and iou_oracle(boxes[i], boxes[j]) > iou_thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def match_oracle(anchors, gt_boxes, pos_thr, neg_thr):
    """Per-anchor {1 pos, 0 neg, -1 ignore} + matched gt, by the stated rules:
    max-IoU >= pos_thr positive, < neg_thr negative, else ignore; then each
    gt's own argmax anchor is positive when their IoU is nonzero."""
    labels = []
    matched = []
    for a in anchors:
        ious = [iou_oracle(a, g) for g in gt_boxes]
        best = max(ious) if ious else 0.0
        arg = ious.index(best) if ious else -1
        if not gt_boxes or best < neg_thr:
            labels.append(0)
            matched.append(-1)
        elif best >= pos_thr:
            labels.append(1)
            matched.append(arg)
        else:
            labels.append(-1)
            matched.append(-1)
    for g, gt in enumerate(gt_boxes):
        ious = [iou_oracle(a, gt) for a in anchors]
        best = max(ious)
        if best > 0:
            a = ious.index(best)
            labels[a] = 1
            matched[a] = g
    return labels, matched


def ap_oracle(detections, gt_boxes, gt_labels, num_classes, iou_thr,
              area_rng=None, image_size=640):
    """Single-threshold COCO-style AP averaged over the classes present in gt.

    detections: per image list of (box, class, score).  Greedy matching in
    score order (ties: image index, then box tuple), preferring the
    highest-IoU unmatched gt; gts outside area_rng are ignored (matches to
    them do not count either way); unmatched detections outside area_rng are
    dropped rather than counted as false positives.
    """
    scale = (image_size / 640.0) ** 2
    if area_rng is None:
        lo, hi = 0.0, float("inf")
    else:
        lo, hi = area_rng[0] * scale, area_rng[1] * scale
    classes = sorted({int(c) for labels in gt_labels for c in labels})
    aps = []
    for cls in classes:
        rows = []  # (score, image, box)
        for img, dets in enumerate(detections):
            for box, c, score in dets:
                if c == cls:
                    rows.append((score, img, tuple(box)))
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        gt_flags = {}
        n_pos = 0
        for img in range(len(gt_boxes)):
            flags = []
            for b, l in zip(gt_boxes[img], gt_labels[img]):
                if int(l) != cls:
                    flags.append(None)  # other class, not a target
                    continue
                area = (b[2] - b[0]) * (b[3] - b[1])
                ignored = not (lo <= area < hi)
                flags.append({"box": b, "ignored": ignored, "used": False})
                if not ignored:
                    n_pos += 1
            gt_flags[img] = flags
        tps, fps = [], []
        for score, img, box in rows:
            best_iou, best_j = 0.0, -1
            # prefer countable gt
            for j, f in enumerate(gt_flags[img]):
                if f is None or f["used"] or f["ignored"]:
                    continue
                v = iou_oracle(box, f["box"])
                if v >= iou_thr and v > best_iou:
                    best_iou, best_j = v, j
            if best_j < 0:
                for j, f in enumerate(gt_flags[img]):
                    if f is None or f["used"] or not f["ignored"]:
                        continue
                    v = iou_oracle(box, f["box"])
                    if v >= iou_thr and v > best_iou:
                        best_iou, best_j = v, j
                if best_j >= 0:
                    gt_flags[img][best_j]["used"] = True
                    continue  # matched an ignored gt: drop the detection
                det_area = (box[2] - box[0]) * (box[3] - box[1])
                if not (lo <= det_area < hi):
                    continue  # unmatched but out of bucket: ignored
                tps.append(0)
                fps.append(1)
            else:
                gt_flags[img][best_j]["used"] = True
                tps.append(1)
                fps.append(0)
        if n_pos == 0:
            aps.append(None)
            continue
        if not tps:
            aps.append(0.0)
            continue
        tp = fp = 0
        precisions, recalls = [], []
        for t, f in zip(tps, fps):
            tp += t
            fp += f
            precisions.append(tp / (tp + fp))
            recalls.append(tp / n_pos)
        ap = 0.0
        for k in range(101):
            r = k / 100.0
            best_p = 0.0
            for p, rec in zip(precisions, recalls):
                if rec >= r - 1e-12 and p > best_p:
                    best_p = p
            ap += best_p / 101.0
        aps.append(ap)
    valid = [a for a in aps if a is not None]
    return sum(valid) / len(valid) if valid else -1.0


def anchors_oracle(grid_sizes, strides, scale_factor, ratios):
    """Anchor tiling from the stated convention: one scale per level
    (scale_factor * stride), every ratio at every cell center, cell-major
    (row, column, ratio) order, w = scale/sqrt(r), h = scale*sqrt(r)."""
    out = []
    for (gh, gw), stride in zip(grid_sizes, strides):
        scale = scale_factor * stride
        for y in range(gh):
            for x in range(gw):
                cy = (y + 0.5) * stride
                cx = (x + 0.5) * stride
                for r in ratios:
                    w = scale / math.sqrt(r)
                    h = scale * math.sqrt(r)
                    out.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    return out


def softplus_oracle(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def bce_oracle(logit, target):
    return softplus_oracle(-logit) if target == 1 else softplus_oracle(logit)


def smooth_l1_oracle(d, beta):
    return 0.5 * d * d / beta if abs(d) < beta else abs(d) - 0.5 * beta


def encode_oracle(anchor, target, stds=(0.1, 0.1, 0.2, 0.2)):
    aw = anchor[2] - anchor[0]
    ah = anchor[3] - anchor[1]
    ax = anchor[0] + 0.5 * aw
    ay = anchor[1] + 0.5 * ah
    tw = target[2] - target[0]
    th = target[3] - target[1]
    tx = target[0] + 0.5 * tw
    ty = target[1] + 0.5 * th
    raw = [(tx - ax) / aw, (ty - ay) / ah, math.log(tw / aw), math.log(th / ah)]
    return [r / s for r, s in zip(raw, stds)]


def roi_align_oracle(fmap, stride, box, bins):
    """Bilinear pooling of one (C, H, W) map over one box: a single sample at
    each bin center, neighbor indices clamped to the map border."""
    c, h, w = len(fmap), len(fmap[0]), len(fmap[0][0])
    out = [[[0.0] * bins for _ in range(bins)] for _ in range(c)]
    for i in range(bins):
        py = box[1] + (i + 0.5) / bins * (box[3] - box[1])
        v = py / stride - 0.5
        v0 = min(max(math.floor(v), 0), h - 1)
        v1 = min(v0 + 1, h - 1)
        fv = min(max(v - v0, 0.0), 1.0)
        for j in range(bins):
            px = box[0] + (j + 0.5) / bins * (box[2] - box[0])
            u = px / stride - 0.5
            u0 = min(max(math.floor(u), 0), w - 1)
            u1 = min(u0 + 1, w - 1)
            fu = min(max(u - u0, 0.0), 1.0)
            for ch in range(c):
                top = fmap[ch][v0][u0] * (1 - fu) + fmap[ch][v0][u1] * fu
                bot = fmap[ch][v1][u0] * (1 - fu) + fmap[ch][v1][u1] * fu
                out[ch][i][j] = top * (1 - fv) + bot * fv
    return out


def _balanced_sample_oracle(flags, size, frac, rng):
    """Mirror of the balanced sampler contract; rng is consumed only when a
    pool exceeds its cap, with the same call signature as the code under test
    so a shared seed yields the same indices."""
    import numpy as np
    pos_pool = np.flatnonzero(np.asarray(flags) == 1)
    neg_pool = np.flatnonzero(np.asarray(flags) == 0)
    n_pos = min(len(pos_pool), int(round(size * frac)))
    if len(pos_pool) > n_pos:
        pos_pool = np.sort(rng.choice(pos_pool, size=n_pos, replace=False))
    n_neg = min(len(neg_pool), size - n_pos)
    if len(neg_pool) > n_neg:
        neg_pool = np.sort(rng.choice(neg_pool, size=n_neg, replace=False))
    return [int(k) for k in pos_pool], [int(k) for k in neg_pool]


def detection_loss_oracle(obj_logits, deltas, maps, strides, gt_boxes, gt_labels,
                          proposals, cfg, roi_weights, rng):
    """Scratch re-derivation of the four detection loss terms.

    obj_logits (B, N) and deltas (B, N, 4) are the region head outputs as
    plain nested lists/arrays; maps[level][image] is a (C, h, w) array;
    proposals pins the per-image RoI boxes; cfg is a dict of the matching,
    sampling, and pooling constants; roi_weights holds the RoI head affine
    arrays (w1, b1, w2, b2, wc, bc, wr, br).  rng must be seeded the same as
    the run under test since the balanced sampler draws from it.
    """
    grid_sizes = [(len(m[0][0]), len(m[0][0][0])) for m in maps]
    anchors = anchors_oracle(grid_sizes, strides, cfg["anchor_scale_factor"],
                             cfg["anchor_ratios"])
    background = cfg["num_classes"]
    beta = cfg["smooth_l1_beta"]
    base_scale = cfg["anchor_scale_factor"] * strides[0]
    num_levels = len(maps)
    n_images = len(gt_boxes)
    terms = {"rpn_cls": [], "rpn_reg": [], "roi_cls": [], "roi_reg": []}

    def affine(x, w, b):
        return [sum(wi * xi for wi, xi in zip(row, x)) + bi
                for row, bi in zip(w, b)]

    for i in range(n_images):
        gts = [list(g) for g in gt_boxes[i]]
        labels, matched = match_oracle(anchors, gts, cfg["rpn_pos_thr"],
                                       cfg["rpn_neg_thr"])
        pos, neg = _balanced_sample_oracle(labels, cfg["rpn_sample_size"],
                                           cfg["rpn_pos_fraction"], rng)
        cls_terms = [bce_oracle(float(obj_logits[i][k]), 1) for k in pos]
        cls_terms += [bce_oracle(float(obj_logits[i][k]), 0) for k in neg]
        terms["rpn_cls"].append(sum(cls_terms) / len(cls_terms))
        if pos:
            reg_terms = []
            for k in pos:
                target = encode_oracle(anchors[k], gts[matched[k]])
                reg_terms.append(sum(
                    smooth_l1_oracle(float(deltas[i][k][c]) - target[c], beta)
                    for c in range(4)))
            terms["rpn_reg"].append(sum(reg_terms) / len(reg_terms))
        else:
            terms["rpn_reg"].append(0.0)

        props = [list(p) for p in proposals[i]]
        roi_classes, roi_matched = [], []
        for p in props:
            ious = [iou_oracle(p, g) for g in gts]
            best = max(ious) if ious else 0.0
            if ious and best >= cfg["roi_fg_thr"]:
                arg = ious.index(best)
                roi_classes.append(int(gt_labels[i][arg]))
                roi_matched.append(arg)
            else:
                roi_classes.append(background)
                roi_matched.append(-1)
        flags = [1 if c != background else 0 for c in roi_classes]
        fg, bg = _balanced_sample_oracle(flags, cfg["roi_sample_size"],
                                         cfg["roi_fg_fraction"], rng)
        sample = fg + bg
        cls_vals, reg_vals = [], []
        for k in sample:
            box = props[k]
            size = math.sqrt(max((box[2] - box[0]) * (box[3] - box[1]), 1e-12))
            lvl = min(max(round(math.log2(size / base_scale)), 0), num_levels - 1)
            pooled = roi_align_oracle(maps[lvl][i], strides[lvl], box,
                                      cfg["roi_bins"])
            x = [val for ch in pooled for row in ch for val in row]
            x = [max(v, 0.0) for v in affine(x, *roi_weights[:2])]
            x = [max(v, 0.0) for v in affine(x, roi_weights[2], roi_weights[3])]
            logits = affine(x, roi_weights[4], roi_weights[5])
            m = max(logits)
            lse = m + math.log(sum(math.exp(l - m) for l in logits))
            cls_vals.append(lse - logits[roi_classes[k]])
            if roi_classes[k] != background:
                reg_row = affine(x, roi_weights[6], roi_weights[7])
                cls_id = roi_classes[k]
                pred = reg_row[cls_id * 4:(cls_id + 1) * 4]
                target = encode_oracle(box, gts[roi_matched[k]])
                reg_vals.append(sum(
                    smooth_l1_oracle(pred[c] - target[c], beta)
                    for c in range(4)))
        terms["roi_cls"].append(sum(cls_vals) / len(cls_vals))
        terms["roi_reg"].append(sum(reg_vals) / len(reg_vals) if reg_vals else 0.0)

    return {k: sum(v) / n_images for k, v in terms.items()}
