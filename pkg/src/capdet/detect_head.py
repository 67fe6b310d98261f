"""Detection branch: FPN neck, RPN, RoI head, four-term loss, NMS inference.

The loss is the unweighted sum of four terms (RPN objectness BCE, RPN box
smooth-L1, RoI classification CE over C+1 classes, RoI box smooth-L1), each
normalized by its own sample count.  Matching, sampling, and proposal
constants live in :class:`DetectionConfig` and are deliberately small.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import boxes as B
from .backbone import FeaturePyramid


@dataclass(frozen=True)
class DetectionConfig:
    num_classes: int
    fpn_dim: int = 64
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scale_factor: float = 4.0  # one anchor scale per level: factor * stride
    rpn_pos_thr: float = 0.7
    rpn_neg_thr: float = 0.3
    rpn_sample_size: int = 64
    rpn_pos_fraction: float = 0.5
    roi_fg_thr: float = 0.5
    roi_sample_size: int = 32
    roi_fg_fraction: float = 0.25
    pre_nms_top: int = 256
    post_nms_top: int = 64
    proposal_nms_thr: float = 0.7
    score_thr: float = 0.05
    nms_thr: float = 0.5
    max_dets: int = 100
    roi_bins: int = 3
    roi_hidden: int = 256
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one object class")
        if self.rpn_pos_thr <= self.rpn_neg_thr:
            raise ValueError("rpn_pos_thr must exceed rpn_neg_thr")

    @property
    def background_class(self) -> int:
        return self.num_classes


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Elementwise smooth-L1: quadratic inside |d| < beta, linear outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = pred - target
    return torch.where(d.abs() < beta, 0.5 * d * d / beta, d.abs() - 0.5 * beta)


class FPN(nn.Module):
    """Four backbone maps -> five maps of uniform channel width.

    Levels 1..4 come from 1x1 laterals fused top-down with nearest upsampling
    and smoothed by a 3x3 conv; level 5 is a stride-2 downsample of level 4.
    """

    def __init__(self, in_channels: tuple[int, ...], out_dim: int):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError(f"expected 4 input maps, got {len(in_channels)}")
        self.out_dim = out_dim
        self.in_channels = tuple(in_channels)
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_dim, 1) for c in in_channels)
        self.smooths = nn.ModuleList(nn.Conv2d(out_dim, out_dim, 3, padding=1) for _ in in_channels)
        self.forward_calls = 0

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        self.forward_calls += 1
        if len(pyramid) != 4:
            raise ValueError(f"expected 4 input maps, got {len(pyramid)}")
        for m, c in zip(pyramid.maps, self.in_channels):
            if m.shape[1] != c:
                raise ValueError(f"channel mismatch: map has {m.shape[1]}, lateral expects {c}")
        laterals = [lat(m) for lat, m in zip(self.laterals, pyramid.maps)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(laterals[i + 1], scale_factor=2, mode="nearest")
        outs = [smooth(lat) for smooth, lat in zip(self.smooths, laterals)]
        outs.append(F.max_pool2d(outs[-1], kernel_size=1, stride=2))
        strides = list(pyramid.strides) + [pyramid.strides[-1] * 2]
        return FeaturePyramid(maps=outs, strides=strides)


@dataclass
class AnchorSet:
    """Anchor boxes tiled over each FPN level, in image coordinates."""

    per_level: list[np.ndarray]  # (N_l, 4) each
    strides: list[int]
    scales: list[float]
    ratios: tuple[float, ...]

    @property
    def all_boxes(self) -> np.ndarray:
        return np.concatenate(self.per_level, axis=0)

    @property
    def level_counts(self) -> list[int]:
        return [len(a) for a in self.per_level]


def generate_anchors(grid_sizes: list[tuple[int, int]], strides: list[int],
                     cfg: DetectionConfig) -> AnchorSet:
    """One scale per level (cfg.anchor_scale_factor x stride), all ratios per cell.

    Cell-major order (rows, then columns, then ratio) to match the RPN head's
    output reshaping.  Anchors may extend past the image border.
    """
    per_level, scales = [], []
    for (gh, gw), stride in zip(grid_sizes, strides):
        scale = cfg.anchor_scale_factor * stride
        scales.append(scale)
        base = []
        for r in cfg.anchor_ratios:
            w = scale / np.sqrt(r)
            h = scale * np.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
        base = np.asarray(base, dtype=np.float64)
        ys = (np.arange(gh) + 0.5) * stride
        xs = (np.arange(gw) + 0.5) * stride
        cy, cx = np.meshgrid(ys, xs, indexing="ij")
        shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
        per_level.append((shifts + base[None]).reshape(-1, 4))
    return AnchorSet(per_level=per_level, strides=list(strides), scales=scales,
                     ratios=cfg.anchor_ratios)


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def match_boxes(anchors: np.ndarray, gt_boxes: np.ndarray, pos_thr: float, neg_thr: float,
                force_match: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Label each anchor positive/negative/ignore and record its matched gt.

    Max-IoU >= pos_thr -> positive, < neg_thr -> negative, else ignore.  With
    force_match, each gt's highest-IoU anchor (if overlapping at all) is made
    positive so no gt goes unmatched.  Empty gt -> all negative.
    """
    if pos_thr <= neg_thr:
        raise ValueError("pos_thr must exceed neg_thr")
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(gt_boxes) == 0:
        return labels, matched
    ious = B.iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= pos_thr] = POSITIVE
    labels[(best_iou < pos_thr) & (best_iou >= neg_thr)] = IGNORE
    matched[labels == POSITIVE] = best_gt[labels == POSITIVE]
    if force_match:
        for g in range(len(gt_boxes)):
            a = int(ious[:, g].argmax())
            if ious[a, g] > 0:
                labels[a] = POSITIVE
                matched[a] = g
    return labels, matched


def sample_balanced(labels: np.ndarray, size: int, pos_fraction: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample up to size*pos_fraction positives, pad with negatives to size."""
    pos_pool = np.flatnonzero(labels == POSITIVE)
    neg_pool = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos_pool), int(round(size * pos_fraction)))
    if len(pos_pool) > n_pos:
        pos_pool = np.sort(rng.choice(pos_pool, size=n_pos, replace=False))
    n_neg = min(len(neg_pool), size - n_pos)
    if len(neg_pool) > n_neg:
        neg_pool = np.sort(rng.choice(neg_pool, size=n_neg, replace=False))
    return pos_pool, neg_pool


class RPN(nn.Module):
    """Shared 3x3 conv tower + per-level objectness and box-delta heads."""

    def __init__(self, fpn_dim: int, num_ratios: int):
        super().__init__()
        self.num_ratios = num_ratios
        self.conv = nn.Conv2d(fpn_dim, fpn_dim, 3, padding=1)
        self.obj = nn.Conv2d(fpn_dim, num_ratios, 1)
        self.reg = nn.Conv2d(fpn_dim, num_ratios * 4, 1)
        self.forward_calls = 0

    def forward(self, pyramid: FeaturePyramid) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns objectness (B, N) and deltas (B, N, 4) over all levels,
        flattened in the anchor tiling order."""
        self.forward_calls += 1
        obj_flat, reg_flat = [], []
        for m in pyramid.maps:
            h = F.relu(self.conv(m))
            b, _, gh, gw = h.shape
            obj = self.obj(h).permute(0, 2, 3, 1).reshape(b, gh * gw * self.num_ratios)
            reg = self.reg(h).permute(0, 2, 3, 1).reshape(b, gh * gw * self.num_ratios, 4)
            obj_flat.append(obj)
            reg_flat.append(reg)
        return torch.cat(obj_flat, dim=1), torch.cat(reg_flat, dim=1)


def rpn_loss(obj_logits: torch.Tensor, deltas: torch.Tensor, anchors: np.ndarray,
             gt_boxes: np.ndarray, cfg: DetectionConfig,
             rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """(rpn_cls, rpn_reg) for one image: sampled BCE + positives-only smooth-L1."""
    labels, matched = match_boxes(anchors, gt_boxes, cfg.rpn_pos_thr, cfg.rpn_neg_thr)
    pos_idx, neg_idx = sample_balanced(labels, cfg.rpn_sample_size, cfg.rpn_pos_fraction, rng)
    sample = np.concatenate([pos_idx, neg_idx])
    if len(sample) == 0:
        raise ValueError("RPN sampler produced an empty sample")
    sample_t = torch.from_numpy(sample)
    cls_targets = torch.zeros(len(sample), dtype=obj_logits.dtype, device=obj_logits.device)
    cls_targets[:len(pos_idx)] = 1.0
    rpn_cls = F.binary_cross_entropy_with_logits(obj_logits[sample_t], cls_targets)
    if len(pos_idx) == 0:
        rpn_reg = torch.zeros((), dtype=obj_logits.dtype, device=obj_logits.device)
    else:
        target = B.encode_deltas(anchors[pos_idx], gt_boxes[matched[pos_idx]])
        target_t = torch.from_numpy(target).to(deltas.dtype).to(deltas.device)
        per = smooth_l1(deltas[torch.from_numpy(pos_idx)], target_t, cfg.smooth_l1_beta)
        rpn_reg = per.sum(dim=1).mean()
    return rpn_cls, rpn_reg


def rpn_proposals(obj_logits: torch.Tensor, deltas: torch.Tensor, anchors: np.ndarray,
                  image_size: tuple[int, int], cfg: DetectionConfig) -> np.ndarray:
    """Decode, clip, and NMS-filter RPN outputs into (M, 4) proposal boxes.

    Top pre_nms_top anchors by objectness across all levels, class-agnostic
    NMS at proposal_nms_thr, keep post_nms_top.  Runs outside autograd: the
    RoI stage treats proposal coordinates as constants.
    """
    with torch.no_grad():
        scores = torch.sigmoid(obj_logits).double().cpu().numpy()
        d = deltas.double().cpu().numpy()
    decoded = B.decode_deltas(anchors, d)
    decoded = B.clip_boxes(decoded, image_size)
    w = decoded[:, 2] - decoded[:, 0]
    h = decoded[:, 3] - decoded[:, 1]
    keep = (w > 1e-3) & (h > 1e-3)
    decoded, scores = decoded[keep], scores[keep]
    if len(decoded) > cfg.pre_nms_top:
        order = B.score_order(scores, decoded)[:cfg.pre_nms_top]
        decoded, scores = decoded[order], scores[order]
    kept = B.nms(decoded, scores, np.zeros(len(decoded), dtype=np.int64), cfg.proposal_nms_thr)
    return decoded[kept[:cfg.post_nms_top]]


def assign_levels(proposals: np.ndarray, num_levels: int, base_scale: float) -> np.ndarray:
    """Map each proposal to the FPN level whose anchor scale is nearest its size."""
    size = np.sqrt(np.maximum((proposals[:, 2] - proposals[:, 0]) *
                              (proposals[:, 3] - proposals[:, 1]), 1e-12))
    lvl = np.round(np.log2(size / base_scale)).astype(np.int64)
    return np.clip(lvl, 0, num_levels - 1)


def roi_align(maps: list[torch.Tensor], strides: list[int], proposals: np.ndarray,
              levels: np.ndarray, bins: int) -> torch.Tensor:
    """Pool each proposal into a (C, bins, bins) grid by bilinear sampling.

    One sample per bin, at the bin center; neighbor indices clamp to the map
    border.  maps are single-image (C, H, W) tensors.
    """
    if len(proposals) == 0:
        c = maps[0].shape[0]
        return maps[0].new_zeros((0, c, bins, bins))
    c = maps[0].shape[0]
    out = maps[0].new_zeros((len(proposals), c, bins, bins))
    offsets = (np.arange(bins) + 0.5) / bins
    for lvl in np.unique(levels):
        idx = np.flatnonzero(levels == lvl)
        fmap = maps[lvl]
        _, mh, mw = fmap.shape
        boxes = proposals[idx]
        px = boxes[:, 0:1] + offsets[None] * (boxes[:, 2:3] - boxes[:, 0:1])  # (M, bins)
        py = boxes[:, 1:2] + offsets[None] * (boxes[:, 3:4] - boxes[:, 1:2])
        u = torch.from_numpy(px / strides[lvl] - 0.5)
        v = torch.from_numpy(py / strides[lvl] - 0.5)
        u0 = torch.clamp(u.floor(), 0, mw - 1)
        v0 = torch.clamp(v.floor(), 0, mh - 1)
        u1 = torch.clamp(u0 + 1, 0, mw - 1)
        v1 = torch.clamp(v0 + 1, 0, mh - 1)
        fu = torch.clamp(u - u0, 0.0, 1.0).to(fmap.dtype)
        fv = torch.clamp(v - v0, 0.0, 1.0).to(fmap.dtype)
        u0, u1, v0, v1 = (t.long() for t in (u0, u1, v0, v1))
        flat = fmap.reshape(c, -1)

        def grab(vi, ui):
            # vi (M, bins) rows, ui (M, bins) cols -> (M, C, bins, bins)
            lin = (vi[:, :, None] * mw + ui[:, None, :]).reshape(len(idx), -1)
            return flat[:, lin].permute(1, 0, 2).reshape(len(idx), c, bins, bins)

        top = grab(v0, u0) * (1 - fu)[:, None, None, :] + grab(v0, u1) * fu[:, None, None, :]
        bot = grab(v1, u0) * (1 - fu)[:, None, None, :] + grab(v1, u1) * fu[:, None, None, :]
        pooled = top * (1 - fv)[:, None, :, None] + bot * fv[:, None, :, None]
        out[torch.from_numpy(idx)] = pooled
    return out


class RoIHead(nn.Module):
    """Two-FC head over pooled features: (C+1)-way class logits + per-class deltas."""

    def __init__(self, cfg: DetectionConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = cfg.fpn_dim * cfg.roi_bins * cfg.roi_bins
        self.fc1 = nn.Linear(in_dim, cfg.roi_hidden)
        self.fc2 = nn.Linear(cfg.roi_hidden, cfg.roi_hidden)
        self.cls = nn.Linear(cfg.roi_hidden, cfg.num_classes + 1)
        self.reg = nn.Linear(cfg.roi_hidden, cfg.num_classes * 4)
        self.forward_calls = 0

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.forward_calls += 1
        x = pooled.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.reg(x).reshape(-1, self.cfg.num_classes, 4)


def match_rois(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
               cfg: DetectionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-proposal class target (background = num_classes) and matched gt index."""
    n = len(proposals)
    classes = np.full(n, cfg.background_class, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) and n:
        ious = B.iou_matrix(proposals, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best_gt]
        fg = best_iou >= cfg.roi_fg_thr
        classes[fg] = gt_labels[best_gt[fg]]
        matched[fg] = best_gt[fg]
    return classes, matched


def roi_loss(cls_logits: torch.Tensor, reg: torch.Tensor, classes: np.ndarray,
             reg_targets: np.ndarray, cfg: DetectionConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """(roi_cls, roi_reg): CE over C+1 classes; smooth-L1 on foreground rows only,
    taken at each row's matched class."""
    classes_t = torch.from_numpy(classes).to(cls_logits.device)
    roi_cls = F.cross_entropy(cls_logits, classes_t)
    fg = np.flatnonzero(classes != cfg.background_class)
    if len(fg) == 0:
        roi_reg = torch.zeros((), dtype=cls_logits.dtype, device=cls_logits.device)
    else:
        fg_t = torch.from_numpy(fg)
        pred = reg[fg_t, classes_t[fg_t]]
        target = torch.from_numpy(reg_targets[fg]).to(pred.dtype).to(pred.device)
        roi_reg = smooth_l1(pred, target, cfg.smooth_l1_beta).sum(dim=1).mean()
    return roi_cls, roi_reg


@dataclass
class DetectionLoss:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg

    def detach_floats(self) -> dict[str, float]:
        return {
            "rpn_cls": float(self.rpn_cls), "rpn_reg": float(self.rpn_reg),
            "roi_cls": float(self.roi_cls), "roi_reg": float(self.roi_reg),
            "total": float(self.total),
        }


def detection_loss(fpn_pyramid: FeaturePyramid, gt_boxes: list[np.ndarray],
                   gt_labels: list[np.ndarray], image_size: tuple[int, int],
                   rpn: RPN, roi_head: RoIHead, cfg: DetectionConfig,
                   rng: np.random.Generator, *, add_gt_proposals: bool = True,
                   override_proposals: list[np.ndarray] | None = None) -> DetectionLoss:
    """Four-term detection loss averaged over the batch.

    Proposal boxes are held constant (no gradient through their coordinates);
    sampling draws from rng so a caller with a fixed seed gets a fixed sample.
    override_proposals bypasses the RPN proposal path entirely, which keeps
    the RoI terms a deterministic function of parameters for gradient checks.
    """
    obj_logits, deltas = rpn(fpn_pyramid)
    batch = obj_logits.shape[0]
    grid_sizes = [(m.shape[2], m.shape[3]) for m in fpn_pyramid.maps]
    anchors = generate_anchors(grid_sizes, fpn_pyramid.strides, cfg).all_boxes
    terms = {"rpn_cls": [], "rpn_reg": [], "roi_cls": [], "roi_reg": []}
    for i in range(batch):
        r_cls, r_reg = rpn_loss(obj_logits[i], deltas[i], anchors, gt_boxes[i], cfg, rng)
        terms["rpn_cls"].append(r_cls)
        terms["rpn_reg"].append(r_reg)

        if override_proposals is not None:
            proposals = np.asarray(override_proposals[i], dtype=np.float64)
        else:
            proposals = rpn_proposals(obj_logits[i], deltas[i], anchors, image_size, cfg)
            if add_gt_proposals and len(gt_boxes[i]):
                proposals = np.concatenate([proposals, gt_boxes[i]], axis=0)
        classes, matched = match_rois(proposals, gt_boxes[i], gt_labels[i], cfg)
        roi_labels = np.where(classes != cfg.background_class, POSITIVE, NEGATIVE).astype(np.int8)
        fg_idx, bg_idx = sample_balanced(roi_labels, cfg.roi_sample_size, cfg.roi_fg_fraction, rng)
        sample = np.concatenate([fg_idx, bg_idx])
        if len(sample) == 0:
            raise ValueError("RoI sampler produced an empty sample")
        sampled_props = proposals[sample]
        sampled_classes = classes[sample]
        reg_targets = np.zeros((len(sample), 4), dtype=np.float64)
        fg_mask = sampled_classes != cfg.background_class
        if fg_mask.any():
            m = matched[sample][fg_mask]
            reg_targets[fg_mask] = B.encode_deltas(sampled_props[fg_mask], gt_boxes[i][m])

        levels = assign_levels(sampled_props, len(fpn_pyramid), cfg.anchor_scale_factor * fpn_pyramid.strides[0])
        maps_i = [m[i] for m in fpn_pyramid.maps]
        pooled = roi_align(maps_i, fpn_pyramid.strides, sampled_props, levels, cfg.roi_bins)
        cls_logits, reg = roi_head(pooled)
        c_loss, r_loss = roi_loss(cls_logits, reg, sampled_classes, reg_targets, cfg)
        terms["roi_cls"].append(c_loss)
        terms["roi_reg"].append(r_loss)
    mean = {k: torch.stack(v).mean() for k, v in terms.items()}
    return DetectionLoss(**mean)


@dataclass(frozen=True)
class Detection:
    box: B.Box
    class_id: int
    score: float

    def to_json(self) -> dict:
        return {"box": [self.box.x_min, self.box.y_min, self.box.x_max, self.box.y_max],
                "class": self.class_id, "score": self.score}


def detect(image: torch.Tensor, model, score_thr: float | None = None,
           iou_thr: float | None = None, max_dets: int | None = None) -> list[Detection]:
    """Full detection inference for one image tensor (3, H, W) in [0, 1]."""
    cfg: DetectionConfig = model.det_cfg
    score_thr = cfg.score_thr if score_thr is None else score_thr
    iou_thr = cfg.nms_thr if iou_thr is None else iou_thr
    max_dets = cfg.max_dets if max_dets is None else max_dets
    image_size = (int(image.shape[-2]), int(image.shape[-1]))
    with torch.no_grad():
        pyramid = model.fpn(model.backbone(image[None]))
        obj_logits, deltas = model.rpn(pyramid)
        grid_sizes = [(m.shape[2], m.shape[3]) for m in pyramid.maps]
        anchors = generate_anchors(grid_sizes, pyramid.strides, cfg).all_boxes
        proposals = rpn_proposals(obj_logits[0], deltas[0], anchors, image_size, cfg)
        if len(proposals) == 0:
            return []
        levels = assign_levels(proposals, len(pyramid), cfg.anchor_scale_factor * pyramid.strides[0])
        maps0 = [m[0] for m in pyramid.maps]
        pooled = roi_align(maps0, pyramid.strides, proposals, levels, cfg.roi_bins)
        cls_logits, reg = model.roi(pooled)
        probs = cls_logits.softmax(dim=-1).double().cpu().numpy()
        reg_np = reg.double().cpu().numpy()

    cand_boxes, cand_scores, cand_classes = [], [], []
    for c in range(cfg.num_classes):
        decoded = B.decode_deltas(proposals, reg_np[:, c])
        decoded = B.clip_boxes(decoded, image_size)
        ok = ((decoded[:, 2] - decoded[:, 0]) > 1e-3) & ((decoded[:, 3] - decoded[:, 1]) > 1e-3)
        ok &= probs[:, c] >= score_thr
        cand_boxes.append(decoded[ok])
        cand_scores.append(probs[ok, c])
        cand_classes.append(np.full(int(ok.sum()), c, dtype=np.int64))
    boxes_all = np.concatenate(cand_boxes, axis=0)
    if len(boxes_all) == 0:
        return []
    scores_all = np.concatenate(cand_scores)
    classes_all = np.concatenate(cand_classes)
    kept = B.nms(boxes_all, scores_all, classes_all, iou_thr)[:max_dets]
    return [
        Detection(box=B.Box(*boxes_all[k]), class_id=int(classes_all[k]), score=float(scores_all[k]))
        for k in kept
    ]
