"""Full joint model: shared backbone + detection branch + caption decoder.

Attribute names (backbone, fpn, rpn, roi, decoder) double as the checkpoint
parameter prefixes.  The parameter set is partitioned into theta (backbone),
phi (decoder), and psi (fpn + rpn + roi); the partition drives freeze plans
and the structure checks on the joint loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .caption_head import CaptionDecoder, DecoderConfig
from .detect_head import FPN, RPN, DetectionConfig, RoIHead


class MultitaskModel(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, det_cfg: DetectionConfig,
                 dec_cfg: DecoderConfig):
        super().__init__()
        if dec_cfg.width != backbone_cfg.last_channels:
            raise ValueError(
                f"decoder width {dec_cfg.width} must equal last backbone map "
                f"channels {backbone_cfg.last_channels}")
        self.backbone_cfg = backbone_cfg
        self.det_cfg = det_cfg
        self.dec_cfg = dec_cfg
        self.backbone = Backbone(backbone_cfg)
        self.fpn = FPN(backbone_cfg.stage_channels, det_cfg.fpn_dim)
        self.rpn = RPN(det_cfg.fpn_dim, len(det_cfg.anchor_ratios))
        self.roi = RoIHead(det_cfg)
        self.decoder = CaptionDecoder(dec_cfg)

    def pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return self.backbone(images)

    def caption_logits(self, images_or_pyramid, tokens: torch.Tensor) -> torch.Tensor:
        """Teacher-forced decoder logits from images (B,3,H,W) or a pyramid."""
        if isinstance(images_or_pyramid, FeaturePyramid):
            fmap = images_or_pyramid.maps[-1]
        else:
            fmap = self.backbone(images_or_pyramid).maps[-1]
        return self.decoder(fmap, tokens)

    def reset_forward_counters(self):
        for m in (self.fpn, self.rpn, self.roi):
            m.forward_calls = 0

    def detection_forward_counts(self) -> dict[str, int]:
        return {"fpn": self.fpn.forward_calls, "rpn": self.rpn.forward_calls,
                "roi": self.roi.forward_calls}


@dataclass(frozen=True)
class ParameterPartition:
    """Parameter names split by role: theta backbone, phi decoder, psi detection."""

    theta: tuple[str, ...]
    phi: tuple[str, ...]
    psi: tuple[str, ...]

    @classmethod
    def from_model(cls, model: MultitaskModel) -> "ParameterPartition":
        theta, phi, psi = [], [], []
        for name, _ in model.named_parameters():
            if name.startswith("backbone."):
                theta.append(name)
            elif name.startswith("decoder."):
                phi.append(name)
            elif name.startswith(("fpn.", "rpn.", "roi.")):
                psi.append(name)
            else:
                raise ValueError(f"parameter {name} fits no partition")
        part = cls(theta=tuple(theta), phi=tuple(phi), psi=tuple(psi))
        all_names = set(part.theta) | set(part.phi) | set(part.psi)
        if len(all_names) != len(part.theta) + len(part.phi) + len(part.psi):
            raise ValueError("partitions overlap")
        model_names = {n for n, _ in model.named_parameters()}
        if all_names != model_names:
            raise ValueError("partition does not cover the model")
        return part


def toy_configs(vocab_size: int, num_classes: int) -> tuple[BackboneConfig, DetectionConfig, DecoderConfig]:
    backbone = BackboneConfig(base_channels=32, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8),
                              window_size=4, patch_size=4)
    det = DetectionConfig(num_classes=num_classes, fpn_dim=64, roi_hidden=256)
    dec = DecoderConfig(vocab_size=vocab_size, width=backbone.last_channels,
                        layers=2, heads=4, max_len=20)
    return backbone, det, dec


def micro_configs(vocab_size: int, num_classes: int) -> tuple[BackboneConfig, DetectionConfig, DecoderConfig]:
    """Smallest config that exercises every code path; used for gradient checks."""
    backbone = BackboneConfig(base_channels=8, depths=(1, 1, 1, 1), heads=(1, 2, 4, 8),
                              window_size=4, patch_size=4)
    det = DetectionConfig(num_classes=num_classes, fpn_dim=16, roi_hidden=32,
                          pre_nms_top=64, post_nms_top=16)
    dec = DecoderConfig(vocab_size=vocab_size, width=backbone.last_channels,
                        layers=1, heads=2, max_len=8)
    return backbone, det, dec


PRESETS = {"toy": toy_configs, "micro": micro_configs}


def build_model(vocab_size: int, num_classes: int, preset: str = "toy",
                seed: int | None = None) -> MultitaskModel:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if seed is not None:
        torch.manual_seed(seed)
    backbone_cfg, det_cfg, dec_cfg = PRESETS[preset](vocab_size, num_classes)
    return MultitaskModel(backbone_cfg, det_cfg, dec_cfg)
