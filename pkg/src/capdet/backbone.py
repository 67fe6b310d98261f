"""Shared image encoder: windowed self-attention over patch tokens.

An image is split into patch tokens, processed by four stages of windowed /
shifted-window attention blocks with patch merging in between, and emitted
as a four-level feature pyramid: map i has ``C * 2**i`` channels at stride
``4 * 2**i``.  Both task heads consume this pyramid; the caption decoder
reads the last (stride-32) map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    base_channels: int = 32
    depths: tuple[int, ...] = (1, 1, 2, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    window_size: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have equal length")
        for i, h in enumerate(self.heads):
            if (self.base_channels * 2 ** i) % h != 0:
                raise ValueError(f"stage {i}: channels {self.base_channels * 2 ** i} not divisible by {h} heads")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(self.num_stages))

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.patch_size * 2 ** i for i in range(self.num_stages))

    @property
    def last_channels(self) -> int:
        """Channel width of the final map; this is the caption decoder width."""
        return self.base_channels * 2 ** (self.num_stages - 1)


@dataclass
class FeaturePyramid:
    """Ordered multi-scale feature maps, each (B, C, H, W), with strides."""

    maps: list[torch.Tensor]
    strides: list[int]

    def __post_init__(self):
        if len(self.maps) != len(self.strides):
            raise ValueError("one stride per map required")

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def channels(self) -> list[int]:
        return [m.shape[1] for m in self.maps]


def _effective_window(window: int, h: int, w: int) -> int:
    ws = min(window, h, w)
    if h % ws or w % ws:
        raise ValueError(f"grid {h}x{w} not divisible by window size {ws}")
    return ws


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, ws*ws, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_merge(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def shift_region_ids(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    """Region labels (in rolled coordinates) for the shifted-window mask.

    After cyclically rolling the grid by ``-shift``, tokens originating from
    different sides of the wrap-around must not attend to each other.  Tokens
    share a region id exactly when they may interact.
    """
    def bands(n: int) -> torch.Tensor:
        ids = torch.zeros(n, dtype=torch.long)
        ids[n - ws:n - shift] = 1
        ids[n - shift:] = 2
        return ids

    return bands(h)[:, None] * 3 + bands(w)[None, :]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside square windows of a token grid.

    Supports the plain and shifted layouts; the shifted variant rolls the
    grid by half a window, attends inside windows with a cross-region mask,
    and rolls back.  A learned relative position bias (one table shared by
    all effective window sizes up to the configured one) is added to the
    attention logits.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        self._bias_index: dict[int, torch.Tensor] = {}

    def _bias(self, ws: int) -> torch.Tensor:
        """Relative position bias for an effective window of side ws: (heads, N, N)."""
        if ws not in self._bias_index:
            coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij"))
            flat = coords.reshape(2, -1)
            rel = flat[:, :, None] - flat[:, None, :]  # (2, N, N) in [-(ws-1), ws-1]
            span = 2 * self.window_size - 1
            idx = (rel[0] + self.window_size - 1) * span + (rel[1] + self.window_size - 1)
            self._bias_index[ws] = idx
        idx = self._bias_index[ws]
        return self.rel_bias[idx].permute(2, 0, 1)

    def _attend(self, windows: torch.Tensor, ws: int, mask: torch.Tensor | None) -> torch.Tensor:
        bw, n, c = windows.shape
        qkv = self.qkv(windows).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self._bias(ws).to(attn.dtype)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n)
            attn = attn.masked_fill(mask[None, :, None], float("-inf"))
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)

    def forward(self, x: torch.Tensor, shifted: bool = False) -> torch.Tensor:
        """(B, H, W, C) token grid -> same shape; shifted selects SW-MSA."""
        b, h, w, c = x.shape
        ws = _effective_window(self.window_size, h, w)
        shift = ws // 2 if (shifted and min(h, w) > ws) else 0
        if shift:
            x = torch.roll(x, (-shift, -shift), dims=(1, 2))
            ids = shift_region_ids(h, w, ws, shift).to(x.device)
            id_windows = window_partition(ids[None, :, :, None].float(), ws).squeeze(-1)
            mask = id_windows[:, :, None] != id_windows[:, None, :]
        else:
            mask = None
        out = self._attend(window_partition(x, ws), ws, mask)
        out = window_merge(out, ws, h, w)
        if shift:
            out = torch.roll(out, (shift, shift), dims=(1, 2))
        return out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(torch.nn.functional.gelu(self.fc1(x))))


class WindowBlock(nn.Module):
    """Pre-norm transformer block with (shifted-)window attention."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shifted: bool,
                 mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x), shifted=self.shifted))
        x = x + self.drop(self.mlp(self.norm2(x)))
        return x


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection: (B, 3, H, W) -> (B, H/p, W/p, C)."""

    def __init__(self, patch_size: int, channels: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, channels, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(channels)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, _, h, w = images.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch size {self.patch_size}")
        x = self.proj(images).permute(0, 2, 3, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear reduction: halves H, W, doubles C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"grid {h}x{w} has odd dims, cannot merge")
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )
        return self.reduction(self.norm(x))


class Backbone(nn.Module):
    """Patch embedding + windowed attention stages -> 4-level feature pyramid."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.base_channels)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.out_norms = nn.ModuleList()
        for i, depth in enumerate(cfg.depths):
            dim = cfg.stage_channels[i]
            blocks = nn.ModuleList(
                WindowBlock(dim, cfg.heads[i], cfg.window_size, shifted=(j % 2 == 1),
                            mlp_ratio=cfg.mlp_ratio, dropout=cfg.dropout)
                for j in range(depth)
            )
            self.stages.append(blocks)
            # Every output map is normalized before the heads see it.
            self.out_norms.append(nn.LayerNorm(dim))
            if i + 1 < len(cfg.depths):
                self.merges.append(PatchMerging(dim))

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.shape[-1] % 32 or images.shape[-2] % 32:
            raise ValueError("image dims must be divisible by 32")
        x = self.patch_embed(images)
        maps, strides = [], []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            out = self.out_norms[i](x).permute(0, 3, 1, 2)
            maps.append(out)
            strides.append(self.cfg.strides[i])
            if i < len(self.merges):
                x = self.merges[i](x)
        return FeaturePyramid(maps=maps, strides=strides)
