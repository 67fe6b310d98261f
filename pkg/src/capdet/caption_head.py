"""Autoregressive caption decoder over the backbone's last feature map.

A small pre-norm transformer decoder: causal self-attention over the token
prefix, cross-attention to the flattened stride-32 feature map (with learned
2-D positional embeddings on the memory tokens), and a weight-tied LM head.
Decoding is greedy or beam search by cumulative log-probability with no
length normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .scenegen import PAD_ID, START_ID, END_ID


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    width: int = 256
    layers: int = 2
    heads: int = 4
    max_len: int = 20
    mlp_ratio: float = 4.0
    max_grid: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.vocab_size < 4:
            raise ValueError("vocabulary must include the four reserved tokens")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _attend(q, k, v, num_heads, mask=None):
    """Batched multi-head attention; q (B,Tq,C), k/v (B,Tk,C), mask (Tq,Tk) bool."""
    b, tq, c = q.shape
    tk = k.shape[1]
    hd = c // num_heads
    q = q.view(b, tq, num_heads, hd).transpose(1, 2)
    k = k.view(b, tk, num_heads, hd).transpose(1, 2)
    v = v.view(b, tk, num_heads, hd).transpose(1, 2)
    attn = (q @ k.transpose(-2, -1)) * hd ** -0.5
    if mask is not None:
        attn = attn.masked_fill(mask, float("-inf"))
    attn = attn.softmax(dim=-1)
    return (attn @ v).transpose(1, 2).reshape(b, tq, c)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        t = x.shape[1]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        return self.proj(_attend(q, k, v, self.num_heads, mask))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, memory):
        k, v = self.kv(memory).chunk(2, dim=-1)
        return self.proj(_attend(self.q(x), k, v, self.num_heads))


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.self_attn = CausalSelfAttention(dim, num_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, num_heads)
        self.ln3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, int(dim * mlp_ratio)),
            nn.GELU(),
            nn.Linear(int(dim * mlp_ratio), dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory):
        x = x + self.drop(self.self_attn(self.ln1(x)))
        x = x + self.drop(self.cross_attn(self.ln2(x), memory))
        x = x + self.drop(self.mlp(self.ln3(x)))
        return x


class CaptionDecoder(nn.Module):
    """Teacher-forced forward gives next-token logits for each prefix position."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.width))
        # Learned 2-D position embeddings for the flattened feature grid.
        self.mem_row = nn.Parameter(torch.zeros(cfg.max_grid, cfg.width))
        self.mem_col = nn.Parameter(torch.zeros(cfg.max_grid, cfg.width))
        self.mem_norm = nn.LayerNorm(cfg.width)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.width, cfg.heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.layers)
        )
        self.ln_f = nn.LayerNorm(cfg.width)
        for p in (self.pos_emb, self.mem_row, self.mem_col):
            nn.init.trunc_normal_(p, std=0.02)
        nn.init.trunc_normal_(self.tok_emb.weight, std=0.02)

    def build_memory(self, feature_map: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w) last backbone map -> (B, h*w, C) memory tokens."""
        b, c, h, w = feature_map.shape
        if c != self.cfg.width:
            raise ValueError(f"feature channels {c} != decoder width {self.cfg.width}")
        if h > self.cfg.max_grid or w > self.cfg.max_grid:
            raise ValueError(f"feature grid {h}x{w} exceeds max_grid {self.cfg.max_grid}")
        mem = feature_map.flatten(2).transpose(1, 2)
        pos = (self.mem_row[:h, None, :] + self.mem_col[None, :w, :]).reshape(h * w, -1)
        return self.mem_norm(mem + pos[None].to(mem.dtype))

    def forward(self, feature_map: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, vocab) for prefix tokens (B, T); tokens[:, 0] is <start>."""
        if tokens.dim() != 2:
            raise ValueError("tokens must be (batch, length)")
        t = tokens.shape[1]
        if t < 1 or t > self.cfg.max_len:
            raise ValueError(f"prefix length {t} outside [1, {self.cfg.max_len}]")
        memory = self.build_memory(feature_map)
        x = self.tok_emb(tokens) + self.pos_emb[:t].to(self.tok_emb.weight.dtype)[None]
        for block in self.blocks:
            x = block(x, memory)
        x = self.ln_f(x)
        return F.linear(x, self.tok_emb.weight)


def caption_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID) -> torch.Tensor:
    """Cross-entropy of targets under logits, averaged over non-pad positions.

    Teacher forcing: logits row t is the model's distribution for targets[t]
    (inputs were the targets shifted right with <start> prepended).
    """
    if logits.dim() == 2:
        logits, targets = logits[None], targets[None]
    mask = targets != pad_id
    if not bool(mask.any()):
        raise ValueError("caption target is all padding")
    logp = logits.log_softmax(dim=-1)
    tok_lp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(tok_lp * mask).sum() / mask.sum()


def _model_step_fn(decoder: CaptionDecoder, feature_map: torch.Tensor):
    """Log-prob callable over equal-length prefixes for one image's memory."""
    if feature_map.dim() == 3:
        feature_map = feature_map[None]

    cache: dict[tuple[int, ...], torch.Tensor] = {}

    @torch.no_grad()
    def step(prefixes: list[tuple[int, ...]]) -> torch.Tensor:
        # One forward per distinct prefix so a hypothesis scores identically
        # no matter how many others are in flight (beam=k reproduces beam=1
        # scores bitwise); the cache keeps shared prefixes from re-running.
        rows = []
        for prefix in prefixes:
            if prefix not in cache:
                tokens = torch.tensor([prefix], dtype=torch.long,
                                      device=feature_map.device)
                logits = decoder(feature_map, tokens)
                cache[prefix] = logits[0, -1].log_softmax(dim=-1)
            rows.append(cache[prefix])
        return torch.stack(rows)

    return step


def beam_search_tokens(step_fn, beam: int, max_len: int,
                       start_id: int = START_ID, end_id: int = END_ID) -> tuple[list[int], float]:
    """Beam search over a step callable; returns (token ids, total log-prob).

    ``step_fn(prefixes)`` maps a list of equal-length id tuples to a
    (len(prefixes), vocab) array of next-token log-probs.  Hypotheses are
    scored by the plain sum of log-probs; one finishes when it emits
    ``end_id`` or reaches ``max_len`` tokens.  The running greedy rollout is
    kept as a protected hypothesis so the returned score is never below the
    greedy score.  Ties break toward lexicographically smaller token ids.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [((start_id,), 0.0)]
    greedy: tuple[tuple[int, ...], float] | None = ((start_id,), 0.0)
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        prefixes = [ids for ids, _ in live]
        if greedy is not None and greedy[0] not in prefixes:
            prefixes.append(greedy[0])
        logps = step_fn(prefixes)
        logps = torch.as_tensor(logps, dtype=torch.float64)
        by_prefix = {p: logps[i] for i, p in enumerate(prefixes)}

        if greedy is not None:
            row = by_prefix[greedy[0]]
            tok = int(torch.argmax(row))
            g_ids, g_lp = greedy[0] + (tok,), greedy[1] + float(row[tok])
            if tok == end_id:
                finished.append((g_ids, g_lp))
                greedy = None
            else:
                greedy = (g_ids, g_lp)

        candidates = []
        for ids, lp in live:
            row = by_prefix[ids]
            for tok in range(row.shape[0]):
                candidates.append((ids + (tok,), lp + float(row[tok])))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for ids, lp in candidates[:beam]:
            if ids[-1] == end_id:
                finished.append((ids, lp))
            else:
                live.append((ids, lp))
        if not live and greedy is None:
            break
    # Anything still alive at the length cap competes with its raw score.
    finished.extend(live)
    if greedy is not None:
        finished.append(greedy)
    finished.sort(key=lambda c: (-c[1], c[0]))
    ids, lp = finished[0]
    return list(ids[1:]), lp


def greedy_decode(decoder: CaptionDecoder, feature_map: torch.Tensor,
                  max_len: int | None = None) -> tuple[list[int], float]:
    """Argmax decoding from <start>; stops at <end> or the length cap."""
    max_len = decoder.cfg.max_len if max_len is None else max_len
    return beam_search_tokens(_model_step_fn(decoder, feature_map), 1, max_len)


def beam_search(decoder: CaptionDecoder, feature_map: torch.Tensor, beam: int = 5,
                max_len: int | None = None) -> tuple[list[int], float]:
    """Beam decoding for a single image; see :func:`beam_search_tokens`."""
    max_len = decoder.cfg.max_len if max_len is None else max_len
    return beam_search_tokens(_model_step_fn(decoder, feature_map), beam, max_len)
