import math

import numpy as np
import pytest
import torch

from capdet.backbone import (Backbone, BackboneConfig, PatchMerging, WindowAttention,
                             shift_region_ids, window_merge, window_partition)


def brute_force_window_attention(module: WindowAttention, x: torch.Tensor,
                                 shifted: bool) -> torch.Tensor:
    """Per-token loops re-deriving the (shifted-)window attention semantics.

    Tokens attend within ws x ws windows of the (possibly rolled) grid; in the
    shifted layout two tokens interact only when they fall in the same
    wrap-around region along both axes.
    """
    b, h, w, c = x.shape
    heads = module.num_heads
    hd = c // heads
    ws = min(module.window_size, h, w)
    shift = ws // 2 if (shifted and min(h, w) > ws) else 0
    span = 2 * module.window_size - 1

    wq = module.qkv.weight.double()
    bq = module.qkv.bias.double()
    wp = module.proj.weight.double()
    bp = module.proj.bias.double()
    table = module.rel_bias.double()
    xr = torch.roll(x.double(), (-shift, -shift), dims=(1, 2)) if shift else x.double()

    def region(p: int, n: int) -> int:
        if p < n - ws:
            return 0
        return 1 if p < n - shift else 2

    out = torch.zeros_like(xr)
    for bi in range(b):
        qkv = xr[bi].reshape(-1, c) @ wq.T + bq  # (h*w, 3c)
        q_all = qkv[:, :c].reshape(h * w, heads, hd)
        k_all = qkv[:, c:2 * c].reshape(h * w, heads, hd)
        v_all = qkv[:, 2 * c:].reshape(h * w, heads, hd)
        for wy in range(h // ws):
            for wx in range(w // ws):
                coords = [(wy * ws + i, wx * ws + j) for i in range(ws) for j in range(ws)]
                idx = [r * w + col for r, col in coords]
                merged = torch.zeros(len(idx), c, dtype=torch.float64)
                for hd_i in range(heads):
                    q = q_all[idx, hd_i]
                    k = k_all[idx, hd_i]
                    v = v_all[idx, hd_i]
                    logits = (q @ k.T) / math.sqrt(hd)
                    for a, (ra, ca) in enumerate(coords):
                        for bb, (rb, cb) in enumerate(coords):
                            dy = (ra - wy * ws) - (rb - wy * ws)
                            dx = (ca - wx * ws) - (cb - wx * ws)
                            t_idx = (dy + module.window_size - 1) * span \
                                + (dx + module.window_size - 1)
                            logits[a, bb] = logits[a, bb] + table[t_idx, hd_i]
                            if shift and (region(ra, h) != region(rb, h)
                                          or region(ca, w) != region(cb, w)):
                                logits[a, bb] = float("-inf")
                    weights = torch.softmax(logits, dim=-1)
                    merged[:, hd_i * hd:(hd_i + 1) * hd] = weights @ v
                proj = merged @ wp.T + bp
                for a, (r, col) in enumerate(coords):
                    out[bi, r, col] = proj[a]
    if shift:
        out = torch.roll(out, (shift, shift), dims=(1, 2))
    return out


def test_window_partition_merge_round_trip(rng):
    x = torch.from_numpy(rng.standard_normal((2, 8, 12, 5)))
    back = window_merge(window_partition(x, 4), 4, 8, 12)
    assert torch.equal(x, back)


def test_window_attention_matches_brute_force(rng):
    torch.manual_seed(1)
    attn = WindowAttention(dim=8, num_heads=2, window_size=4).double()
    x = torch.from_numpy(rng.standard_normal((2, 8, 8, 8)))
    got = attn(x, shifted=False)
    want = brute_force_window_attention(attn, x, shifted=False)
    assert torch.max(torch.abs(got - want)) < 1e-10


def test_shifted_window_attention_matches_brute_force(rng):
    torch.manual_seed(2)
    attn = WindowAttention(dim=8, num_heads=2, window_size=4).double()
    x = torch.from_numpy(rng.standard_normal((2, 8, 12, 8)))
    got = attn(x, shifted=True)
    want = brute_force_window_attention(attn, x, shifted=True)
    assert torch.max(torch.abs(got - want)) < 1e-10


def test_shifted_equals_plain_when_grid_fits_one_window(rng):
    torch.manual_seed(3)
    attn = WindowAttention(dim=8, num_heads=2, window_size=4).double()
    x = torch.from_numpy(rng.standard_normal((1, 4, 4, 8)))
    assert torch.equal(attn(x, shifted=True), attn(x, shifted=False))


def test_small_grid_uses_effective_window(rng):
    torch.manual_seed(4)
    attn = WindowAttention(dim=8, num_heads=2, window_size=4).double()
    x = torch.from_numpy(rng.standard_normal((1, 2, 2, 8)))
    got = attn(x, shifted=True)
    want = brute_force_window_attention(attn, x, shifted=True)
    assert torch.max(torch.abs(got - want)) < 1e-10


def test_region_ids_band_structure():
    ids = shift_region_ids(8, 8, 4, 2)
    assert ids.shape == (8, 8)
    # rows [0, 4) band 0, rows [4, 6) band 1, rows [6, 8) band 2
    assert ids[0, 0] == 0
    assert ids[4, 0] == 3
    assert ids[6, 0] == 6
    assert ids[0, 4] == 1
    assert ids[0, 6] == 2
    assert ids[5, 7] == 3 + 2


def test_rel_bias_shared_by_equal_displacement():
    attn = WindowAttention(dim=8, num_heads=2, window_size=4)
    bias = attn._bias(4)
    assert bias.shape == (2, 16, 16)
    # tokens (0,0)->(1,1) and (2,2)->(3,3) have the same displacement
    i1, j1 = 0 * 4 + 0, 1 * 4 + 1
    i2, j2 = 2 * 4 + 2, 3 * 4 + 3
    assert torch.equal(bias[:, i1, j1], bias[:, i2, j2])
    assert attn.rel_bias.shape == (49, 2)


def test_patch_merging_concat_order(rng):
    merge = PatchMerging(dim=3)
    merge.norm = torch.nn.Identity()
    with torch.no_grad():
        merge.reduction.weight.zero_()
        # output = first 6 channels of the 12-channel concat
        merge.reduction.weight[:, :6] = torch.eye(6)
    x = torch.from_numpy(rng.standard_normal((1, 4, 4, 3)).astype(np.float32))
    out = merge(x)
    expect = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2]], dim=-1)
    assert torch.allclose(out, expect, atol=1e-6)


def test_patch_merging_rejects_odd_grid(rng):
    merge = PatchMerging(dim=4)
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ValueError):
        merge(x)


def test_backbone_shape_contract():
    cfg = BackboneConfig()
    net = Backbone(cfg)
    out = net(torch.zeros(2, 3, 128, 128))
    shapes = [tuple(m.shape) for m in out.maps]
    assert shapes == [(2, 32, 32, 32), (2, 64, 16, 16), (2, 128, 8, 8), (2, 256, 4, 4)]
    assert out.strides == [4, 8, 16, 32]


def test_backbone_rectangular_input():
    net = Backbone(BackboneConfig(base_channels=8, depths=(1, 1, 1, 1)))
    out = net(torch.zeros(1, 3, 64, 128))
    assert [tuple(m.shape) for m in out.maps] == [
        (1, 8, 16, 32), (1, 16, 8, 16), (1, 32, 4, 8), (1, 64, 2, 4)]


def test_unshifted_window_independence(rng):
    torch.manual_seed(5)
    attn = WindowAttention(dim=8, num_heads=2, window_size=4).double()
    x = torch.from_numpy(rng.standard_normal((1, 8, 8, 8)))
    base = attn(x, shifted=False)
    x2 = x.clone()
    x2[0, 0, 0] += 1.0  # perturb a token of the top-left window
    pert = attn(x2, shifted=False)
    # windows not containing (0, 0) are bit-identical
    assert torch.equal(base[0, 4:], pert[0, 4:])
    assert torch.equal(base[0, :4, 4:], pert[0, :4, 4:])
    assert not torch.equal(base[0, :4, :4], pert[0, :4, :4])


def test_patch_embed_constant_image_uniform_tokens():
    from capdet.backbone import PatchEmbed
    emb = PatchEmbed(patch_size=4, channels=8)
    out = emb(torch.full((1, 3, 16, 16), 0.25))
    flat = out.reshape(-1, 8)
    assert torch.allclose(flat, flat[0].expand_as(flat), atol=1e-6)


def test_patch_merging_locality(rng):
    merge = PatchMerging(dim=4)
    x = torch.from_numpy(rng.standard_normal((1, 8, 8, 4)).astype(np.float32))
    x2 = x.clone()
    x2[0, 7, 7] += 1.0
    a, b = merge(x), merge(x2)
    diff = (a - b).abs().sum(dim=-1)[0]
    changed = torch.nonzero(diff > 0)
    assert changed.tolist() == [[3, 3]]


def test_backbone_rejects_indivisible_dims():
    net = Backbone(BackboneConfig())
    with pytest.raises(ValueError):
        net(torch.zeros(1, 3, 100, 100))


def test_backbone_zero_input_finite():
    net = Backbone(BackboneConfig(base_channels=8, depths=(1, 1, 1, 1)))
    out = net(torch.zeros(1, 3, 64, 64))
    for m in out.maps:
        assert torch.isfinite(m).all()


def test_backbone_deterministic(rng):
    net = Backbone(BackboneConfig(base_channels=8, depths=(1, 1, 1, 1))).eval()
    x = torch.from_numpy(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
    with torch.no_grad():
        a = net(x)
        b = net(x)
    for ma, mb in zip(a.maps, b.maps):
        assert torch.equal(ma, mb)


def test_last_channels_symbolic_width_match():
    # channel doubling means the final map always has 8x the base width
    for base in (8, 32, 96):
        cfg = BackboneConfig(base_channels=base, heads=(1, 2, 4, 8))
        assert cfg.last_channels == 8 * base
        assert cfg.stage_channels == (base, 2 * base, 4 * base, 8 * base)
    assert BackboneConfig(base_channels=96).last_channels == 768


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError):
        BackboneConfig(base_channels=6, heads=(4, 4, 4, 4))
