"""Attention-map differential pooling.

The foreground and background cross-attention maps (patches × tokens) are
compared column by column; the per-token cosine similarities are min-max
normalised into a token mask, and the mask weights a normalised mean of the
foreground text-query token outputs.  Every function takes an optional
``valid`` (..., M) boolean mask; padding columns are left out of the
normalisation and get weight zero.
"""

from __future__ import annotations

import torch
from torch import Tensor

from . import autodiff as ad

DEGENERATE_RANGE = 1e-8
WEIGHT_FLOOR = 1e-8


def _check_valid(valid: Tensor | None, length: int) -> None:
    if valid is None:
        return
    if valid.shape[-1] != length:
        raise ValueError(f"valid mask length {valid.shape[-1]} != {length}")
    if ad.checks_enabled() and not valid.any(dim=-1).all():
        raise ValueError("every caption needs at least one non-padding token")


def attention_similarity(attn_fg: Tensor, attn_bg: Tensor, valid: Tensor | None = None) -> Tensor:
    """Column-wise cosine similarity of two (..., N, M) maps -> (..., M); zero on padding."""
    if attn_fg.shape != attn_bg.shape:
        raise ValueError(f"attention maps differ in shape: {tuple(attn_fg.shape)} vs {tuple(attn_bg.shape)}")
    _check_valid(valid, attn_fg.shape[-1])
    if valid is not None:
        # padding columns are all-zero by construction; swapping in ones keeps sqrt(0) out of the backward pass
        col = valid.unsqueeze(-2)
        attn_fg = torch.where(col, attn_fg, torch.ones_like(attn_fg))
        attn_bg = torch.where(col, attn_bg, torch.ones_like(attn_bg))
    nf = ad.l2_norm(attn_fg, dim=-2)
    nb = ad.l2_norm(attn_bg, dim=-2)
    zero = (nf == 0) | (nb == 0) if ad.checks_enabled() else None
    if zero is not None and zero.any():
        col = int(torch.nonzero(zero)[0, -1])
        raise ZeroDivisionError(f"attention column {col} has zero norm")
    s = (attn_fg * attn_bg).sum(dim=-2) / (nf * nb)
    return s if valid is None else torch.where(valid, s, torch.zeros_like(s))


def minmax_mask(s: Tensor, valid: Tensor | None = None) -> Tensor:
    """Min-max normalise the valid entries along the last axis.

    A flat vector maps to all ones; padding entries map to zero.
    """
    if s.shape[-1] < 1:
        raise ValueError("similarity vector must be non-empty")
    _check_valid(valid, s.shape[-1])
    if valid is None:
        lo = s.amin(dim=-1, keepdim=True)
        hi = s.amax(dim=-1, keepdim=True)
    else:
        lo = torch.where(valid, s, torch.full_like(s, float("inf"))).amin(dim=-1, keepdim=True)
        hi = torch.where(valid, s, torch.full_like(s, -float("inf"))).amax(dim=-1, keepdim=True)
    span = hi - lo
    flat = span < DEGENERATE_RANGE
    m = (s - lo) / torch.where(flat, torch.ones_like(span), span)
    m = torch.where(flat, torch.ones_like(m), m)
    return m if valid is None else torch.where(valid, m, torch.zeros_like(m))


def pooled_feature(mask: Tensor, tokens: Tensor, use_inverted: bool = False, valid: Tensor | None = None) -> Tensor:
    """Weighted mean of (..., M, d) tokens with weights ``mask`` (or ``1 - mask``); padding weighs zero."""
    if mask.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"mask length {mask.shape[-1]} != token count {tokens.shape[-2]}")
    w = 1.0 - mask if use_inverted else mask
    if valid is not None:
        w = w * valid.to(w.dtype)
    total = w.sum(dim=-1, keepdim=True).clamp_min(WEIGHT_FLOOR)
    return ad.matmul(w.unsqueeze(-2), tokens).squeeze(-2) / total


def differential_pool(attn_fg: Tensor, attn_bg: Tensor, tokens: Tensor, use_inverted: bool = False,
                      valid: Tensor | None = None):
    """Returns (s, m, pooled)."""
    s = attention_similarity(attn_fg, attn_bg, valid)
    m = minmax_mask(s, valid)
    return s, m, pooled_feature(m, tokens, use_inverted, valid)
