"""Dual-branch cross-modal attention.

A single cross-attention block and a single self-attention stack are
applied along four paths: foreground and background, each with vision as
query and with text as query.  Sharing is structural (one set of modules),
so swapping the foreground and background inputs swaps the outputs exactly.
Caption padding is masked out wherever text is attended to, so the
attention maps put zero weight on padding columns.
"""

from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor, nn

from . import autodiff as ad
from .config import CrossModalConfig
from .layers import Block, LayerNorm, MultiHeadAttention


@dataclass
class CrossModalOutput:
    f_fg_text: Tensor  # F_f^T, (..., d_v)
    f_fg_vis: Tensor  # F_f^V
    f_bg_text: Tensor  # F_b^T
    f_bg_vis: Tensor  # F_b^V
    attn_fg: Tensor  # W_f, (..., N, M)
    attn_bg: Tensor  # W_b
    fg_text_tokens: Tensor  # (..., M, d_v)
    # (..., M) bool: token columns that are real in both captions, the only ones where W_f and W_b compare
    column_mask: Tensor | None = None


def select_global(seq: Tensor, kind: str) -> Tensor:
    """Pick [CLS] (first slot) or [EOS] (last slot) from a (..., L, d) sequence."""
    if seq.shape[-2] == 0:
        raise ValueError("cannot select a global token from an empty sequence")
    if kind == "CLS":
        return seq[..., 0, :]
    if kind == "EOS":
        return seq[..., -1, :]
    raise ValueError(f"unknown global token kind {kind!r}")


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention with a residual connection on the query stream."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, query: Tensor, kv: Tensor, kv_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        out, probs = self.attn(self.norm_q(query), self.norm_kv(kv), kv_mask)
        return ad.add(query, out), probs


class SelfAttentionStack(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, mlp_ratio: int):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, key_mask)
        return self.norm(x)


class CrossModalModule(nn.Module):
    def __init__(self, dim: int, cfg: CrossModalConfig):
        super().__init__()
        self.cross = CrossAttentionBlock(dim, cfg.heads)
        self.stack = SelfAttentionStack(dim, cfg.heads, cfg.stack_layers, cfg.mlp_ratio)

    def path(self, query: Tensor, kv: Tensor, query_mask: Tensor | None = None,
             kv_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        fused, attn = self.cross(query, kv, kv_mask)
        return self.stack(fused, query_mask), attn

    def forward(self, vis_fg: Tensor, text_fg: Tensor, vis_bg: Tensor, text_bg: Tensor,
                text_mask_fg: Tensor | None = None, text_mask_bg: Tensor | None = None) -> CrossModalOutput:
        """Run all four paths.

        ``vis_*`` are (..., N+1, d) with [CLS] first; ``text_*`` are
        (..., M+2, d) with [SOS] first and [EOS] last.  ``text_mask_*`` are
        the matching (..., M+2) slot masks, False on padding; ``None``
        treats every slot as real.
        """
        for v, t in ((vis_fg, text_fg), (vis_bg, text_bg)):
            if v.shape[-1] != t.shape[-1]:
                raise ValueError(f"visual dim {v.shape[-1]} != text dim {t.shape[-1]}")
        v_fg, w_fg = self.path(vis_fg, text_fg, kv_mask=text_mask_fg)
        t_fg, _ = self.path(text_fg, vis_fg, query_mask=text_mask_fg)
        v_bg, w_bg = self.path(vis_bg, text_bg, kv_mask=text_mask_bg)
        t_bg, _ = self.path(text_bg, vis_bg, query_mask=text_mask_bg)
        return CrossModalOutput(
            f_fg_text=select_global(t_fg, "EOS"),
            f_fg_vis=select_global(v_fg, "CLS"),
            f_bg_text=select_global(t_bg, "EOS"),
            f_bg_vis=select_global(v_bg, "CLS"),
            # patch rows x real-token columns
            attn_fg=w_fg[..., 1:, 1:-1],
            attn_bg=w_bg[..., 1:, 1:-1],
            fg_text_tokens=t_fg[..., 1:-1, :],
            column_mask=_shared_columns(text_mask_fg, text_mask_bg),
        )


def _shared_columns(mask_fg: Tensor | None, mask_bg: Tensor | None) -> Tensor | None:
    if mask_fg is None and mask_bg is None:
        return None
    if mask_fg is None or mask_bg is None:
        return (mask_fg if mask_bg is None else mask_bg)[..., 1:-1]
    return mask_fg[..., 1:-1] & mask_bg[..., 1:-1]
