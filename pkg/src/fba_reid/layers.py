"""Transformer building blocks expressed in the autodiff op set."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from . import autodiff as ad

INIT_STD = 0.02
# added to the scores of masked keys; exp() of it underflows to exactly zero
MASKED_SCORE = -1e9


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        # Xavier-normal; at 0.02 the residual branches are too weak for image content to reach [CLS]
        self.weight = nn.Parameter(torch.randn(d_in, d_out) * math.sqrt(2.0 / (d_in + d_out)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; queries from ``x``, keys/values from ``ctx``.

    Returns the projected output and the head-averaged attention
    probabilities of shape (..., len(x), len(ctx)).  ``key_mask`` (...,
    len(ctx)) marks the context positions that may be attended to; masked
    positions receive probability zero.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-2, -3)

    def forward(self, x: Tensor, ctx: Tensor, key_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != ctx.shape[-1]:
            raise ValueError(f"query dim {x.shape[-1]} != context dim {ctx.shape[-1]}")
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
        if key_mask is not None:
            if key_mask.shape[-1] != ctx.shape[-2]:
                raise ValueError(f"key mask length {key_mask.shape[-1]} != context length {ctx.shape[-2]}")
            # (..., L) -> (..., heads, 1, L)
            scores = scores.masked_fill(~key_mask.unsqueeze(-2).unsqueeze(-2), MASKED_SCORE)
        probs = ad.softmax(scores, dim=-1)
        out = ad.matmul(probs, v).transpose(-2, -3)
        out = out.reshape(*out.shape[:-2], -1)
        return self.o(out), probs.mean(dim=-3)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x: Tensor, key_mask: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        x = ad.add(x, self.attn(h, h, key_mask)[0])
        return ad.add(x, self.ffn(self.norm2(x)))
