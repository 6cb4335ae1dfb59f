"""Visual encoder (trainable), text encoder (frozen) and the text projection."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from . import autodiff as ad
from .config import EncoderConfig
from .layers import INIT_STD, Block, LayerNorm, Linear


def num_patches(height: int, width: int, patch: int, stride: int) -> int:
    if height < patch or width < patch:
        raise ValueError(f"image {height}x{width} is smaller than patch {patch}")
    return ((height - patch) // stride + 1) * ((width - patch) // stride + 1)


def patchify(image: Tensor, patch: int, stride: int) -> Tensor:
    """Cut an (H, W, 3) image, or a (B, H, W, 3) batch, into flattened patches.

    Patches are taken with a sliding window and ordered row-major; each patch
    is flattened channel-first to ``3 * patch * patch`` values.
    """
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.dim() != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got {tuple(image.shape)}")
    num_patches(x.shape[1], x.shape[2], patch, stride)
    # (B, rows, W, C, p) -> (B, rows, cols, C, p, p)
    x = x.unfold(1, patch, stride).unfold(2, patch, stride)
    x = x.reshape(x.shape[0], x.shape[1] * x.shape[2], -1)
    return x[0] if squeeze else x


class VisualEncoder(nn.Module):
    """Patch projection, learned [CLS] and positions, then a transformer stack."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_patches
        self.patch_proj = Linear(3 * cfg.patch * cfg.patch, cfg.d_v)
        self.cls = nn.Parameter(torch.randn(cfg.d_v) * INIT_STD)
        self.pos = nn.Parameter(torch.randn(n + 1, cfg.d_v) * INIT_STD)
        self.blocks = nn.ModuleList(
            Block(cfg.d_v, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.visual_layers)
        )
        self.norm = LayerNorm(cfg.d_v)

    def embed(self, patches: Tensor) -> Tensor:
        x = self.patch_proj(patches)
        cls = self.cls.expand(*x.shape[:-2], 1, x.shape[-1])
        return ad.add(ad.concat([cls, x], dim=-2), self.pos)

    def forward(self, images: Tensor) -> Tensor:
        """(B, H, W, 3) -> (B, N+1, d_v), [CLS] at index 0."""
        x = self.embed(patchify(images, self.cfg.patch, self.cfg.stride))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    """Randomly initialised, then frozen; stands in for pretrained language priors."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_t))
        self.sos = nn.Parameter(torch.randn(cfg.d_t))
        self.eos = nn.Parameter(torch.randn(cfg.d_t))
        self.pos = nn.Parameter(torch.randn(cfg.max_text_len + 2, cfg.d_t) * 0.1)
        self.blocks = nn.ModuleList(
            Block(cfg.d_t, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_layers)
        )
        self.norm = LayerNorm(cfg.d_t)
        self.requires_grad_(False)

    def slot_mask(self, ids: Tensor) -> Tensor:
        """(..., M) ids -> (..., M+2) bool, False on padding; [SOS] and [EOS] are always live."""
        live = ids != self.cfg.pad_id
        edge = torch.ones(*ids.shape[:-1], 1, dtype=torch.bool, device=ids.device)
        return torch.cat([edge, live, edge], dim=-1)

    def forward(self, ids: Tensor) -> Tensor:
        """(..., M) token ids -> (..., M+2, d_t) as [SOS, t1..tM, EOS].

        Padding slots are never attended to; their own outputs are computed
        but carry no information into the other slots.
        """
        if ids.shape[-1] > self.cfg.max_text_len:
            raise ValueError(f"caption length {ids.shape[-1]} exceeds {self.cfg.max_text_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise IndexError(f"token id out of vocabulary range [0, {self.cfg.vocab_size})")
        with torch.no_grad():
            tok = ad.embedding(ids.long(), self.token)
            lead = tok.shape[:-2]
            sos = self.sos.expand(*lead, 1, self.cfg.d_t)
            eos = self.eos.expand(*lead, 1, self.cfg.d_t)
            x = ad.concat([sos, tok, eos], dim=-2)
            x = ad.add(x, self.pos[: x.shape[-2]])
            mask = self.slot_mask(ids)
            for block in self.blocks:
                x = block(x, mask)
            return self.norm(x)


class TextProjection(nn.Module):
    """Shared per-token linear map from d_t to d_v."""

    def __init__(self, d_t: int, d_v: int):
        super().__init__()
        self.d_t = d_t
        self.proj = Linear(d_t, d_v)

    def forward(self, seq: Tensor) -> Tensor:
        if seq.shape[-1] != self.d_t:
            raise ValueError(f"expected text dim {self.d_t}, got {seq.shape[-1]}")
        return self.proj(seq)

    def reset_identity(self) -> None:
        with torch.no_grad():
            if self.proj.weight.shape[0] != self.proj.weight.shape[1]:
                raise ValueError("identity init needs d_t == d_v")
            self.proj.weight.copy_(torch.eye(self.d_t))
            self.proj.bias.zero_()
