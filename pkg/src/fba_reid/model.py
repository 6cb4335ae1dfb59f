"""The full network: encoders -> dual-branch cross-modal module -> pooling -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import Config
from .crossmodal import CrossModalModule, CrossModalOutput
from .diffpool import differential_pool
from .encoders import TextEncoder, TextProjection, VisualEncoder
from .layers import Linear
from .losses import FeatureBundle


@dataclass
class ModelOutput:
    backbone: Tensor
    cross: CrossModalOutput | None
    f_fg_text: Tensor | None  # F_f^T as used downstream (mask-averaged when enabled)
    similarity: Tensor | None
    mask: Tensor | None
    logits_backbone: Tensor
    logits_fg_text: Tensor | None
    logits_fg_vis: Tensor | None

    def bundle(self, labels: Tensor) -> FeatureBundle:
        c = self.cross
        return FeatureBundle(
            backbone=self.backbone,
            f_fg_text=self.f_fg_text,
            f_fg_vis=c.f_fg_vis if c is not None else None,
            f_bg_text=c.f_bg_text if c is not None else None,
            f_bg_vis=c.f_bg_vis if c is not None else None,
            labels=labels,
            logits_backbone=self.logits_backbone,
            logits_fg_text=self.logits_fg_text,
            logits_fg_vis=self.logits_fg_vis,
        )


class FBAModel(nn.Module):
    def __init__(self, cfg: Config, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        enc = cfg.encoder
        self.visual = VisualEncoder(enc)
        self.text = TextEncoder(enc)
        self.text_proj = TextProjection(enc.d_t, enc.d_v)
        self.crossmodal = CrossModalModule(enc.d_v, cfg.crossmodal)
        self.head_backbone = Linear(enc.d_v, num_classes, bias=False)
        self.head_fg_text = Linear(enc.d_v, num_classes, bias=False)
        self.head_fg_vis = Linear(enc.d_v, num_classes, bias=False)

    @classmethod
    def build(cls, cfg: Config, num_classes: int, seed: int) -> "FBAModel":
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            return cls(cfg, num_classes)
        finally:
            torch.random.set_rng_state(gen_state)

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def encode_text(self, ids: Tensor) -> Tensor:
        return self.text_proj(self.text(ids))

    def forward(self, images: Tensor, fg_ids: Tensor | None = None, bg_ids: Tensor | None = None,
                cross: bool | None = None) -> ModelOutput:
        """``images`` (B, H, W, 3); ``fg_ids``/``bg_ids`` (B, M) padded to equal length.

        ``cross=False`` runs only the visual backbone.
        """
        loss_cfg = self.cfg.loss
        run_cross = loss_cfg.use_cross if cross is None else cross
        vis = self.visual(images)
        backbone = vis[:, 0]
        out = ModelOutput(backbone, None, None, None, None, self.head_backbone(backbone), None, None)
        if not run_cross:
            return out
        if fg_ids is None or bg_ids is None:
            raise ValueError("cross-modal forward needs foreground and background captions")
        if fg_ids.shape != bg_ids.shape:
            raise ValueError("foreground and background captions must be padded to the same length")
        fg_slots, bg_slots = self.text.slot_mask(fg_ids), self.text.slot_mask(bg_ids)
        c = self.crossmodal(vis, self.encode_text(fg_ids), vis, self.encode_text(bg_ids), fg_slots, bg_slots)
        s, m, pooled = differential_pool(c.attn_fg, c.attn_bg, c.fg_text_tokens, loss_cfg.invert_mask,
                                         c.column_mask)
        f_fg_text = 0.5 * (c.f_fg_text + pooled) if loss_cfg.use_mask else c.f_fg_text
        out.cross = c
        out.f_fg_text = f_fg_text
        out.similarity, out.mask = s, m
        out.logits_fg_text = self.head_fg_text(f_fg_text)
        out.logits_fg_vis = self.head_fg_vis(c.f_fg_vis)
        return out
