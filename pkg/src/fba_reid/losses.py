"""Training objective: identity, triplet and the foreground/background diversity terms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from . import autodiff as ad
from .config import LossConfig


class NoValidTripletError(ValueError):
    """The batch has no (anchor, positive, negative) triple; usually a sampler bug."""


@dataclass
class FeatureBundle:
    backbone: Tensor  # (B, d) backbone [CLS]
    f_fg_text: Tensor
    f_fg_vis: Tensor
    f_bg_text: Tensor
    f_bg_vis: Tensor
    labels: Tensor  # (B,)
    logits_backbone: Tensor  # (B, C)
    logits_fg_text: Tensor | None = None
    logits_fg_vis: Tensor | None = None

    def __post_init__(self):
        b = self.labels.shape[0]
        for name in ("backbone", "f_fg_text", "f_fg_vis", "f_bg_text", "f_bg_vis", "logits_backbone"):
            t = getattr(self, name)
            if t is not None and t.shape[0] != b:
                raise ValueError(f"{name} has batch size {t.shape[0]}, labels have {b}")


def id_loss(logits: Tensor, labels: Tensor) -> Tensor:
    return ad.cross_entropy(logits, labels)


def _hinge(x: Tensor) -> Tensor:
    return torch.clamp(x, min=0.0)


def _masked_mean(x: Tensor, mask: Tensor) -> Tensor:
    # a multiply rather than boolean indexing keeps the loss vmap-compatible
    return (x * mask).sum() / mask.sum()


def triplet_loss(features: Tensor, labels: Tensor, margin: float = 0.3, mining: str = "batch_hard") -> Tensor:
    """Triplet loss on squared Euclidean distances.

    ``batch_hard``: per anchor, the farthest positive and the nearest negative,
    averaged over anchors that have both.  ``all_valid``: mean hinge over every
    valid (a, p, n) with p != a.
    """
    dist = ad.pairwise_sq_euclidean(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    anchors = pos.any(dim=1) & neg.any(dim=1)
    if not anchors.any():
        raise NoValidTripletError("batch contains no valid triplet")
    if mining == "batch_hard":
        hardest_pos = torch.where(pos, dist, torch.full_like(dist, -float("inf"))).amax(dim=1)
        hardest_neg = torch.where(neg, dist, torch.full_like(dist, float("inf"))).amin(dim=1)
        return _masked_mean(_hinge(hardest_pos - hardest_neg + margin), anchors)
    if mining == "all_valid":
        # [a, p, n]
        valid = pos.unsqueeze(2) & neg.unsqueeze(1)
        vals = _hinge(dist.unsqueeze(2) - dist.unsqueeze(1) + margin)
        return _masked_mean(vals, valid)
    raise ValueError(f"unknown mining mode {mining!r}")


def _tuple_term(a: Tensor, b: Tensor, c: Tensor, d: Tensor, margin: float) -> Tensor:
    pos = ad.sq_euclidean(a, b)
    return 0.5 * (_hinge(pos - ad.sq_euclidean(a, c) + margin) + _hinge(pos - ad.sq_euclidean(a, d) + margin))


def tri_div_loss(f_fg_text: Tensor, f_fg_vis: Tensor, f_bg_text: Tensor, f_bg_vis: Tensor, margin: float = 0.3) -> Tensor:
    """Sum of the four fore/back tuple terms, per sample, averaged over the batch."""
    shapes = {t.shape for t in (f_fg_text, f_fg_vis, f_bg_text, f_bg_vis)}
    if len(shapes) != 1:
        raise ValueError(f"feature shapes disagree: {shapes}")
    per_sample = (
        _tuple_term(f_fg_text, f_fg_vis, f_bg_text, f_bg_vis, margin)
        + _tuple_term(f_bg_text, f_bg_vis, f_fg_text, f_fg_vis, margin)
        + _tuple_term(f_fg_vis, f_fg_text, f_bg_text, f_bg_vis, margin)
        + _tuple_term(f_bg_vis, f_bg_text, f_fg_text, f_fg_vis, margin)
    )
    return per_sample.mean()


def con_loss(f_fg_text: Tensor, f_fg_vis: Tensor, f_bg_text: Tensor, f_bg_vis: Tensor) -> Tensor:
    per_sample = (1 - ad.cosine_similarity(f_fg_text, f_fg_vis)) + (1 - ad.cosine_similarity(f_bg_text, f_bg_vis))
    return per_sample.mean()


def div_loss(f_fg_text: Tensor, f_fg_vis: Tensor, f_bg_text: Tensor, f_bg_vis: Tensor, margin: float = 0.3) -> Tensor:
    return tri_div_loss(f_fg_text, f_fg_vis, f_bg_text, f_bg_vis, margin) + con_loss(
        f_fg_text, f_fg_vis, f_bg_text, f_bg_vis
    )


LOG_TERMS = ("L_ID", "L_Tri", "L_ID_C", "L_Tri_C", "L_tridiv", "L_con", "total")


def loss_terms(bundle: FeatureBundle, cfg: LossConfig, compute_div: bool = True) -> dict[str, Tensor]:
    """Every active loss term as a tensor, plus ``"total"``.

    The diversity terms only enter the graph when ``lam > 0``; with
    ``lam == 0`` they are still evaluated (detached) for the log unless
    ``compute_div`` is off.
    """
    y = bundle.labels
    # metric terms see unit-normalised embeddings; raw squared distances collapse the features
    unit = ad.l2_normalize
    terms: dict[str, Tensor] = {
        "L_ID": id_loss(bundle.logits_backbone, y),
        "L_Tri": triplet_loss(unit(bundle.backbone), y, cfg.margin, cfg.mining),
    }
    total = terms["L_ID"] + terms["L_Tri"]
    if cfg.use_cross:
        terms["L_ID_C"] = id_loss(bundle.logits_fg_text, y) + id_loss(bundle.logits_fg_vis, y)
        terms["L_Tri_C"] = triplet_loss(unit(bundle.f_fg_text), y, cfg.margin, cfg.mining) + triplet_loss(
            unit(bundle.f_fg_vis), y, cfg.margin, cfg.mining
        )
        total = total + terms["L_ID_C"] + terms["L_Tri_C"]
        feats = tuple(unit(f) for f in (bundle.f_fg_text, bundle.f_fg_vis, bundle.f_bg_text, bundle.f_bg_vis))
        if cfg.lam > 0:
            terms["L_tridiv"] = tri_div_loss(*feats, margin=cfg.margin)
            terms["L_con"] = con_loss(*feats)
            total = total + cfg.lam * (terms["L_tridiv"] + terms["L_con"])
        elif compute_div:
            with torch.no_grad():
                terms["L_tridiv"] = tri_div_loss(*feats, margin=cfg.margin)
                terms["L_con"] = con_loss(*feats)
    terms["total"] = total
    return terms


def total_loss(bundle: FeatureBundle, cfg: LossConfig, compute_div: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Full objective plus a per-term breakdown as floats, for logging."""
    terms = loss_terms(bundle, cfg, compute_div)
    return terms["total"], {k: float(v.detach()) for k, v in terms.items()}
