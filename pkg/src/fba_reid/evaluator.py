"""Retrieval evaluation, fore/back separation statistics and attention export."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffpool import attention_similarity, minmax_mask
from .model import FBAModel
from .synthdata import ReIDData
from .trainer import batch_tensors

COMPOSITIONS = ("backbone", "cross", "concat")
RANKS = (1, 5, 10)


@dataclass
class GallerySet:
    features: np.ndarray  # (n, d), rows L2-normalised
    pids: np.ndarray
    camids: np.ndarray
    is_query: np.ndarray


@dataclass
class EvalReport:
    mAP: float
    cmc: dict[str, float]
    num_queries: int
    num_skipped: int
    separation: dict[str, float] | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def forward_all(model: FBAModel, data: ReIDData, batch_size: int = 64, cross: bool | None = None):
    """Per-image outputs, concatenated over batches (float64 numpy)."""
    dtype = next(model.parameters()).dtype
    keys = ("backbone", "f_fg_text", "f_fg_vis", "f_bg_text", "f_bg_vis")
    chunks: dict[str, list] = {k: [] for k in keys}
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        out = model(*batch_tensors(data, idx, dtype), cross=cross)
        chunks["backbone"].append(out.backbone)
        if out.cross is not None:
            chunks["f_fg_text"].append(out.f_fg_text)
            chunks["f_fg_vis"].append(out.cross.f_fg_vis)
            chunks["f_bg_text"].append(out.cross.f_bg_text)
            chunks["f_bg_vis"].append(out.cross.f_bg_vis)
    return {k: torch.cat(v).double().numpy() for k, v in chunks.items() if v}


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if (n == 0).any():
        raise ZeroDivisionError("zero embedding cannot be normalised")
    return x / n


def compose(feats: dict[str, np.ndarray], composition: str) -> np.ndarray:
    """Retrieval embedding; each part is L2-normalised, and so is the result."""
    if composition == "backbone":
        return _normalize(feats["backbone"])
    if "f_fg_vis" not in feats:
        raise ValueError(f"composition {composition!r} needs the cross-modal branch")
    if composition == "cross":
        return _normalize(feats["f_fg_vis"])
    if composition == "concat":
        parts = [_normalize(feats[k]) for k in ("backbone", "f_fg_vis", "f_fg_text")]
        return _normalize(np.concatenate(parts, axis=1))
    raise ValueError(f"unknown composition {composition!r}")


def extract_features(model: FBAModel, data: ReIDData, composition: str = "concat",
                     is_query: np.ndarray | None = None) -> GallerySet:
    feats = forward_all(model, data, cross=composition != "backbone")
    flags = np.zeros(len(data), dtype=bool) if is_query is None else np.asarray(is_query, dtype=bool)
    return GallerySet(compose(feats, composition), data.pids.copy(), data.camids.copy(), flags)


def average_precision(relevant_sorted: np.ndarray) -> float:
    """Mean of precision at each relevant rank, over a ranked 0/1 relevance vector."""
    hits = np.flatnonzero(relevant_sorted)
    if len(hits) == 0:
        return float("nan")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def _query_result(q: int, gallery: GallerySet, g_idx: np.ndarray):
    qf = gallery.features[q]
    dist = 1.0 - gallery.features[g_idx] @ qf
    pid, cam = gallery.pids[q], gallery.camids[q]
    gp, gc = gallery.pids[g_idx], gallery.camids[g_idx]
    keep = ~((gp == pid) & (gc == cam)) if cam != -1 else np.ones(len(g_idx), dtype=bool)
    # stable sort: ties broken by gallery order
    order = np.argsort(dist[keep], kind="stable")
    relevant = (gp[keep] == pid)[order]
    if not relevant.any():
        return None
    first = int(np.argmax(relevant))
    return average_precision(relevant), first


def map_cmc(gallery: GallerySet, ranks=RANKS, jobs: int = 1) -> EvalReport:
    """mAP and CMC with the cross-camera protocol.

    Gallery items sharing both pid and camid with the query are dropped;
    camid -1 disables that exclusion.  Queries with no relevant gallery item
    are skipped and counted.  Per-query results are computed independently
    and reduced in query order, so ``jobs`` does not change the result.
    """
    q_idx = np.flatnonzero(gallery.is_query)
    g_idx = np.flatnonzero(~gallery.is_query)
    if len(q_idx) == 0:
        raise ValueError("empty query set")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda q: _query_result(q, gallery, g_idx), q_idx))
    else:
        results = [_query_result(q, gallery, g_idx) for q in q_idx]
    valid = [r for r in results if r is not None]
    skipped = len(results) - len(valid)
    if not valid:
        return EvalReport(0.0, {str(k): 0.0 for k in ranks}, len(q_idx), skipped)
    aps = np.array([r[0] for r in valid])
    firsts = np.array([r[1] for r in valid])
    cmc = {str(k): float(np.mean(firsts < k)) for k in ranks}
    return EvalReport(float(np.mean(aps)), cmc, len(q_idx), skipped)


def _row_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ZeroDivisionError("separation statistics undefined for zero vectors")
    return np.sum(a * b, axis=1) / (na * nb)


def separation_stats(f_fg_text, f_fg_vis, f_bg_text, f_bg_vis) -> dict[str, float]:
    """Mean intra-pair cosine (fg text/vis, bg text/vis) and mean fore-vs-back cosine."""
    feats = [np.asarray(f, dtype=np.float64) for f in (f_fg_text, f_fg_vis, f_bg_text, f_bg_vis)]
    if len(feats[0]) < 2:
        raise ValueError("need at least two samples")
    ft, fv, bt, bv = feats
    inter = np.mean([_row_cos(f, b) for f in (ft, fv) for b in (bt, bv)], axis=0)
    return {
        "intra_fg": float(np.mean(_row_cos(ft, fv))),
        "intra_bg": float(np.mean(_row_cos(bt, bv))),
        "inter": float(np.mean(inter)),
    }


def evaluate(model: FBAModel, data: ReIDData, is_query: np.ndarray, composition: str = "concat",
             jobs: int = 1) -> tuple[EvalReport, GallerySet]:
    gallery = extract_features(model, data, composition, is_query)
    report = map_cmc(gallery, jobs=jobs)
    if model.cfg.loss.use_cross or composition != "backbone":
        feats = forward_all(model, data, cross=True)
        report.separation = separation_stats(feats["f_fg_text"], feats["f_fg_vis"],
                                             feats["f_bg_text"], feats["f_bg_vis"])
    report.config = {"composition": composition, "num_images": int(len(data))}
    return report, gallery


def _write_csv(path: Path, matrix: np.ndarray, col_name: str) -> None:
    matrix = np.atleast_2d(matrix)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{col_name}{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            w.writerow([repr(float(x)) for x in row])


@torch.no_grad()
def attn_export(model: FBAModel, image: np.ndarray, fg_tokens: np.ndarray, bg_tokens: np.ndarray,
                out_dir) -> dict[str, Path]:
    """Write W_f, W_b (N x M), s, m and a patch-grid saliency map as CSV.

    Only token columns that are real in both captions are written, so M is
    the shorter caption length; the saliency map sums W_f over all real
    foreground tokens.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    img = torch.as_tensor(np.asarray(image), dtype=dtype).unsqueeze(0)
    fg = torch.as_tensor(np.asarray(fg_tokens)).long().unsqueeze(0)
    bg = torch.as_tensor(np.asarray(bg_tokens)).long().unsqueeze(0)
    res = model(img, fg, bg, cross=True)
    shared = res.cross.column_mask[0]
    rows, cols = model.cfg.encoder.grid
    saliency = res.cross.attn_fg[0].double().sum(dim=1).reshape(rows, cols)
    w_f = res.cross.attn_fg[0][:, shared].double()
    w_b = res.cross.attn_bg[0][:, shared].double()
    s = attention_similarity(w_f, w_b)
    m = minmax_mask(s)
    paths = {
        "W_f": out / "W_f.csv",
        "W_b": out / "W_b.csv",
        "s": out / "s.csv",
        "m": out / "m.csv",
        "saliency": out / "saliency.csv",
    }
    _write_csv(paths["W_f"], w_f.numpy(), "token")
    _write_csv(paths["W_b"], w_b.numpy(), "token")
    _write_csv(paths["s"], s.numpy(), "token")
    _write_csv(paths["m"], m.numpy(), "token")
    _write_csv(paths["saliency"], saliency.numpy(), "col")
    return paths
