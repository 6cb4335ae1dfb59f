"""Loss-component ablation on the synthetic corpus.

Four rows, each adding one component: backbone ID + triplet only, then the
cross-modal ID + triplet terms, then the diversity loss, then the token mask.
Every row is trained and evaluated with the same seeds.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, apply_overrides
from .evaluator import evaluate
from .model import FBAModel
from .synthdata import generate_corpus, load_dataset, query_gallery_split, split_by_identity
from .trainer import train_model

GRID = (
    ("baseline", ["loss.use_cross=false", "loss.lam=0", "loss.use_mask=false"]),
    ("+cross", ["loss.use_cross=true", "loss.lam=0", "loss.use_mask=false"]),
    ("+div", ["loss.use_cross=true", "loss.lam=0.5", "loss.use_mask=false"]),
    ("+div+mask", ["loss.use_cross=true", "loss.lam=0.5", "loss.use_mask=true"]),
)
COMPONENTS = {
    "baseline": (True, False, False, False),
    "+cross": (True, True, False, False),
    "+div": (True, True, True, False),
    "+div+mask": (True, True, True, True),
}
METRICS = ("mAP", "R1", "R5", "R10")


@dataclass
class AblationRow:
    name: str
    components: tuple[bool, bool, bool, bool]
    per_seed: list[dict] = field(default_factory=list)

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.per_seed if r.get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        keys = METRICS + ("intra_fg", "intra_bg", "inter")
        return {
            "name": self.name,
            "ID+Tri": self.components[0],
            "ID_C+Tri_C": self.components[1],
            "div": self.components[2],
            "mask": self.components[3],
            **{k: self.mean(k) for k in keys},
            "per_seed": self.per_seed,
        }


def row_config(base: Config, name: str, seed: int) -> Config:
    overrides = dict(GRID)[name] + [f"train.seed={seed}", f"data.seed={seed}"]
    return apply_overrides(copy.deepcopy(base), overrides).validate()


def run_one(cfg: Config, corpus_dir) -> dict:
    """Train one configuration and evaluate it on the held-out identities.

    Rows without the cross-modal branch are scored on the backbone
    embedding, since they never train the cross-modal module.
    """
    manifest = Path(corpus_dir) / "manifest.jsonl"
    if not manifest.exists():
        generate_corpus(cfg.data, corpus_dir, cfg.encoder.max_text_len)
    data = load_dataset(manifest, cfg.encoder.max_text_len, cfg.encoder.pad_id)
    train_data, test_data = split_by_identity(data, cfg.data.num_train_ids)
    label_map = {int(p): i for i, p in enumerate(np.unique(train_data.pids))}
    model = FBAModel.build(cfg, len(label_map), seed=cfg.train.seed)
    history = train_model(model, train_data, cfg, label_map)
    composition = cfg.eval.composition if cfg.loss.use_cross else "backbone"
    is_query = query_gallery_split(test_data.pids, test_data.camids)
    report, _ = evaluate(model, test_data, is_query, composition)
    out = {
        "seed": cfg.train.seed,
        "composition": composition,
        "mAP": report.mAP,
        "R1": report.cmc["1"],
        "R5": report.cmc["5"],
        "R10": report.cmc["10"],
        "final_loss": history[-1]["total"],
    }
    if cfg.loss.use_cross:
        out.update(report.separation)
    return out


def run_ablation(base: Config, seeds, work_dir, log=None) -> list[AblationRow]:
    work = Path(work_dir)
    rows = [AblationRow(name, COMPONENTS[name]) for name, _ in GRID]
    for seed in seeds:
        corpus = work / f"corpus_seed{seed}"
        for row in rows:
            cfg = row_config(base, row.name, seed)
            result = run_one(cfg, corpus)
            row.per_seed.append(result)
            if log is not None:
                log(f"seed {seed} {row.name}: mAP {result['mAP']:.4f}")
    return rows


def format_table(rows: list[AblationRow]) -> str:
    mark = lambda b: "x" if b else "-"  # noqa: E731
    header = f"{'row':<10} {'ID+Tri':>6} {'C':>3} {'div':>4} {'mask':>5} " + " ".join(
        f"{m:>7}" for m in METRICS
    ) + f" {'inter':>7}"
    lines = [header]
    for r in rows:
        c = r.components
        inter = r.mean("inter")
        lines.append(
            f"{r.name:<10} {mark(c[0]):>6} {mark(c[1]):>3} {mark(c[2]):>4} {mark(c[3]):>5} "
            + " ".join(f"{100 * r.mean(m):7.2f}" for m in METRICS)
            + (f" {inter:7.4f}" if not np.isnan(inter) else f" {'-':>7}")
        )
    return "\n".join(lines)


def write_outputs(rows: list[AblationRow], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, tpath = out / "ablation.json", out / "ablation.txt"
    jpath.write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n", encoding="utf-8")
    tpath.write_text(format_table(rows) + "\n", encoding="utf-8")
    return jpath, tpath
