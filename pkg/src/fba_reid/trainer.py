"""Optimisation loop: per-epoch warmup + cosine schedule, Adam with decoupled weight decay."""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from . import autodiff as ad
from .config import Config, TrainConfig
from .io import load_checkpoint, save_checkpoint
from .losses import LOG_TERMS, total_loss
from .model import FBAModel
from .synthdata import PKSampler, ReIDData, load_dataset, split_by_identity

log = logging.getLogger(__name__)

WARMUP_START = 0.001
COSINE_FLOOR = 0.01
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, op: str):
        super().__init__(f"non-finite value at step {step} (op '{op}')")
        self.step = step
        self.op = op


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0.001*base to base, then cosine decay to 0.01*base at the last epoch."""
    E, w, base = cfg.epochs, cfg.warmup_epochs, cfg.base_lr
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    if epoch < w:
        return base * (WARMUP_START + (1 - WARMUP_START) * epoch / w)
    span = max(E - 1 - w, 1)
    return base * (COSINE_FLOOR + (1 - COSINE_FLOOR) * 0.5 * (1 + math.cos(math.pi * (epoch - w) / span)))


@dataclass
class AdamState:
    step: int = 0
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState, lr: float,
              weight_decay: float = 0.0, betas: tuple[float, float] = BETAS, eps: float = ADAM_EPS) -> AdamState:
    """In-place Adam update; weight decay is applied as ``p -= lr*wd*p`` before the Adam delta."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


@contextmanager
def single_threaded():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


def batch_tensors(data: ReIDData, idx: np.ndarray, dtype=torch.float32):
    return (
        torch.from_numpy(data.images[idx]).to(dtype),
        torch.from_numpy(data.fg_tokens[idx]),
        torch.from_numpy(data.bg_tokens[idx]),
    )


def steps_per_epoch(n_images: int, P: int, K: int) -> int:
    return max(1, math.ceil(n_images / (P * K)))


def train_model(model: FBAModel, data: ReIDData, cfg: Config, label_map: dict[int, int],
                on_step: Callable[[dict], None] | None = None, compute_div: bool = True) -> list[dict]:
    """Train in place; returns the per-step log rows."""
    tc = cfg.train
    sampler = PKSampler(data.pids, tc.P, tc.K, seed=tc.seed)
    per_epoch = steps_per_epoch(len(data), tc.P, tc.K)
    named = model.trainable_parameters()
    params = [p for _, p in named]
    state = AdamState()
    rows = []
    step = 0
    model.train()
    with single_threaded():
        for epoch in range(tc.epochs):
            lr = lr_at(epoch, tc)
            for _ in range(per_epoch):
                batch = sampler.batch(step)
                images, fg, bg = batch_tensors(data, batch.indices, params[0].dtype)
                labels = torch.tensor([label_map[int(p)] for p in batch.labels])
                try:
                    out = model(images, fg, bg)
                    loss, terms = total_loss(out.bundle(labels), cfg.loss, compute_div=compute_div)
                    grads = ad.forward_backward(loss, params)
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(step, exc.op) from exc
                for p in params:
                    p.grad = None
                adam_step(params, grads, state, lr, tc.weight_decay)
                row = {"step": step, **{k: terms.get(k) for k in LOG_TERMS}, "lr": lr}
                rows.append(row)
                if on_step is not None:
                    on_step(row)
                step += 1
    model.eval()
    return rows


def checkpoint_meta(cfg: Config, label_map: dict[int, int]) -> dict:
    return {"config": cfg.to_dict(), "num_classes": len(label_map),
            "train_pids": sorted(label_map, key=label_map.get)}


def save_model(model: FBAModel, cfg: Config, label_map: dict[int, int], directory) -> None:
    save_checkpoint(directory, model.state_dict(), checkpoint_meta(cfg, label_map))


def load_model(directory, cfg: Config | None = None) -> tuple[FBAModel, dict]:
    state, meta = load_checkpoint(directory)
    cfg = Config.from_dict(meta["config"]) if cfg is None else cfg
    model = FBAModel(cfg, meta["num_classes"])
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ValueError(f"checkpoint/model mismatch on tensors: {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, meta


def train(cfg: Config, manifest_path, out_dir=None) -> Path:
    """Train on the training identities of a manifest; writes ``checkpoint/`` and ``train_log.jsonl``."""
    out = Path(out_dir if out_dir is not None else cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(manifest_path, cfg.encoder.max_text_len, cfg.encoder.pad_id)
    train_data, _ = split_by_identity(data, cfg.data.num_train_ids)
    label_map = {int(p): i for i, p in enumerate(np.unique(train_data.pids))}
    model = FBAModel.build(cfg, len(label_map), seed=cfg.train.seed)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def write(row):
            fh.write(json.dumps(row) + "\n")
        try:
            train_model(model, train_data, cfg, label_map, on_step=write)
        except TrainingDiverged as exc:
            fh.write(json.dumps({"step": exc.step, "error": str(exc)}) + "\n")
            raise
    save_model(model, cfg, label_map, out / "checkpoint")
    return out
