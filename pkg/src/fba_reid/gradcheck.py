"""Finite-difference verification of the full training objective in float64.

Perturbing one scalar at a time and calling the model twice per scalar is
far too slow for ~10^5 parameters when each call is dominated by Python
overhead.  :func:`batched_central_diff` evaluates many single-coordinate
perturbations in one vectorised call via ``torch.func.vmap``; each batch
row is still an independent forward pass of the loss at ``theta +/- eps*e_i``.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor
from torch.func import functional_call, vmap

from . import autodiff as ad
from .autodiff import GradCheckResult, NonDeterministicError
from .config import Config, apply_overrides
from .losses import loss_terms
from .model import FBAModel

TINY = (
    "encoder.d_v=64",
    "encoder.d_t=32",
    "encoder.visual_layers=1",
    "encoder.text_layers=1",
    "encoder.max_text_len=4",
    "encoder.mlp_ratio=1",
    "crossmodal.mlp_ratio=1",
)
TINY_P, TINY_K = 4, 2
# batch-hard mining is only piecewise smooth; a small step keeps central differences off the
# switching points while float64 round-off stays near 1e-8 for losses of order 10
FD_EPS = 1e-7


def tiny_config(base: Config | None = None) -> Config:
    """d_v=64, 32x16 images with 8px patches (N=8), M=4 tokens; batch 4 ids x 2."""
    cfg = copy.deepcopy(base) if base is not None else Config()
    return apply_overrides(cfg, TINY).validate()


@dataclass
class TinyProblem:
    """A float64 model and one fixed random PK batch."""

    cfg: Config
    model: FBAModel
    images: Tensor
    fg: Tensor
    bg: Tensor
    labels: Tensor

    @property
    def named(self) -> list[tuple[str, torch.nn.Parameter]]:
        return self.model.trainable_parameters()

    def loss(self, overrides: dict[str, Tensor] | None = None) -> Tensor:
        """Total loss, optionally with some parameters swapped out by name."""
        args = (self.images, self.fg, self.bg)
        out = self.model(*args) if overrides is None else functional_call(self.model, overrides, args)
        return loss_terms(out.bundle(self.labels), self.cfg.loss)["total"]


def tiny_problem(cfg: Config, seed: int = 0) -> TinyProblem:
    enc = cfg.encoder
    model = FBAModel.build(cfg, TINY_P, seed=seed).double()
    g = torch.Generator().manual_seed(seed + 1)
    b = TINY_P * TINY_K
    images = torch.rand(b, enc.image_height, enc.image_width, 3, generator=g, dtype=torch.float64)
    fg = torch.randint(1, enc.vocab_size, (b, enc.max_text_len), generator=g)
    bg = torch.randint(1, enc.vocab_size, (b, enc.max_text_len), generator=g)
    # pad the tail of every other caption so the masked attention path is checked too
    fg[1::2, -1] = enc.pad_id
    bg[::2, -2:] = enc.pad_id
    labels = torch.arange(TINY_P).repeat_interleave(TINY_K)
    return TinyProblem(cfg, model, images, fg, bg, labels)


def batched_central_diff(problem: TinyProblem, name: str, indices, eps: float = FD_EPS,
                         chunk: int = 256) -> np.ndarray:
    """Central-difference derivatives of the loss w.r.t. ``param[name].flat[indices]``."""
    param = dict(problem.named)[name].detach()
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(len(indices), dtype=np.float64)

    def loss_at(value: Tensor) -> Tensor:
        return problem.loss({name: value})

    batched = vmap(loss_at)
    with torch.no_grad(), ad.unchecked():
        for start in range(0, len(indices), chunk):
            idx = torch.as_tensor(indices[start:start + chunk])
            k = len(idx)
            delta = torch.zeros(k, param.numel(), dtype=param.dtype)
            delta[torch.arange(k), idx] = eps
            delta = delta.view(k, *param.shape)
            losses = batched(torch.cat([param + delta, param - delta]))
            if not torch.isfinite(losses).all():
                raise ad.NonFiniteError("finite-difference loss")
            out[start:start + k] = ((losses[:k] - losses[k:]) / (2 * eps)).numpy()
    return out


def check_full_objective(cfg: Config, seed: int = 0, eps: float = FD_EPS, per_param: int | None = None,
                         chunk: int = 256) -> tuple[GradCheckResult, list[str], float]:
    """Central-difference check of the total loss over the trainable parameters.

    ``per_param=None`` visits every scalar of every trainable tensor;
    otherwise a seeded sample of at most ``per_param`` scalars per tensor.
    Returns the worst relative error, the parameter names (indexable by
    ``result.param_index``) and the wall time in seconds.
    """
    start = time.perf_counter()
    problem = tiny_problem(cfg, seed)
    named = problem.named
    with torch.no_grad():
        first, second = float(problem.loss()), float(problem.loss())
    if first != second:
        raise NonDeterministicError(f"loss is not deterministic ({first!r} != {second!r})")
    grads = torch.autograd.grad(problem.loss(), [p for _, p in named], allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = GradCheckResult(0.0, -1, -1, 0)
    for pi, ((name, p), g) in enumerate(zip(named, grads)):
        n = p.numel()
        indices = np.arange(n) if per_param is None else np.sort(rng.choice(n, size=min(per_param, n), replace=False))
        fd = batched_central_diff(problem, name, indices, eps, chunk)
        g_ad = np.zeros(n) if g is None else g.detach().reshape(-1).numpy()[indices]
        err = np.abs(g_ad - fd) / np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(fd)))
        worst.checked += len(indices)
        j = int(np.argmax(err))
        if err[j] > worst.max_rel_error:
            worst.max_rel_error, worst.param_index, worst.flat_index = float(err[j]), pi, int(indices[j])
    return worst, [n for n, _ in named], time.perf_counter() - start
