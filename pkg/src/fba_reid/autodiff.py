"""Differentiable op set used by every model component.

Each op is a thin wrapper over a torch primitive that rejects non-finite
results and names the op responsible, so a NaN surfaces where it is born
rather than three layers later.  Reverse-mode gradients come from torch's
autograd; :func:`finite_diff_check` is the independent central-difference
oracle used to verify them.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

LAYER_NORM_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class NonDeterministicError(RuntimeError):
    pass


_state = threading.local()


def checks_enabled() -> bool:
    return getattr(_state, "checks", True)


@contextlib.contextmanager
def unchecked():
    """Skip the data-dependent finiteness and zero-norm checks.

    Needed under ``torch.func.vmap``, where a tensor cannot be turned into a
    Python bool.  Shape and index-range checks stay on.
    """
    prev = checks_enabled()
    _state.checks = False
    try:
        yield
    finally:
        _state.checks = prev


def _guard(out: Tensor, op: str) -> Tensor:
    if checks_enabled() and not torch.isfinite(out).all():
        raise NonFiniteError(op)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _guard(a @ b, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return x.transpose(-1, -2)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _guard(a + b, "add")


def scale(x: Tensor, c: float) -> Tensor:
    return _guard(x * c, "scale")


def concat(xs: Sequence[Tensor], dim: int = -1) -> Tensor:
    return torch.cat(list(xs), dim=dim)


def slice_(x: Tensor, dim: int, start: int, stop: int) -> Tensor:
    return x.narrow(dim, start, stop - start)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = x @ weight
    if bias is not None:
        out = out + bias
    return _guard(out, "linear")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return _guard((x - mu) / torch.sqrt(var + eps) * weight + bias, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    # exact erf form
    return _guard(0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0))), "gelu")


def embedding(ids: Tensor, table: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return table[ids]


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return _guard(e / e.sum(dim=dim, keepdim=True), "softmax")


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return _guard(shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True)), "log_softmax")


def l2_norm(x: Tensor, dim: int = -1) -> Tensor:
    return _guard(torch.sqrt((x * x).sum(dim=dim)), "l2_norm")


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    n = l2_norm(x, dim=dim).unsqueeze(dim)
    if checks_enabled() and (n == 0).any():
        raise ZeroDivisionError("cannot normalize a zero vector")
    return x / n


def cosine_similarity(a: Tensor, b: Tensor, dim: int = -1) -> Tensor:
    na, nb = l2_norm(a, dim), l2_norm(b, dim)
    if checks_enabled() and ((na == 0).any() or (nb == 0).any()):
        raise ZeroDivisionError("cosine similarity of a zero vector is undefined")
    return _guard((a * b).sum(dim=dim) / (na * nb), "cosine_similarity")


def sq_euclidean(a: Tensor, b: Tensor, dim: int = -1) -> Tensor:
    """Squared distance between matching rows of ``a`` and ``b``."""
    d = a - b
    return _guard((d * d).sum(dim=dim), "sq_euclidean")


def pairwise_sq_euclidean(x: Tensor) -> Tensor:
    """B×B squared distances, computed by explicit differences (exact zeros on the diagonal)."""
    d = x.unsqueeze(1) - x.unsqueeze(0)
    return _guard((d * d).sum(dim=-1), "pairwise_sq_euclidean")


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise IndexError(f"label out of range [0, {logits.shape[-1]})")
    logp = log_softmax(logits, dim=-1)
    return _guard(-logp.gather(-1, labels.long().unsqueeze(-1)).mean(), "cross_entropy")


def forward_backward(loss: Tensor, leaves: Sequence[Tensor]) -> list[Tensor]:
    """Backpropagate a scalar loss; returns d(loss)/d(leaf) for each leaf.

    Leaves that do not influence the loss get a zero gradient.  Gradients
    are also accumulated into ``leaf.grad``.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    _guard(loss, "loss")
    leaves = list(leaves)
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    out = []
    for leaf, g in zip(leaves, grads):
        g = torch.zeros_like(leaf) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError("backward")
        leaf.grad = g.clone() if leaf.grad is None else leaf.grad + g
        out.append(g)
    return out


@dataclass
class GradCheckResult:
    max_rel_error: float
    param_index: int
    flat_index: int
    checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    grads: Sequence[Tensor] | None = None,
    coords: Sequence[Sequence[int]] | None = None,
) -> GradCheckResult:
    """Compare reverse-mode gradients against central differences.

    Error per scalar is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``; the
    maximum over every checked scalar is returned.  ``grads`` overrides the
    autodiff gradients (useful to confirm the check can fail); ``coords``
    restricts which flat indices of each parameter are visited (default: all).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with torch.no_grad():
        first, second = float(loss_fn()), float(loss_fn())
    if first != second:
        raise NonDeterministicError(f"loss_fn is not deterministic ({first!r} != {second!r})")
    if grads is None:
        with torch.enable_grad():
            grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    worst = GradCheckResult(0.0, -1, -1, 0)
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, grads)):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            indices = range(flat.numel()) if coords is None else coords[pi]
            for i in indices:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                ad = float(gflat[i])
                err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
                worst.checked += 1
                if err > worst.max_rel_error:
                    worst.max_rel_error, worst.param_index, worst.flat_index = err, pi, i
    return worst
