import copy

import numpy as np
import pytest
import torch

from fba_reid.config import Config, DataConfig, apply_overrides
from fba_reid.synthdata import generate_corpus, load_dataset


def central_diff(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Reference numerical gradient of a scalar ``fn`` at a float64 tensor ``x``.

    Kept deliberately separate from the package's own checker so op tests do
    not validate the library against itself.
    """
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        _fill(fn, x, flat, gflat, eps)
    return grad


def _fill(fn, x, flat, gflat, eps):
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn(x))
        flat[i] = orig - eps
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)


def autograd(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), [x])
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach().double(), b.detach().double()
    return float(((a - b).abs() / torch.clamp(torch.maximum(a.abs(), b.abs()), min=1.0)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config() -> Config:
    """Default architecture, short schedule, an 8-identity corpus."""
    cfg = Config()
    apply_overrides(cfg, [
        "data.num_ids=8", "data.images_per_id=4", "data.num_train_ids=4",
        "train.epochs=3", "train.warmup_epochs=1", "train.P=4", "train.K=2",
    ])
    return cfg.validate()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """An 8-identity, 4-image corpus on disk; returns its directory."""
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(DataConfig(num_ids=8, images_per_id=4, num_train_ids=4), root, max_len=12)
    return root


@pytest.fixture(scope="session")
def small_data(small_corpus):
    return load_dataset(small_corpus / "manifest.jsonl", 12, 0)


@pytest.fixture
def fresh(small_config):
    return copy.deepcopy(small_config)


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    """The default synthetic corpus (32 identities x 8 images)."""
    root = tmp_path_factory.mktemp("default_corpus")
    generate_corpus(DataConfig(), root, max_len=12)
    return root


@pytest.fixture
def float64():
    """Run one test with float64 as torch's default dtype, restoring it afterwards."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
