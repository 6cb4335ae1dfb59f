import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fba_reid import autodiff as ad
from conftest import autograd, central_diff, rel_err

pytestmark = pytest.mark.usefixtures("float64")


def _grad_ok(fn, x, tol=1e-4):
    return rel_err(autograd(fn, x), central_diff(fn, x)) <= tol


# --- forward_backward -------------------------------------------------------

def test_square_gradient():
    x = torch.tensor(3.0, requires_grad=True)
    (g,) = ad.forward_backward(x * x, [x])
    assert float(g) == 6.0


def test_product_gradients():
    x = torch.tensor(2.0, requires_grad=True)
    y = torch.tensor(5.0, requires_grad=True)
    gx, gy = ad.forward_backward(x * y, [x, y])
    assert (float(gx), float(gy)) == (5.0, 2.0)


def test_softmax_cross_entropy_gradient_is_p_minus_onehot():
    logits = torch.tensor([[0.3, -1.2, 2.0]])
    label = torch.tensor([1])
    p = torch.softmax(logits, dim=-1)
    expected = p - torch.nn.functional.one_hot(label, 3)
    fd = central_diff(lambda z: ad.cross_entropy(z, label), logits, eps=1e-5)
    assert torch.allclose(fd, expected, atol=1e-8)
    assert torch.allclose(autograd(lambda z: ad.cross_entropy(z, label), logits), expected, atol=1e-12)


def test_forward_backward_rejects_non_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.forward_backward(x * 2, [x])


def test_forward_backward_accumulates_across_calls():
    x = torch.tensor([1.0, -2.0], requires_grad=True)
    ad.forward_backward((x * x).sum(), [x])
    ad.forward_backward((3 * x).sum(), [x])
    assert torch.equal(x.grad, 2 * x.detach() + 3)


def test_backward_of_sum_equals_sum_of_backwards():
    g = torch.Generator().manual_seed(1)
    w = torch.randn(4, 3, generator=g, requires_grad=True)
    x = torch.randn(5, 4, generator=g)
    f1 = lambda: ad.mean(ad.gelu(ad.linear(x, w)))  # noqa: E731
    f2 = lambda: ad.l2_norm(ad.matmul(x, w)).sum()  # noqa: E731
    (ga,) = ad.forward_backward(f1() + f2(), [w])
    (g1,) = torch.autograd.grad(f1(), [w])
    (g2,) = torch.autograd.grad(f2(), [w])
    assert torch.allclose(ga, g1 + g2, atol=1e-12)


def test_fan_out_accumulates():
    x = torch.tensor(1.5, requires_grad=True)
    # x feeds three branches: d/dx (x + x^2 + 2x) = 3 + 2x
    (g,) = ad.forward_backward(ad.add(ad.add(x, x * x), ad.scale(x, 2.0)), [x])
    assert float(g) == pytest.approx(6.0, abs=1e-12)


def test_unused_leaf_gets_zero_grad():
    x = torch.tensor(1.0, requires_grad=True)
    y = torch.tensor(2.0, requires_grad=True)
    _, gy = ad.forward_backward(x * 3, [x, y])
    assert float(gy) == 0.0


# --- NaN diagnostics --------------------------------------------------------

def test_non_finite_names_the_op():
    with pytest.raises(ad.NonFiniteError) as info:
        ad.matmul(torch.tensor([[1e308]]), torch.tensor([[1e10]]))
    assert info.value.op == "matmul"
    assert "matmul" in str(info.value)


def test_nan_input_flagged_at_first_op():
    with pytest.raises(ad.NonFiniteError, match="gelu"):
        ad.gelu(torch.tensor([float("nan")]))


def test_unchecked_context_skips_and_restores():
    bad = torch.tensor([float("inf")])
    with ad.unchecked():
        assert not ad.checks_enabled()
        assert torch.isinf(ad.scale(bad, 2.0)).all()
    assert ad.checks_enabled()
    with pytest.raises(ad.NonFiniteError):
        ad.scale(bad, 2.0)


# --- softmax ----------------------------------------------------------------

def test_softmax_symmetric():
    assert torch.allclose(ad.softmax(torch.tensor([0.0, 0.0])), torch.tensor([0.5, 0.5]), atol=0)


def test_softmax_closed_form():
    out = ad.softmax(torch.tensor([0.0, math.log(3.0)]))
    assert torch.allclose(out, torch.tensor([0.25, 0.75]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(values, c):
    x = torch.tensor(values)
    assert (ad.softmax(x + c) - ad.softmax(x)).abs().max() <= 1e-12


def test_softmax_handles_large_logits():
    out = ad.softmax(torch.tensor([1000.0, 1000.0]))
    assert torch.allclose(out, torch.tensor([0.5, 0.5]))


def test_log_softmax_matches_log_of_softmax():
    x = torch.tensor([[0.1, 2.0, -3.0]])
    assert torch.allclose(ad.log_softmax(x), torch.log(ad.softmax(x)), atol=1e-14)


# --- elementary ops: examples -------------------------------------------------

def test_matmul_and_transpose():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(ad.matmul(a, ad.transpose(a)), torch.tensor([[5.0, 11.0], [11.0, 25.0]]))


def test_add_scale_concat_slice():
    a = torch.tensor([1.0, 2.0])
    assert torch.equal(ad.add(a, a), torch.tensor([2.0, 4.0]))
    assert torch.equal(ad.scale(a, -0.5), torch.tensor([-0.5, -1.0]))
    c = ad.concat([a, torch.tensor([3.0])], dim=0)
    assert torch.equal(c, torch.tensor([1.0, 2.0, 3.0]))
    assert torch.equal(ad.slice_(c, 0, 1, 3), torch.tensor([2.0, 3.0]))


def test_linear_weight_is_in_by_out():
    x = torch.tensor([[1.0, 2.0]])
    w = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    assert torch.equal(ad.linear(x, w, torch.tensor([0.0, 0.0, 1.0])), torch.tensor([[1.0, 2.0, 4.0]]))


def test_layer_norm_unit_moments():
    x = torch.tensor([[1.0, 2.0, 3.0, 4.0]])
    y = ad.layer_norm(x, torch.ones(4), torch.zeros(4))
    assert float(y.mean()) == pytest.approx(0.0, abs=1e-12)
    # population variance 1.25 -> normalised variance 1.25 / (1.25 + 1e-5)
    assert float((y * y).mean()) == pytest.approx(1.25 / (1.25 + 1e-5), rel=1e-12)


def test_gelu_known_values():
    out = ad.gelu(torch.tensor([0.0, 1.0, -1.0]))
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert torch.allclose(out, torch.tensor([0.0, phi1, -(1 - phi1)]), atol=1e-15)


def test_embedding_lookup_and_range():
    table = torch.arange(6.0).reshape(3, 2)
    assert torch.equal(ad.embedding(torch.tensor([2, 0]), table), torch.tensor([[4.0, 5.0], [0.0, 1.0]]))
    with pytest.raises(IndexError):
        ad.embedding(torch.tensor([3]), table)


def test_norm_cosine_distance_mean():
    a = torch.tensor([[3.0, 4.0]])
    b = torch.tensor([[4.0, -3.0]])
    assert float(ad.l2_norm(a)) == 5.0
    assert float(ad.cosine_similarity(a, b)) == 0.0
    assert float(ad.cosine_similarity(a, -a)) == pytest.approx(-1.0, abs=1e-15)
    assert float(ad.sq_euclidean(a, b)) == 50.0
    assert float(ad.mean(torch.tensor([1.0, 2.0, 6.0]))) == 3.0


def test_zero_vector_rejected_by_normalisers():
    z = torch.zeros(1, 3)
    with pytest.raises(ZeroDivisionError):
        ad.l2_normalize(z)
    with pytest.raises(ZeroDivisionError):
        ad.cosine_similarity(z, torch.ones(1, 3))


def test_pairwise_distance_diagonal_exactly_zero():
    x = torch.randn(6, 5, generator=torch.Generator().manual_seed(0))
    d = ad.pairwise_sq_euclidean(x)
    assert torch.equal(torch.diagonal(d), torch.zeros(6))
    assert torch.allclose(d, torch.cdist(x, x) ** 2, atol=1e-12)


def test_cross_entropy_uniform_and_range():
    assert float(ad.cross_entropy(torch.zeros(2, 4), torch.tensor([0, 3]))) == pytest.approx(math.log(4), abs=1e-15)
    with pytest.raises(IndexError):
        ad.cross_entropy(torch.zeros(1, 4), torch.tensor([4]))


# --- gradients of every op vs. central differences, 20 seeds -----------------

def _ops(g):
    w = torch.randn(4, 3, generator=g)
    b = torch.randn(3, generator=g)
    other = torch.randn(5, 4, generator=g)
    table_ids = torch.tensor([0, 2, 2, 1])
    labels = torch.tensor([0, 2, 1, 1, 0])
    gamma, beta = torch.randn(4, generator=g), torch.randn(4, generator=g)
    return {
        "matmul": lambda x: ad.matmul(x, w).sum(),
        "transpose": lambda x: (ad.transpose(x) * other.T).sum(),
        "add": lambda x: (ad.add(x, other) ** 2).sum(),
        "scale": lambda x: (ad.scale(x, 1.7) ** 2).sum(),
        "concat": lambda x: (ad.concat([x, other], dim=0) ** 3).sum(),
        "slice": lambda x: (ad.slice_(x, 1, 1, 3) ** 2).sum(),
        "linear": lambda x: ad.linear(x, w, b).pow(2).sum(),
        "layer_norm": lambda x: (ad.layer_norm(x, gamma, beta) * other).sum(),
        "gelu": lambda x: ad.gelu(x).sum(),
        "embedding": lambda x: ad.embedding(table_ids, x).pow(2).sum(),
        "softmax": lambda x: (ad.softmax(x) * other).sum(),
        "l2_norm": lambda x: ad.l2_norm(x).sum(),
        "l2_normalize": lambda x: (ad.l2_normalize(x) * other).sum(),
        "cosine": lambda x: ad.cosine_similarity(x, other).sum(),
        "sq_euclidean": lambda x: ad.sq_euclidean(x, other).sum(),
        "pairwise_sq_euclidean": lambda x: (ad.pairwise_sq_euclidean(x) * torch.arange(25.0).reshape(5, 5)).sum(),
        "mean": lambda x: ad.mean(x * x),
        "cross_entropy": lambda x: ad.cross_entropy(x, labels),
    }


OP_NAMES = list(_ops(torch.Generator().manual_seed(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradient_matches_central_differences(name):
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        fn = _ops(g)[name]
        x = torch.randn(5, 4, generator=g)
        assert _grad_ok(fn, x), f"{name} seed {seed}"


# --- finite_diff_check -------------------------------------------------------

def test_fd_check_linear_loss_is_exact():
    w = torch.randn(6, generator=torch.Generator().manual_seed(3), requires_grad=True)
    x = torch.linspace(-1, 2, 6)
    # central differences carry no truncation error on a linear function, so a
    # wide step only shrinks round-off (which scales like ulp / eps)
    res = ad.finite_diff_check(lambda: (w * x).sum(), [w], eps=1e-2)
    assert res.max_rel_error <= 1e-10
    assert res.checked == 6


def test_fd_check_flags_doubled_gradient():
    w = torch.tensor([1.0, -2.0, 0.7], requires_grad=True)
    loss = lambda: (w * w).sum()  # noqa: E731  grads 2w, all |g| >= 1
    res = ad.finite_diff_check(loss, [w], grads=[4 * w.detach()])
    assert res.max_rel_error == pytest.approx(0.5, abs=1e-6)
    assert not res.ok(1e-4)


def test_fd_check_detects_nondeterminism():
    w = torch.ones(2, requires_grad=True)
    calls = iter(range(100))
    with pytest.raises(ad.NonDeterministicError):
        ad.finite_diff_check(lambda: (w * next(calls)).sum(), [w])


def test_fd_check_rejects_bad_eps():
    w = torch.ones(1, requires_grad=True)
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda: w.sum(), [w], eps=0.0)


def test_fd_check_coordinate_subset():
    w = torch.randn(10, requires_grad=True)
    res = ad.finite_diff_check(lambda: (w ** 3).sum(), [w], coords=[[0, 4, 9]])
    assert res.checked == 3 and res.ok()


def test_forward_is_bit_identical_single_threaded():
    g = torch.Generator().manual_seed(5)
    x, w = torch.randn(7, 4, generator=g), torch.randn(4, 4, generator=g)
    run = lambda: ad.layer_norm(ad.gelu(ad.linear(x, w)), torch.ones(4), torch.zeros(4))  # noqa: E731
    assert torch.equal(run(), run())
