import math

import numpy as np
import pytest

from ibn import autodiff as ad
from ibn.autodiff import Tape, Var

from conftest import central_diff, rel_err, tape_grad


def test_square_derivative():
    x = Var(3.0, requires_grad=True)
    with Tape() as tape:
        y = x * x
    assert tape.backward(y, [x])[x.id] == pytest.approx(6.0)
    assert x.grad == pytest.approx(6.0)


def test_sum_of_product_matches_finite_differences(rng):
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (3, 4))
    (g,) = tape_grad(lambda v: ad.sum(v * b), a)
    fd = central_diff(lambda x: float(np.sum(x * b)), a)
    assert rel_err(g, fd) < 1e-6


def test_gelu_gradient_at_zero():
    (g,) = tape_grad(lambda v: ad.sum(ad.gelu(v)), np.array([0.0]))
    assert g[0] == pytest.approx(0.5, abs=1e-15)


def test_zero_fixed_points():
    assert ad.gelu(Var([0.0])).value[0] == 0.0
    assert ad.elu(Var([0.0])).value[0] == 0.0


def test_softmax_two_logits():
    out = ad.softmax(Var([2.0, 1.0])).value
    e = math.exp(1.0)
    np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_layer_norm_of_zeros_is_zero():
    np.testing.assert_array_equal(ad.layer_norm(Var(np.zeros(5))).value, np.zeros(5))


def test_non_scalar_root_rejected():
    x = Var(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError, match="backward requires scalar root"):
        tape.backward(y, [x])


def test_unreachable_leaf_gets_zero_gradient():
    x = Var(np.ones(3), requires_grad=True)
    z = Var(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.sum(x)
    g = tape.backward(y, [x, z])
    np.testing.assert_array_equal(g[z.id], np.zeros((2, 2)))


def test_reuse_accumulates():
    x = Var(np.array([1.5, -0.5]), requires_grad=True)
    with Tape() as tape:
        y1 = ad.sum(x)
        y2 = ad.sum(x + x)
    np.testing.assert_array_equal(tape.backward(y1, [x])[x.id], [1.0, 1.0])
    np.testing.assert_array_equal(tape.backward(y2, [x])[x.id], [2.0, 2.0])


def test_backward_only_touches_requested_leaves():
    x = Var(np.ones(2), requires_grad=True)
    w = Var(np.full(2, 3.0), requires_grad=True)
    w.grad = np.array([7.0, 7.0])
    with Tape() as tape:
        y = ad.sum(x * w)
    tape.backward(y, [x])
    np.testing.assert_array_equal(w.grad, [7.0, 7.0])
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_recording_outside_tape():
    x = Var(np.ones(2), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad
    with Tape() as tape:
        y = x * 2.0
    assert len(tape) == 1 and y.requires_grad


def test_dropout_identity_for_p_zero(rng):
    x = rng.uniform(-2, 2, (3, 4))
    np.testing.assert_array_equal(ad.dropout(Var(x), np.ones_like(x), 0.0).value, x)


def test_dropout_scales_survivors():
    out = ad.dropout(Var(np.full(4, 2.0)), np.array([1, 0, 1, 0]), 0.5).value
    np.testing.assert_array_equal(out, [4.0, 0.0, 4.0, 0.0])


@pytest.mark.parametrize("op", [ad.add, ad.mul, ad.sub])
def test_shape_mismatch_names_both_shapes(op):
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        op(Var(np.ones((2, 3))), Var(np.ones(4)))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\) and \(2, 3\)"):
        ad.matmul(Var(np.ones((2, 3))), Var(np.ones((2, 3))))


# Every primitive against central differences: random inputs in [-2, 2],
# h = 1e-6, relative error < 1e-5.
B = np.random.default_rng(7).uniform(-2, 2, (3, 4))
W34 = np.random.default_rng(8).uniform(-2, 2, (3, 4))
W3x4x4 = np.random.default_rng(9).uniform(-2, 2, (3, 4, 4))
MASK = (np.random.default_rng(10).random((5, 3, 4)) > 0.3).astype(float)

UNARY = {
    "neg": (ad.neg, (3, 4)),
    "square": (ad.square, (3, 4)),
    "exp": (ad.exp, (3, 4)),
    "gelu": (ad.gelu, (3, 4)),
    "elu": (ad.elu, (3, 4)),
    "relu": (ad.relu, (3, 4)),
    "abs": (ad.absolute, (3, 4)),
    "softmax": (ad.softmax, (3, 4)),
    "layer_norm": (ad.layer_norm, (3, 4)),
    "transpose": (ad.transpose, (4, 3)),
    "reshape": (lambda v: ad.reshape(v, (3, 4)), (2, 6)),
    "slice": (lambda v: v[1:, ::2], (4, 8)),
    "fancy_index": (lambda v: v[[0, 2, 2]], (3, 4)),
    "sum_axis": (lambda v: ad.reshape(ad.sum(v, axis=0), (1, 4)) * np.ones((3, 1)), (5, 4)),
    "mean_axis": (lambda v: ad.reshape(ad.mean(v, axis=1), (3, 1)) * np.ones((1, 4)), (3, 7)),
    "dropout": (lambda v: ad.mean(ad.dropout(v, MASK, 0.3), axis=0), (3, 4)),
    "pairwise_sqdist": (lambda v: ad.pairwise_sqdist(v)[:3], (4, 5)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name, rng):
    op, shape = UNARY[name]
    x = rng.uniform(-2, 2, shape)

    def f(v):
        return ad.sum(ad.mul(op(v), W34))

    (g,) = tape_grad(f, x)
    fd = central_diff(lambda a: float(f(Var(a)).value), x)
    assert rel_err(g, fd) < 1e-5


def test_sqrt_gradient(rng):
    x = rng.uniform(0.2, 2, (3, 4))
    (g,) = tape_grad(lambda v: ad.sum(ad.mul(ad.sqrt(v), W34)), x)
    fd = central_diff(lambda a: float(np.sum(np.sqrt(a) * W34)), x)
    assert rel_err(g, fd) < 1e-5


def test_sqrt_zero_subgradient():
    (g,) = tape_grad(lambda v: ad.sum(ad.sqrt(v)), np.array([0.0, 4.0]))
    np.testing.assert_array_equal(g, [0.0, 0.25])


BINARY = {
    "add_broadcast": (ad.add, (3, 4), (4,)),
    "sub_broadcast": (ad.sub, (3, 4), (3, 1)),
    "mul": (ad.mul, (3, 4), (3, 4)),
    "div": (ad.div, (3, 4), (3, 4)),
    "matmul": (ad.matmul, (3, 5), (5, 4)),
    "matmul_batched_right_shared": (lambda a, b: ad.matmul(a, b)[0], (2, 3, 5), (5, 4)),
    "matmul_batched_left_shared": (lambda a, b: ad.matmul(a, b)[1], (3, 5), (2, 5, 4)),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), (3, 1), (3, 3)),
    "where": (lambda a, b: ad.where(np.array([[True], [False], [True]]), a, b), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name, rng):
    op, sa, sb = BINARY[name]
    a = rng.uniform(-2, 2, sa)
    b = rng.uniform(-2, 2, sb)
    if name == "div":
        b = np.sign(b) * (np.abs(b) + 0.5)

    def f(u, v):
        return ad.sum(ad.mul(op(u, v), W34))

    ga, gb = tape_grad(f, a, b)
    assert rel_err(ga, central_diff(lambda x: float(f(Var(x), Var(b)).value), a)) < 1e-5
    assert rel_err(gb, central_diff(lambda x: float(f(Var(a), Var(x)).value), b)) < 1e-5


def test_pairwise_sqdist_exact_symmetry(rng):
    x = rng.normal(size=(2, 5, 3))
    d = ad.pairwise_sqdist(Var(x)).value
    np.testing.assert_array_equal(d, np.swapaxes(d, -1, -2))
    np.testing.assert_array_equal(np.diagonal(d, axis1=-2, axis2=-1), 0.0)


@pytest.mark.filterwarnings("ignore:invalid value")
def test_first_nonfinite_names_activation():
    x = Var(np.array([-1.0, 4.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.sqrt(x)
        ad.sum(y)
    assert "sqrt" in tape.first_nonfinite()
