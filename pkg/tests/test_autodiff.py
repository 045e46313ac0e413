import numpy as np
import pytest

from metaboot import autodiff as ad
from metaboot.base import ShapeError
from metaboot.gradcheck import numeric_grad


def test_first_order_gradient(graph, rng):
    v = rng.standard_normal((3, 4))
    x = graph.leaf("x", v)
    (g,) = ad.grad(ad.sum(x * x), [x])
    assert np.allclose(g.value, 2.0 * v)
    assert not g.requires_grad


def test_second_order_through_create_graph(graph, rng):
    v = rng.standard_normal(5)
    x = graph.leaf("x", v)
    (g,) = ad.grad(ad.sum(x * x * x), [x], create_graph=True)
    assert g.requires_grad
    (h,) = ad.grad(ad.sum(g), [x])
    assert np.allclose(h.value, 6.0 * v)


def test_shape_error_names_op_and_shapes(graph):
    a = graph.leaf("a", np.ones((3, 4)))
    b = graph.leaf("b", np.ones((4, 3)))
    with pytest.raises(ShapeError) as exc:
        a + b
    assert exc.value.op == "add"
    assert exc.value.shapes == ((3, 4), (4, 3))
    assert "(3, 4)" in str(exc.value) and "(4, 3)" in str(exc.value)


def test_matmul_is_two_dimensional_only(graph):
    v = graph.leaf("v", np.ones(3))
    m = graph.leaf("m", np.ones((3, 4)))
    with pytest.raises(ShapeError):
        ad.matmul(v, m)


def test_general_broadcasting_is_rejected(graph):
    a = graph.leaf("a", np.ones((2, 3, 4)))
    b = graph.leaf("b", np.ones((3, 1)))
    with pytest.raises(ShapeError):
        ad.mul(a, b)


def test_trailing_suffix_broadcast_reduces_gradient(graph):
    a = graph.leaf("a", np.ones((16, 4)))
    b = graph.leaf("b", np.zeros(4))
    (gb,) = ad.grad(ad.sum(a + b), [b])
    assert gb.shape == (4,)
    assert np.allclose(gb.value, 16.0)


def test_size_one_last_axis_broadcast(graph):
    a = graph.leaf("a", np.ones((5, 1)))
    b = graph.leaf("b", np.ones((5, 4)))
    (ga,) = ad.grad(ad.sum(a * b), [a])
    assert ga.shape == (5, 1)
    assert np.allclose(ga.value, 4.0)


def test_stop_gradient_blocks_flow(graph, rng):
    v = rng.standard_normal(4)
    x = graph.leaf("x", v)
    (g,) = ad.grad(ad.sum(ad.stop_gradient(x) * x), [x])
    assert np.allclose(g.value, v)


def test_grad_requires_scalar_output(graph):
    x = graph.leaf("x", np.ones(3))
    with pytest.raises(ValueError):
        ad.grad(x * 2.0, [x])


def test_grad_wrt_constant_is_rejected(graph):
    x = graph.leaf("x", np.ones(3))
    c = graph.constant(np.ones(3))
    with pytest.raises(ValueError):
        ad.grad(ad.sum(x * c), [c])


def test_unreachable_leaf_gets_zero_gradient(graph):
    x = graph.leaf("x", np.ones(3))
    y = graph.leaf("y", np.ones((2, 2)))
    gx, gy = ad.grad(ad.sum(x), [x, y])
    assert np.allclose(gx.value, 1.0)
    assert gy.shape == (2, 2) and not np.any(gy.value)


def test_max_tie_goes_to_lowest_index(graph):
    x = graph.leaf("x", np.array([2.0, 2.0, 1.0]))
    (g,) = ad.grad(ad.max(x), [x])
    assert g.value.tolist() == [1.0, 0.0, 0.0]


def test_only_basic_indexing(graph):
    x = graph.leaf("x", np.arange(6.0).reshape(2, 3))
    assert x[1, 1:].value.tolist() == [4.0, 5.0]
    with pytest.raises(TypeError):
        x[np.array([0, 1])]


def test_no_grad_block(graph):
    x = graph.leaf("x", np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert (x * 2.0).requires_grad


def test_nodes_are_immutable(graph):
    x = graph.leaf("x", np.ones(2))
    with pytest.raises(ValueError):
        x.value[0] = 5.0
    with pytest.raises(TypeError):
        ad.Node()


def test_graph_is_topologically_ordered_and_replays(graph, rng):
    x = graph.leaf("x", rng.standard_normal((3, 4)))
    w = graph.leaf("w", rng.standard_normal((4, 2)))
    loss = ad.mean(ad.log_softmax(ad.tanh(ad.matmul(x, w))))
    ad.grad(loss, [w], create_graph=True)
    for node in graph.nodes:
        assert all(i < node.id for i in node.input_ids)
    assert graph.replay()


def test_leaf_registry_keeps_latest_name(graph):
    first = graph.leaf("x", np.zeros(2))
    second = graph.leaf("x", np.ones(2))
    assert graph.lookup("x") is second
    assert graph.lookup("x") is not first


def test_mixing_graphs_is_rejected():
    with ad.Graph("a") as ga:
        a = ga.leaf("a", np.ones(2))
    with ad.Graph("b") as gb:
        b = gb.leaf("b", np.ones(2))
        with pytest.raises(ValueError):
            ad.primitive("add", b, a)


@pytest.mark.parametrize("fn", [
    lambda x: ad.sum(ad.softmax(x) * np.arange(12.0).reshape(3, 4)),
    lambda x: ad.sum(ad.log_softmax(x)[:, 0]),
    lambda x: ad.mean(ad.sigmoid(x) * ad.tanh(x)),
    lambda x: ad.sum(ad.concat([x, ad.exp(x)], axis=0)),
    lambda x: ad.sum(ad.square(ad.mean(x, axis=0))),
    lambda x: ad.sum(ad.softplus(ad.reshape(x, (12,)))),
    lambda x: ad.sum(ad.matmul(ad.transpose(x), x)),
], ids=["softmax", "log_softmax", "sigmoid-tanh", "concat-exp", "mean-axis", "softplus-reshape", "transpose"])
def test_gradient_matches_central_differences(fn, rng):
    v = rng.standard_normal((3, 4))
    with ad.Graph("analytic") as g:
        x = g.leaf("x", v)
        (analytic,) = ad.grad(fn(x), [x])

    def value(arr):
        with ad.Graph("numeric") as gn:
            return float(fn(gn.leaf("x", arr)).value)

    assert np.allclose(analytic.value, numeric_grad(value, v), atol=1e-6)
