import numpy as np
import pytest

from unetlab.autograd import (
    FeedError, Graph, GraphError, finite_diff_check, register_op, relative_error, sigmoid,
)
from unetlab.layers import add_conv, add_conv_block, add_head
from unetlab.tensor import Rng, ShapeError


def linear_graph():
    g = Graph()
    g.placeholder("x", (2,))
    g.parameter("w", [0.5, -1.0])
    g.add("wx", "mul", ["w", "x"])
    g.add("loss", "sum", ["wx"])
    return g


class TestForward:
    def test_add(self):
        g = Graph()
        g.placeholder("a")
        g.placeholder("b")
        g.add("c", "add", ["a", "b"])
        out = g.forward({"a": [1.0], "b": [2.0]}, targets=["c"])
        np.testing.assert_array_equal(out["c"], [3.0])

    def test_repeat_is_bitwise_equal(self):
        g = linear_graph()
        feeds = {"x": np.array([0.1, 0.7])}
        a = g.forward(feeds, targets=["loss"])["loss"].copy()
        b = g.forward(feeds, targets=["loss"])["loss"]
        assert a.tobytes() == b.tobytes()

    def test_diamond(self):
        g = Graph()
        g.placeholder("a")
        g.add("b", "scale", ["a"], k=2.0)
        g.add("c", "scale", ["a"], k=3.0)
        g.add("d", "add", ["b", "c"])
        np.testing.assert_array_equal(g.forward({"a": [1.0]}, targets=["d"])["d"], [5.0])

    def test_only_needed_nodes_run(self):
        g = Graph()
        g.placeholder("a")
        g.placeholder("unused")
        g.add("b", "scale", ["a"], k=2.0)
        g.add("c", "scale", ["unused"], k=2.0)
        g.forward({"a": [1.0]}, targets=["b"])
        assert "c" not in g.values

    def test_missing_feed(self):
        g = linear_graph()
        with pytest.raises(FeedError):
            g.forward({}, targets=["loss"])

    def test_feed_shape_checked(self):
        g = linear_graph()
        with pytest.raises(ShapeError):
            g.forward({"x": np.ones(3)}, targets=["loss"])

    def test_shape_error_names_node(self):
        g = Graph()
        g.placeholder("a")
        g.placeholder("b")
        g.add("bad", "add", ["a", "b"])
        with pytest.raises(ShapeError, match="bad"):
            g.forward({"a": np.ones(2), "b": np.ones(3)}, targets=["bad"])


class TestConstruction:
    def test_duplicate_name(self):
        g = Graph()
        g.placeholder("a")
        with pytest.raises(GraphError):
            g.placeholder("a")

    def test_unknown_input(self):
        g = Graph()
        with pytest.raises(GraphError):
            g.add("b", "relu", ["a"])

    def test_unknown_op(self):
        g = Graph()
        g.placeholder("a")
        with pytest.raises(GraphError):
            g.add("b", "no_such_op", ["a"])

    def test_order_is_topological(self):
        g = Graph()
        g.placeholder("a")
        g.add("b", "relu", ["a"])
        g.add("c", "add", ["a", "b"])
        seen = set()
        for name, node in g.nodes.items():
            assert all(i in seen for i in node.inputs)
            seen.add(name)

    def test_subgraph_requires_closed_set(self):
        g = linear_graph()
        with pytest.raises(GraphError):
            g.subgraph({"wx", "loss"})


class TestBackward:
    def test_linear(self):
        g = linear_graph()
        g.forward({"x": np.array([2.0, 3.0])}, targets=["loss"])
        np.testing.assert_array_equal(g.backward("loss")["w"], [2.0, 3.0])

    def test_two_paths_accumulate(self):
        def build(paths):
            g = Graph()
            g.placeholder("x", (3,))
            g.parameter("w", [0.3, -0.2, 0.9])
            branches = []
            for k in range(paths):
                g.add(f"p{k}", "mul", ["w", "x"])
                g.add(f"s{k}", "sigmoid", [f"p{k}"])
                branches.append(f"s{k}")
            g.add("total", "add_n", branches)
            g.add("loss", "sum", ["total"])
            return g
        feeds = {"x": np.array([1.0, 2.0, -1.0])}
        one, two = build(1), build(2)
        one.forward(feeds, targets=["loss"])
        two.forward(feeds, targets=["loss"])
        np.testing.assert_allclose(two.backward("loss")["w"], 2 * one.backward("loss")["w"], rtol=0, atol=1e-15)

    def test_sigmoid_closed_form(self):
        g = Graph()
        g.placeholder("z", (4,))
        g.add("s", "sigmoid", ["z"])
        g.add("loss", "sum", ["s"])
        z = np.array([-3.0, -0.5, 0.0, 2.0])
        g.forward({"z": z}, targets=["loss"])
        s = 1 / (1 + np.exp(-z))
        np.testing.assert_allclose(g.backward("loss", wrt=["z"])["z"], s * (1 - s), rtol=1e-14)

    def test_unreached_param_gets_zeros(self):
        g = linear_graph()
        g.parameter("orphan", [1.0, 2.0])
        g.forward({"x": np.ones(2)}, targets=["loss"])
        np.testing.assert_array_equal(g.backward("loss")["orphan"], [0.0, 0.0])

    def test_non_scalar_loss(self):
        g = linear_graph()
        g.forward({"x": np.ones(2)}, targets=["wx"])
        with pytest.raises(GraphError):
            g.backward("wx")

    def test_backward_before_forward(self):
        with pytest.raises(GraphError):
            linear_graph().backward("loss")

    def test_relu_gradient_at_zero_is_zero(self):
        g = Graph()
        g.placeholder("x", (3,))
        g.add("r", "relu", ["x"])
        g.add("loss", "sum", ["r"])
        g.forward({"x": np.array([-1.0, 0.0, 2.0])}, targets=["loss"])
        np.testing.assert_array_equal(g.backward("loss", wrt=["x"])["x"], [0.0, 0.0, 1.0])

    def test_concat_splits_gradient(self):
        g = Graph()
        g.placeholder("a", (1, 1, 2, 2))
        g.placeholder("b", (1, 2, 2, 2))
        g.placeholder("w", (1, 3, 2, 2))
        g.add("c", "concat", ["a", "b"])
        g.add("cw", "mul", ["c", "w"])
        g.add("loss", "sum", ["cw"])
        w = np.arange(12.0).reshape(1, 3, 2, 2)
        g.forward({"a": np.ones((1, 1, 2, 2)), "b": np.ones((1, 2, 2, 2)), "w": w}, targets=["loss"])
        grads = g.backward("loss", wrt=["a", "b"])
        np.testing.assert_array_equal(grads["a"], w[:, :1])
        np.testing.assert_array_equal(grads["b"], w[:, 1:])

    def test_custom_op_registration(self):
        register_op("cube_test", lambda a: a ** 3, lambda g, x, y: (3 * g * x[0] ** 2,))
        g = Graph()
        g.placeholder("x", (2,))
        g.add("y", "cube_test", ["x"])
        g.add("loss", "sum", ["y"])
        g.forward({"x": np.array([1.0, 2.0])}, targets=["loss"])
        np.testing.assert_array_equal(g.backward("loss", wrt=["x"])["x"], [3.0, 12.0])


class TestFiniteDiff:
    def test_constant_loss(self):
        g = Graph()
        g.parameter("w", [1.0, 2.0])
        g.add("s", "sum", ["w"])
        g.add("loss", "scale", ["s"], k=0.0)
        rep = finite_diff_check(g, "loss", {}, Rng(0), 1e-4)
        assert rep.max_rel_error == 0.0
        assert rep.passed

    def test_sigmoid_neuron(self):
        g = Graph()
        g.placeholder("x", (3,))
        g.parameter("w", [0.4, -0.7, 0.2])
        g.add("wx", "mul", ["w", "x"])
        g.add("z", "sum", ["wx"])
        g.add("loss", "sigmoid", ["z"])
        rep = finite_diff_check(g, "loss", {"x": np.array([1.0, 0.5, -2.0])}, Rng(0), 1e-6, wrt=["x"])
        assert rep.passed, str(rep)
        assert rep.checked == 6

    def test_two_layer_conv_net(self):
        rng = Rng(11)
        g = Graph()
        g.placeholder("x", (2, 2, 6, 6))
        h = add_conv_block(g, "block", "x", 2, 3, rng.spawn("block"), convs=1)
        out = add_head(g, "head", h, 3, 1, rng.spawn("head"))
        g.placeholder("r", (2, 1, 6, 6))
        g.add("weighted", "mul", [out, "r"])
        g.add("loss", "sum", ["weighted"])
        feeds = {"x": rng.spawn("x").normal((2, 2, 6, 6)), "r": rng.spawn("r").normal((2, 1, 6, 6))}
        rep = finite_diff_check(g, "loss", feeds, rng.spawn("coords"), 1e-4)
        assert rep.passed, str(rep)

    def test_detects_wrong_gradient(self):
        register_op("bad_square_test", lambda a: a * a, lambda g, x, y: (g * x[0],))
        g = Graph()
        g.parameter("w", [0.5, 1.5])
        g.add("sq", "bad_square_test", ["w"])
        g.add("loss", "sum", ["sq"])
        rep = finite_diff_check(g, "loss", {}, Rng(0), 1e-4)
        assert not rep.passed
        assert len(rep.failures) == 2

    def test_tolerance_must_be_positive(self):
        g = linear_graph()
        with pytest.raises(ValueError):
            finite_diff_check(g, "loss", {"x": np.ones(2)}, Rng(0), 0.0)

    def test_kink_uses_one_sided_difference(self):
        g = Graph()
        g.parameter("w", [1e-6, 1.0])
        g.add("r", "relu", ["w"])
        g.add("loss", "sum", ["r"])
        rep = finite_diff_check(g, "loss", {}, Rng(0), 1e-4)
        assert rep.passed, str(rep)
        assert rep.one_sided == 1

    def test_params_restored(self):
        g = linear_graph()
        before = g.params["w"].copy()
        finite_diff_check(g, "loss", {"x": np.array([1.0, 2.0])}, Rng(0), 1e-4)
        np.testing.assert_array_equal(g.params["w"], before)


class TestRelativeError:
    def test_absolute_below_floor(self):
        assert relative_error(1e-12, 2e-12) == pytest.approx(1e-12)

    def test_relative(self):
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_sigmoid_is_stable():
    out = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(sigmoid(np.array([1.0])), [0.7310585786300049], rtol=1e-15)
