import numpy as np
import pytest

from unetlab import arch
from unetlab.arch import ArchSpec, SpecError, build, head_name, node_name, param_count, prune
from unetlab.autograd import GraphError
from unetlab.tensor import Rng

SMALL = (2, 4, 8, 16, 32)


def small(variant="unet_pp", depth=4, ds=True, size=16):
    return ArchSpec(variant, depth, SMALL[:depth + 1], 1, ds, (1, size, size))


def count_params(variant, widths, ds, classes=1, in_ch=1, convs=2):
    """Closed-form parameter accounting, independent of the graph builder."""
    d = len(widths) - 1

    def block(cin, cout):
        return 9 * cin * cout + cout + (convs - 1) * (9 * cout * cout + cout)

    total = 0
    for i in range(d + 1):
        total += block(in_ch if i == 0 else widths[i - 1], widths[i])
    for j in range(1, d + 1):
        for i in range(d - j + 1):
            if variant == "unet" and i + j != d:
                continue
            skips = j if variant == "unet_pp" else 1
            total += 4 * widths[i + 1] * widths[i] + widths[i]
            total += block(widths[i] * (skips + 1), widths[i])
    heads = d if ds and variant != "unet" else 1
    return total + heads * (widths[0] * classes + classes)


class TestSpec:
    def test_unet_e_requires_ds(self):
        with pytest.raises(SpecError) as exc:
            ArchSpec("unet_e", 2, SMALL[:3], 1, False, (1, 8, 8)).validate()
        assert exc.value.field == "deep_supervision"

    @pytest.mark.parametrize("kwargs,field", [
        ({"variant": "segnet"}, "variant"),
        ({"depth": 0, "widths": (4,)}, "depth"),
        ({"widths": (4, 8)}, "widths"),
        ({"input": (1, 18, 18)}, "input"),
        ({"classes": 0}, "classes"),
    ])
    def test_invalid(self, kwargs, field):
        base = dict(variant="unet_pp", depth=2, widths=(4, 8, 16), classes=1, deep_supervision=True, input=(1, 8, 8))
        base.update(kwargs)
        with pytest.raises(SpecError) as exc:
            ArchSpec(**base).validate()
        assert exc.value.field == field

    def test_text_roundtrip(self):
        spec = ArchSpec("unet_plus", 3, (3, 6, 12, 24), 2, False, (3, 32, 48))
        assert ArchSpec.from_text(spec.to_text()) == spec


class TestTopology:
    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    @pytest.mark.parametrize("variant", ["unet_pp", "unet_plus", "unet_e"])
    def test_triangular_count(self, variant, d):
        g = build(small(variant, d), Rng(0))
        assert len(arch.arch_nodes(g)) == (d + 1) * (d + 2) // 2

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_unet_count(self, d):
        g = build(small("unet", d, ds=False), Rng(0))
        assert len(arch.arch_nodes(g)) == 2 * d + 1

    def test_unet_pp_arity(self):
        g = build(small(), Rng(0))
        for name, inputs in g.meta["arch_inputs"].items():
            i, j = arch.parse_node_name(name)
            if j > 0:
                assert len(inputs) == j + 1, name
        assert len(g.meta["arch_inputs"][node_name(0, 4)]) == 5

    def test_edge_count(self):
        g = build(small(), Rng(0))
        assert sum(len(v) for v in g.meta["arch_inputs"].values()) == 34

    def test_input_order(self):
        g = build(small(), Rng(0))
        assert g.meta["arch_inputs"][node_name(1, 2)] == ["X^{1,0}", "X^{1,1}", "X^{2,1}"]
        g = build(small("unet_plus"), Rng(0))
        assert g.meta["arch_inputs"][node_name(0, 3)] == ["X^{0,2}", "X^{1,2}"]
        g = build(small("unet_e"), Rng(0))
        assert g.meta["arch_inputs"][node_name(0, 3)] == ["X^{0,0}", "X^{1,2}"]

    def test_heads(self):
        assert arch.heads(build(small(), Rng(0))) == [head_name(j) for j in range(1, 5)]
        assert arch.heads(build(small(ds=False), Rng(0))) == [head_name(4)]
        assert arch.heads(build(small("unet", ds=False), Rng(0))) == [head_name(4)]

    def test_dot_counts(self):
        dot = arch.to_dot(build(small(depth=2, size=8), Rng(0)))
        assert sum(1 for line in dot.splitlines() if line.strip().endswith('";') and "->" not in line) == 6
        assert dot.count("->") == 9

    def test_output_shapes(self):
        g = build(small(size=32), Rng(0))
        out = g.forward({arch.IMAGE: np.zeros((2, 1, 32, 32))}, targets=arch.heads(g))
        for h in arch.heads(g):
            assert out[h].shape == (2, 1, 32, 32)


class TestPrune:
    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_l1_node_set(self, d):
        p = prune(build(small(depth=d), Rng(0)), 1)
        assert set(arch.arch_nodes(p)) == {"X^{0,0}", "X^{1,0}", "X^{0,1}"}
        assert arch.heads(p) == [head_name(1)]

    def test_full_depth_unchanged(self):
        g = build(small(), Rng(0))
        p = prune(g, 4)
        assert set(p.nodes) == set(g.nodes) - {head_name(j) for j in (1, 2, 3)} - {
            n for n in g.nodes if n.startswith(("head@X^{0,1}/", "head@X^{0,2}/", "head@X^{0,3}/"))}
        assert arch.arch_nodes(p) == arch.arch_nodes(g)

    def test_pruned_node_set_is_triangle(self):
        p = prune(build(small(), Rng(0)), 2)
        expected = {node_name(i, j) for i in range(3) for j in range(3) if i + j <= 2}
        assert set(arch.arch_nodes(p)) == expected
        assert p.meta["spec"].depth == 2

    @pytest.mark.parametrize("variant", ["unet_pp", "unet_plus", "unet_e"])
    def test_bitwise_equal(self, variant):
        g = build(small(variant), Rng(3))
        x = Rng(4).normal((3, 1, 16, 16))
        full = g.forward({arch.IMAGE: x}, targets=arch.heads(g))
        for k in range(1, 5):
            p = prune(g, k)
            out = p.forward({arch.IMAGE: x}, targets=[head_name(k)])[head_name(k)]
            assert out.tobytes() == full[head_name(k)].tobytes()

    def test_param_values_copied(self):
        g = build(small(), Rng(3))
        p = prune(g, 2)
        for name, v in p.params.items():
            np.testing.assert_array_equal(v, g.params[name])
            assert v is not g.params[name]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            prune(build(small(), Rng(0)), 5)

    def test_no_ds(self):
        with pytest.raises(GraphError):
            prune(build(small(ds=False), Rng(0)), 2)


class TestParams:
    @pytest.mark.parametrize("variant,ds", [("unet", False), ("unet_e", True), ("unet_plus", False),
                                            ("unet_plus", True), ("unet_pp", False), ("unet_pp", True)])
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_against_closed_form(self, variant, ds, d):
        g = build(small(variant, d, ds), Rng(0))
        assert param_count(g) == count_params(variant, SMALL[:d + 1], ds)

    def test_summary_total(self):
        g = build(small(), Rng(0))
        s = arch.summary(g)
        assert s.total_params == param_count(g)
        assert sum(r.params for r in s.rows) == param_count(g)

    def test_summary_rows_unet_d1(self):
        s = arch.summary(build(small("unet", 1, False, 8), Rng(0)))
        assert len(s.rows) == 4
        assert s.rows[-1].node == head_name(1)

    def test_summary_csv_header(self):
        text = arch.summary(build(small(depth=1, size=8), Rng(0))).csv()
        assert text.splitlines()[0] == "node,op,inputs,out_shape,params"


class TestBuild:
    def test_deterministic(self):
        a = build(small(), Rng(5))
        b = build(small(), Rng(5))
        for name in a.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()

    def test_biases_zero(self):
        g = build(small(), Rng(5))
        for name, v in g.params.items():
            if name.endswith("/bias"):
                np.testing.assert_array_equal(v, 0.0)

    def test_shared_nodes_share_init_across_variants(self):
        # per-node streams: the encoder is initialised identically in every variant
        a = build(small("unet_pp"), Rng(5))
        b = build(small("unet_plus"), Rng(5))
        for name in a.params:
            if name.startswith("X^{2,0}/"):
                np.testing.assert_array_equal(a.params[name], b.params[name])
