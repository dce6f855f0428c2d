import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unetlab.tensor import (
    AxisError, FormatError, Rng, ShapeError, concat_channels, create, elementwise, pad_crop,
    read_tensor, reduce, tensor_from_bytes, tensor_to_bytes, write_tensor,
)


class TestCreate:
    def test_constant_zero(self):
        a = create([2, 3])
        assert a.shape == (2, 3)
        np.testing.assert_array_equal(a, np.zeros((2, 3)))

    def test_constant_fill(self):
        np.testing.assert_array_equal(create([1], 7.5), [7.5])

    def test_seeded_normal_is_reproducible(self):
        a = create([4], rng=Rng(42))
        b = create([4], rng=Rng(42))
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("shape", [[0], [3, 0], [-1, 2]])
    def test_bad_extent(self, shape):
        with pytest.raises(ShapeError):
            create(shape)

    def test_dtype_is_float64(self):
        assert create([2]).dtype == np.float64


class TestRng:
    def test_streams_are_independent(self):
        root = Rng(3)
        a = root.spawn("a").normal((5,))
        b = root.spawn("b").normal((5,))
        assert not np.array_equal(a, b)

    def test_spawn_does_not_depend_on_draw_history(self):
        root = Rng(3)
        root.normal((100,))
        x = root.spawn("child", 2).uniform(size=4)
        y = Rng(3).spawn("child", 2).uniform(size=4)
        np.testing.assert_array_equal(x, y)

    def test_nested_paths_differ_from_flat(self):
        a = Rng(1).spawn("x").spawn("y").uniform(size=3)
        b = Rng(1).spawn("xy").uniform(size=3)
        assert not np.array_equal(a, b)

    def test_permutation(self):
        p = Rng(5).permutation(10)
        assert sorted(p.tolist()) == list(range(10))


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(elementwise("add", [1.0, 2.0], [3.0, 4.0]), [4.0, 6.0])

    def test_mul_identity(self):
        x = Rng(0).normal((3, 4))
        np.testing.assert_array_equal(elementwise("mul", x, 1.0), x)

    def test_max_against_loop(self):
        a, b = [-1.0, 5.0], [2.0, 2.0]
        expected = [max(p, q) for p, q in zip(a, b)]
        np.testing.assert_array_equal(elementwise("max", a, b), expected)

    def test_unary_callable(self):
        np.testing.assert_allclose(elementwise(np.exp, [0.0, 1.0]), [1.0, np.e])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("add", np.ones(3), np.ones(4))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("pow", [1.0], [2.0])


class TestReduce:
    def test_sum_all(self):
        np.testing.assert_array_equal(reduce("sum", [[1.0, 2.0], [3.0, 4.0]]), 10.0)

    def test_mean_all(self):
        np.testing.assert_array_equal(reduce("mean", [2.0, 4.0]), 3.0)

    def test_sum_axis(self):
        np.testing.assert_array_equal(reduce("sum", np.ones((3, 5)), axes={1}), [5.0, 5.0, 5.0])

    def test_axis_out_of_range(self):
        with pytest.raises(AxisError):
            reduce("sum", np.ones((2, 2)), axes={2})


class TestPadCrop:
    def test_pad_1d(self):
        np.testing.assert_array_equal(pad_crop(np.array([1.0]), [(1, 1)]), [0.0, 1.0, 0.0])

    def test_crop_inverts_pad(self):
        np.testing.assert_array_equal(pad_crop(np.array([0.0, 1.0, 0.0]), [(1, 1)], mode="crop"), [1.0])

    def test_pad_2d_border(self):
        out = pad_crop(np.ones((2, 2)), [(1, 1), (1, 1)])
        expected = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                if 1 <= i <= 2 and 1 <= j <= 2:
                    expected[i, j] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_over_crop(self):
        with pytest.raises(ShapeError):
            pad_crop(np.ones(3), [(2, 1)], mode="crop")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.data())
    def test_crop_of_pad_is_identity(self, shape, data):
        a = Rng(1).normal(tuple(shape))
        spec = [(data.draw(st.integers(0, 3)), data.draw(st.integers(0, 3))) for _ in shape]
        np.testing.assert_array_equal(pad_crop(pad_crop(a, spec), spec, mode="crop"), a)


class TestConcat:
    def test_arity(self):
        out = concat_channels([np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4))])
        assert out.shape == (1, 5, 4, 4)

    def test_single_is_identity(self):
        x = Rng(2).normal((1, 2, 3, 3))
        np.testing.assert_array_equal(concat_channels([x]), x)

    def test_channel_offset(self):
        a = Rng(0).normal((1, 2, 4, 4))
        b = Rng(1).normal((1, 3, 4, 4))
        out = concat_channels([a, b])
        np.testing.assert_array_equal(out[:, 2], b[:, 0])

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 5))])


class TestSerialization:
    def test_roundtrip(self):
        a = Rng(9).normal((2, 3, 4))
        buf = io.BytesIO()
        write_tensor(buf, a)
        buf.seek(0)
        b = read_tensor(buf)
        assert b.shape == a.shape
        assert b.tobytes() == a.tobytes()

    def test_layout(self):
        data = tensor_to_bytes(np.array([[1.0, 2.0]]))
        assert data[:4] == b"NNT1"
        assert int.from_bytes(data[4:8], "little") == 2
        assert len(data) == 4 + 4 + 2 * 8 + 2 * 8

    def test_bad_magic(self):
        data = bytearray(tensor_to_bytes(np.ones(2)))
        data[:4] = b"XXXX"
        with pytest.raises(FormatError):
            tensor_from_bytes(bytes(data))

    def test_truncated(self):
        data = tensor_to_bytes(np.ones(4))
        with pytest.raises(FormatError):
            tensor_from_bytes(data[:-3])

    def test_special_values_survive(self):
        a = np.array([0.0, -0.0, 1e-310, 1e308])
        b = tensor_from_bytes(tensor_to_bytes(a))
        assert a.tobytes() == b.tobytes()
