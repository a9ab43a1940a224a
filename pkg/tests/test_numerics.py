import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tide import numerics as nx
from tide.numerics import DimensionError, ParamSet, Tensor, UnsupportedOpError


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for r in range(k):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(nx.matmul(np.eye(2), b).data, b)

    def test_projector(self):
        out = nx.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0], [7.0]]))
        assert np.array_equal(out.data, [[5.0], [0.0]])

    def test_matches_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.max(np.abs(nx.matmul(a, b).data - loop_matmul(a, b))) < 1e-12

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rank_check(self):
        with pytest.raises(DimensionError):
            nx.matmul(np.ones(3), np.ones((3, 2)))


class TestSoftmax:
    def test_symmetric(self):
        assert np.array_equal(nx.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = nx.softmax_rows(np.log([[1.0, 3.0]])).data
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_no_overflow(self):
        out = nx.softmax_rows(np.array([[1000.0, 1000.0]])).data
        assert np.array_equal(out, [[0.5, 0.5]])

    @given(arrays(np.float64, (3, 5), elements=st.floats(-300, 300)))
    def test_rows_are_distributions(self, a):
        out = nx.softmax_rows(a).data
        assert np.all(out >= 0)
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)


class TestGrad:
    def test_sum_of_squares(self):
        p = ParamSet({"x": np.array([1.0, 2.0])})
        g = nx.grad(lambda q: nx.sq_norm(q["x"]), p)
        assert np.array_equal(g["x"], [2.0, 4.0])

    def test_constant_function(self):
        p = ParamSet({"x": np.array([1.0, 2.0]), "y": np.ones((2, 2))})
        g = nx.grad(lambda q: Tensor(3.0), p)
        assert all(np.array_equal(v, np.zeros_like(v)) for v in g.values())

    def test_frozen_entries_absent(self):
        p = ParamSet({"x": np.ones(2), "w": np.ones(2)}, frozen=["w"])
        g = nx.grad(lambda q: nx.total(nx.mul(q["x"], q["w"])), p)
        assert set(g) == {"x"}

    def test_mlp_matches_finite_differences(self, rng):
        p = ParamSet(
            {
                "w1": rng.standard_normal((4, 6)),
                "b1": rng.standard_normal(6),
                "w2": rng.standard_normal((6, 2)),
            }
        )
        x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 2))

        def loss(q):
            h = nx.gelu(nx.add(nx.matmul(x, q["w1"]), q["b1"]))
            return nx.sq_norm(nx.sub(nx.matmul(h, q["w2"]), y))

        rep = nx.finite_diff_check(loss, p)
        assert rep.passed and rep.max_rel_err < 1e-6
        assert rep.n_coords == 4 * 6 + 6 + 6 * 2

    def test_non_differentiable_primitive(self):
        p = ParamSet({"x": np.array([1.0, -2.0])})
        with pytest.raises(UnsupportedOpError):
            nx.grad(lambda q: nx.total(nx.sign(q["x"])), p)

    def test_scalar_output_required(self):
        p = ParamSet({"x": np.ones(3)})
        with pytest.raises(DimensionError):
            nx.grad(lambda q: nx.square(q["x"]), p)

    def test_shared_subexpression_accumulates(self):
        p = ParamSet({"x": np.array([3.0])})
        g = nx.grad(lambda q: nx.total(nx.mul(q["x"], q["x"])), p)
        assert np.array_equal(g["x"], [6.0])

    def test_broadcast_add(self):
        p = ParamSet({"b": np.array([1.0, 2.0, 3.0])})
        g = nx.grad(lambda q: nx.total(nx.add(np.ones((4, 3)), q["b"])), p)
        assert np.array_equal(g["b"], [4.0, 4.0, 4.0])

    def test_gather_scatter_adds(self):
        p = ParamSet({"a": np.arange(4.0)})
        g = nx.grad(lambda q: nx.total(nx.gather(q["a"], np.array([0, 0, 3]), (3,))), p)
        assert np.array_equal(g["a"], [2.0, 0.0, 0.0, 1.0])


class TestFiniteDiff:
    def test_corrupted_primitive_is_caught(self, rng):
        p = ParamSet({"x": rng.standard_normal((2, 3))})
        f = lambda q: nx.total(nx.tanh(q["x"]))  # noqa: E731
        assert nx.finite_diff_check(f, p).passed
        with nx.corrupted("tanh"):
            rep = nx.finite_diff_check(f, p)
        assert not rep.passed
        assert rep.max_rel_err == pytest.approx(1 / 3, rel=1e-4)
        assert nx.finite_diff_check(f, p).passed

    def test_report_types(self):
        rep = nx.finite_diff_check(lambda q: nx.sq_norm(q["x"]), ParamSet({"x": np.ones(2)}))
        assert type(rep.max_rel_err) is float and type(rep.passed) is bool

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            nx.finite_diff_check(lambda q: nx.sq_norm(q["x"]), ParamSet({"x": np.ones(2)}), eps=0)


class TestParamSet:
    def test_replace_refuses_frozen(self):
        p = ParamSet({"a": np.ones(2), "b": np.ones(2)}, frozen=["b"])
        with pytest.raises(ValueError):
            p.replace({"b": np.zeros(2)})
        assert np.array_equal(p.replace({"a": np.zeros(2)})["a"].data, np.zeros(2))

    def test_frozen_copy_is_deep_and_equal(self):
        p = ParamSet({"a": np.ones(2)})
        q = p.frozen_copy()
        assert q.is_frozen("a") and np.array_equal(q["a"].data, p["a"].data)
        assert q["a"].data is not p["a"].data

    def test_unknown_frozen_name(self):
        with pytest.raises(KeyError):
            ParamSet({"a": np.ones(1)}, frozen=["z"])

    def test_tensor_data_read_only(self):
        t = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            t.data[0] = 2.0


class TestTen:
    @given(
        st.lists(st.integers(1, 4), min_size=0, max_size=4).flatmap(
            lambda shape: arrays(np.float64, tuple(shape), elements=st.floats(allow_nan=False, width=64))
        )
    )
    def test_round_trip(self, a):
        b = nx.from_bytes(nx.to_bytes(a))
        assert b.shape == a.shape and np.array_equal(a, b)

    def test_layout(self):
        raw = nx.to_bytes(np.array([[1.0, 2.0, 3.0]]))
        assert raw[:12] == b"\x02\x00\x00\x00\x01\x00\x00\x00\x03\x00\x00\x00"
        assert np.frombuffer(raw[12:], "<f8").tolist() == [1.0, 2.0, 3.0]

    def test_truncated(self):
        raw = nx.to_bytes(np.ones((2, 2)))
        with pytest.raises(EOFError):
            nx.read_tensor(io.BytesIO(raw[:-3]))

    def test_file_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((3, 2))
        nx.save_tensor(tmp_path / "a.ten", a)
        assert np.array_equal(nx.load_tensor(tmp_path / "a.ten"), a)


def test_softplus_at_zero_is_ln2():
    assert nx.softplus(np.array(0.0)).item() == math.log(2)
