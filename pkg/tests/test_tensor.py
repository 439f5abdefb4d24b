import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petah import tensor as T
from petah.gradcheck import analytic_gradient, compare_gradients, gradcheck, numerical_gradient, resolvable_floor
from petah.tensor import NonFiniteError, ShapeError, Tape, Tensor, backward


def naive_conv(x, k, b, stride, pad, groups=1):
    """Direct seven-loop cross-correlation in float64."""
    n, q, h, w = x.shape
    p, qg, kh, kw = k.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, p, ho, wo))
    pg = p // groups
    for i in range(n):
        for o in range(p):
            g = o // pg
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(qg):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, g * qg + c, y * stride + dy, xx * stride + dx] * k[o, c, dy, dx]
                    out[i, o, y, xx] = acc + (0 if b is None else b[o])
    return out


class TestTensor:
    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5

    def test_default_single_precision(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.zeros(2)).dtype == np.float64

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, bad])

    def test_nan_input_to_conv_rejected(self):
        x = np.ones((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NonFiniteError):
            T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))

    def test_overflow_reported_at_op_boundary(self):
        big = Tensor(np.full(3, 3e38, dtype=np.float32))
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                T.add(big, big)


class TestConv2d:
    def test_all_ones_3x3(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_zero_kernel_gives_bias(self):
        rng = np.random.default_rng(0)
        b = np.array([0.5, -2.0], dtype=np.float32)
        out = T.conv2d(Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(np.zeros((2, 3, 3, 3))), Tensor(b), 2, 1)
        assert np.array_equal(out.data, np.broadcast_to(b[None, :, None, None], out.shape))

    def test_identity_1x1(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 5, 4, 7)).astype(np.float32)
        k = np.eye(5, dtype=np.float32).reshape(5, 5, 1, 1)
        assert np.array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    @pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 3)])
    def test_matches_naive_loops(self, stride, pad, groups):
        rng = np.random.default_rng(stride * 10 + pad + groups)
        q, p = 3 * groups, 2 * groups
        x = rng.normal(size=(2, q, 7, 6))
        k = rng.normal(size=(p, q // groups, 3, 3))
        b = rng.normal(size=p)
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad, groups)
        np.testing.assert_allclose(out.data, naive_conv(x, k, b, stride, pad, groups), rtol=1e-10, atol=1e-12)

    def test_output_extent(self):
        assert T.conv_output_size(32, 3, 2, 1) == 16
        assert T.conv_output_size(5, 5, 1, 0) == 1

    def test_errors(self):
        x = Tensor(np.ones((1, 4, 3, 3)))
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((1, 3, 1, 1))))  # channel mismatch
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((2, 4, 5, 5))))  # non-positive extent
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((3, 2, 1, 1))), groups=2)  # p not divisible by g

    def test_deterministic_across_processes(self):
        code = (
            "import numpy as np, hashlib; from petah import tensor as T;"
            "r=np.random.default_rng(3); x=T.Tensor(r.normal(size=(2,4,9,9)));"
            "k=T.Tensor(r.normal(size=(5,4,3,3))); y=T.conv2d(x,k,None,2,1);"
            "print(hashlib.sha256(y.data.tobytes()).hexdigest())"
        )
        runs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)}
        assert len(runs) == 1
        # same in-process
        r = np.random.default_rng(3)
        x, k = Tensor(r.normal(size=(2, 4, 9, 9))), Tensor(r.normal(size=(5, 4, 3, 3)))
        import hashlib

        assert hashlib.sha256(T.conv2d(x, k, None, 2, 1).data.tobytes()).hexdigest() + "\n" in runs


class TestMatmul:
    def test_identity(self):
        m = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
        assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_hand_computed(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_zeros(self):
        out = T.matmul(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 4))))
        assert not out.data.any() and out.shape == (2, 4)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestPointwise:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-7)

    def test_relu(self):
        assert T.relu(Tensor([-1.5])).data[0] == 0.0

    def test_avg_pool_2x2(self):
        out = T.avg_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert out.data.item() == 2.5

    def test_avg_pool_excludes_padding(self):
        out = T.avg_pool2d(Tensor(np.ones((1, 1, 3, 3))), 3, 1, 1)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_gelu_reference_points(self):
        x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_softmax_rows(self, n, d, seed):
        x = np.random.default_rng(seed).normal(0, 10, (n, d)).astype(np.float32)
        s = T.softmax(Tensor(x)).data
        assert np.all((s >= 0) & (s <= 1))
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 32), st.integers(0, 2**31 - 1))
    def test_layer_norm_moments(self, n, d, seed):
        rng = np.random.default_rng(seed)
        x = (rng.normal(size=(n, d)) * rng.uniform(0.5, 5) + rng.normal() * 3).astype(np.float32)
        y = T.layer_norm(Tensor(x), None, None, eps=1e-6).data.astype(np.float64)
        assert np.abs(y.mean(axis=1)).max() <= 1e-5
        assert np.abs(y.var(axis=1) - 1).max() <= 1e-3

    def test_broadcast_add(self):
        out = T.add(Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0]))
        assert out.data.tolist() == [[2, 3, 4], [2, 3, 4]]


class TestKernelReshape:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_roundtrip_bitwise(self, p, q, k, seed):
        w = Tensor(np.random.default_rng(seed).normal(size=(p, q, k, k)).astype(np.float32))
        m = T.reshape_kernel_4d_to_2d(w)
        assert m.shape == (p, q * k * k)
        back = T.reshape_kernel_2d_to_4d(m, q, k)
        assert back.data.tobytes() == w.data.tobytes()

    def test_k1_case(self):
        w = np.arange(6, dtype=np.float32).reshape(2, 3, 1, 1)
        m = T.reshape_kernel_4d_to_2d(Tensor(w))
        assert m.data.tolist() == [[0, 1, 2], [3, 4, 5]]

    def test_row_major_enumeration(self):
        w = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 1, 2, 2)
        assert T.reshape_kernel_4d_to_2d(Tensor(w)).data.tolist() == [[1, 2, 3, 4]]

    def test_inconsistent_extents(self):
        with pytest.raises(ShapeError):
            T.reshape_kernel_2d_to_4d(Tensor(np.ones((2, 10))), 3, 2)


class TestBackward:
    def test_linear_form(self):
        x = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        w = Tensor(np.ones((2, 3)), name="W")
        with Tape() as tape:
            tape.watch(w)
            loss = T.sum_(T.mul(w, Tensor(x)))
        g = backward(tape, loss)["W"].data
        assert np.array_equal(g, np.broadcast_to(x, (2, 3)))

    def test_disconnected_gets_zeros(self):
        a, theta = Tensor([1.0, 2.0], name="a"), Tensor([[3.0]], name="theta")
        with Tape() as tape:
            tape.watch([a, theta])
            loss = T.sum_(a)
        g = backward(tape, loss)
        assert g["theta"].shape == (1, 1) and not g["theta"].data.any()

    def test_quadratic(self):
        w = Tensor(np.random.default_rng(0).normal(size=(3, 2)), name="w")
        with Tape() as tape:
            tape.watch(w)
            loss = T.sum_(T.mul(w, w))
        np.testing.assert_array_equal(backward(tape, loss)["w"].data, 2 * w.data)

    def test_shared_input_accumulates(self):
        w = Tensor([2.0], name="w")
        with Tape() as tape:
            tape.watch(w)
            loss = T.sum_(T.add(T.mul(w, w), T.scale(w, 3.0)))
        assert backward(tape, loss)["w"].data[0] == pytest.approx(7.0)

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], name="w")
        with Tape() as tape:
            tape.watch(w)
            out = T.scale(w, 2.0)
        with pytest.raises(ShapeError):
            backward(tape, out)

    def test_unwatched_records_nothing(self):
        with Tape() as tape:
            T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert len(tape) == 0

    def test_reverse_order(self):
        w = Tensor([1.0], name="w")
        with Tape() as tape:
            tape.watch(w)
            a = T.scale(w, 2.0)
            b = T.relu(a)
            loss = T.sum_(b)
        assert [r.op for r in tape.records] == ["scale", "relu", "sum"]
        assert backward(tape, loss)["w"].data[0] == 2.0


class TestGradcheck:
    def test_conv_p2_q2_k3(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        probe = rng.normal(size=(2, 2, 3, 3))
        params = {"k": Tensor(rng.normal(size=(2, 2, 3, 3))), "b": Tensor(rng.normal(size=2))}
        rep = gradcheck(lambda p: T.sum_(T.mul(T.conv2d(x, p["k"], p["b"]), Tensor(probe))), params)
        assert rep.passed, rep

    def test_matmul_chain_depth3(self):
        rng = np.random.default_rng(1)
        params = {k: Tensor(rng.normal(size=(3, 3))) for k in "abc"}
        rep = gradcheck(lambda p: T.sum_(T.matmul(T.matmul(p["a"], p["b"]), p["c"])), params)
        assert rep.passed, rep

    def test_corrupted_gradient_detected(self):
        rng = np.random.default_rng(2)
        params = {"a": Tensor(rng.normal(size=(3, 4))), "b": Tensor(rng.normal(size=(4, 2)))}

        def fn(p):
            return T.sum_(T.mul(T.matmul(p["a"], p["b"]), Tensor(rng_probe)))

        rng_probe = rng.normal(size=(3, 2))
        analytic = analytic_gradient(fn, params)
        numeric = numerical_gradient(fn, params)
        assert compare_gradients(analytic, numeric).passed
        corrupted = {k: v * 1.01 for k, v in analytic.items()}
        rep = compare_gradients(corrupted, numeric)
        assert not rep.passed and rep.max_rel_error > 5e-3

    def test_floor_tracks_round_off(self):
        # ulp / (eps * tol) for an O(1) loss
        assert resolvable_floor(0.5, 1e-5, 1e-4) == pytest.approx(np.finfo(float).eps / 1e-9)
        assert resolvable_floor(100.0, 1e-5, 1e-4) == pytest.approx(100 * resolvable_floor(1.0, 1e-5, 1e-4))

    def test_round_off_sized_entry_not_flagged(self):
        # layer norm rows with an entry whose true gradient is ~4e-8
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = Tensor(rng.normal(size=(4, 5)) * rng.uniform(0.2, 2, (4, 1)))
            w = Tensor(rng.normal(size=(4, 5)))
            rep = gradcheck(lambda p: T.sum_(T.mul(T.layer_norm(p["x"], None, None), w)), {"x": x})
            assert rep.passed, rep

    def test_floor_does_not_hide_real_errors(self):
        rng = np.random.default_rng(5)
        params = {"a": Tensor(rng.normal(size=(6,)) * 1e-3)}
        fn = lambda p: T.sum_(T.mul(p["a"], p["a"]))  # noqa: E731
        analytic = analytic_gradient(fn, params)
        numeric = numerical_gradient(fn, params)
        floor = resolvable_floor(fn(params).item(), 1e-5, 1e-4)
        assert compare_gradients(analytic, numeric, floor=floor).passed
        assert not compare_gradients({"a": analytic["a"] * 1.01}, numeric, floor=floor).passed

    def test_requires_double(self):
        with pytest.raises(TypeError):
            gradcheck(lambda p: T.sum_(p["a"]), {"a": Tensor([1.0], dtype=np.float32)})

    def test_eps_range(self):
        with pytest.raises(ValueError):
            gradcheck(lambda p: T.sum_(p["a"]), {"a": Tensor(np.ones(1))}, eps=1e-2)


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
    labels = np.array([0, 2])
    ref = -np.mean([logits[0, 0] - np.log(np.exp(logits[0]).sum()), -np.log(3)])
    assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(ref, rel=1e-12)
