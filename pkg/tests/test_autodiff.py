import math

import numpy as np
import pytest

from flowtrpo import autodiff as ad
from flowtrpo.errors import ContractError, DomainError, NumericError, ShapeError

from conftest import assert_grad_matches


class TestForwardOps:
    def test_matmul_identity(self):
        out = ad.forward_op("matmul", np.eye(2), np.array([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_softplus_at_zero(self):
        assert ad.softplus(0.0).data == pytest.approx(math.log(2.0), abs=1e-15)

    def test_tanh_against_reference_libm(self):
        # reference math library on this machine
        for x in (0.5, -1.3, 2.7, 0.0):
            assert ad.tanh(x).data == pytest.approx(math.tanh(x), abs=1e-12)

    def test_lgamma_against_scipy(self):
        from scipy.special import gammaln
        x = np.array([0.5, 1.0, 3.7, 10.0])
        assert np.allclose(ad.lgamma(x).data, gammaln(x), atol=1e-14)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, -1.0]))

    def test_nonfinite_surfaces_as_numeric_error(self):
        with pytest.raises(NumericError):
            ad.exp(np.array([1000.0]))

    def test_unknown_op(self):
        with pytest.raises(ShapeError):
            ad.forward_op("convolve", np.ones(2))

    def test_ops_registry_covers_whitelist(self):
        listed = {"matmul", "add", "sub", "mul", "exp", "log", "tanh",
                  "softplus", "sum", "mean", "slice", "concat", "scale"}
        assert listed <= set(ad.OPS)


class TestGrad:
    def test_square_at_three(self):
        with ad.Tape() as tape:
            th = tape.leaf(np.array([3.0]))
            out = ad.tsum(ad.mul(th, th))
            g = tape.gradient(out, th)
        assert g == pytest.approx([6.0], abs=1e-14)

    def test_sum_tanh_matmul_matches_fd(self, rng):
        W = rng.standard_normal((4, 3))
        x = rng.standard_normal((5, 4))

        def f(w_flat):
            return float(np.sum(np.tanh(x @ w_flat.reshape(4, 3))))

        with ad.Tape() as tape:
            th = tape.leaf(W.reshape(-1))
            out = ad.tsum(ad.tanh(ad.matmul(ad.constant(x), ad.reshape(th, (4, 3)))))
            g = tape.gradient(out, th)
        assert_grad_matches(f, W.reshape(-1), g, rel_tol=1e-6)

    def test_constant_function_zero_gradient(self):
        with ad.Tape() as tape:
            th = tape.leaf(np.array([1.0, 2.0]))
            out = ad.constant(5.0)
            g = tape.gradient(out, th)
        assert np.array_equal(g, np.zeros(2))

    def test_grad_of_nonscalar_is_contract_error(self):
        with ad.Tape() as tape:
            th = tape.leaf(np.array([1.0, 2.0]))
            out = ad.mul(th, th)
            with pytest.raises(ContractError):
                tape.gradient(out, th)

    def test_linearity(self, rng):
        x = rng.standard_normal(6)
        a, b = 2.3, -0.7

        def parts(th):
            f = ad.tsum(ad.tanh(th))
            g = ad.tsum(ad.mul(th, th))
            return f, g

        with ad.Tape() as tape:
            th = tape.leaf(x)
            f, g = parts(th)
            gf = tape.gradient(f, th)
            gg = tape.gradient(g, th)
        with ad.Tape() as tape:
            th = tape.leaf(x)
            f, g = parts(th)
            combo = ad.add(ad.scale(f, a), ad.scale(g, b))
            gc = tape.gradient(combo, th)
        assert np.allclose(gc, a * gf + b * gg, rtol=1e-14, atol=1e-14)

    def test_determinism_bitwise(self, rng):
        x = rng.standard_normal(8)

        def run():
            with ad.Tape() as tape:
                th = tape.leaf(x)
                out = ad.tmean(ad.exp(ad.tanh(ad.mul(th, th))))
                return tape.gradient(out, th)

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    @pytest.mark.parametrize("shapes", [
        ((5, 3), (3,)),    # row-vector bias
        ((5, 3), (1, 3)),
        ((5, 3), (5, 1)),  # column broadcast
        ((5, 3), (5, 3)),
        ((4,), (4,)),
    ])
    def test_broadcast_vjps_match_fd(self, rng, shapes):
        sa, sb = shapes
        a = rng.standard_normal(sa)
        b = rng.standard_normal(sb)

        for op, npop in ((ad.add, np.add), (ad.sub, np.subtract), (ad.mul, np.multiply)):
            def f(bflat):
                return float(np.sum(np.tanh(npop(a, bflat.reshape(sb)))))

            with ad.Tape() as tape:
                th = tape.leaf(b.reshape(-1))
                out = ad.tsum(ad.tanh(op(ad.constant(a), ad.reshape(th, sb))))
                g = tape.gradient(out, th)
            assert_grad_matches(f, b.reshape(-1), g, rel_tol=1e-6)

    def test_slice_concat_repeat_vjps(self, rng):
        x = rng.standard_normal((4, 6))

        def f(v):
            m = v.reshape(4, 6)
            left, right = m[:, :2], m[:, 2:]
            r = np.concatenate([right, left], axis=1)
            rep = np.repeat(r, 3, axis=0)
            return float(np.sum(np.tanh(rep)))

        with ad.Tape() as tape:
            th = tape.leaf(x.reshape(-1))
            m = ad.reshape(th, (4, 6))
            left = ad.narrow(m, 1, 0, 2)
            right = ad.narrow(m, 1, 2, 4)
            out = ad.tsum(ad.tanh(ad.repeat_rows(ad.concat([right, left], 1), 3)))
            g = tape.gradient(out, th)
        assert_grad_matches(f, x.reshape(-1), g, rel_tol=1e-6)

    def test_axis_reductions(self, rng):
        x = rng.standard_normal((3, 4))
        t = ad.constant(x)
        assert np.allclose(ad.tsum(t, axis=1).data, x.sum(1, keepdims=True))
        assert np.allclose(ad.tmean(t, axis=0).data, x.mean(0, keepdims=True))
        assert ad.tsum(t).data == pytest.approx(x.sum())

    def test_logsumexp_value_and_grad(self, rng):
        from scipy.special import logsumexp as sp_lse
        x = rng.standard_normal((5, 4)) * 3

        def f(v):
            return float(np.sum(sp_lse(v.reshape(5, 4), axis=1)))

        with ad.Tape() as tape:
            th = tape.leaf(x.reshape(-1))
            out = ad.tsum(ad.logsumexp(ad.reshape(th, (5, 4)), axis=1))
            g = tape.gradient(out, th)
        assert out.data == pytest.approx(f(x.reshape(-1)), rel=1e-14)
        assert_grad_matches(f, x.reshape(-1), g, rel_tol=1e-6)

    def test_unused_leaf_gets_zeros(self):
        with ad.Tape() as tape:
            a = tape.leaf(np.ones(3))
            b = tape.leaf(np.ones(2))
            out = ad.tsum(a)
            assert np.array_equal(tape.gradient(out, b), np.zeros(2))

    def test_reused_operand_accumulates(self):
        with ad.Tape() as tape:
            th = tape.leaf(np.array([2.0]))
            out = ad.tsum(ad.add(ad.mul(th, th), th))  # x^2 + x -> 2x + 1
            g = tape.gradient(out, th)
        assert g == pytest.approx([5.0], abs=1e-14)

    def test_independent_tapes_on_threads(self):
        import threading
        results = {}

        def worker(name, val):
            with ad.Tape() as tape:
                th = tape.leaf(np.array([val]))
                out = ad.tsum(ad.mul(th, th))
                results[name] = tape.gradient(out, th)[0]

        threads = [threading.Thread(target=worker, args=(i, float(i + 1)))
                   for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: pytest.approx(2.0 * (i + 1)) for i in range(4)}
