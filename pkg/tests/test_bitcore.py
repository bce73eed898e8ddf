import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binroad import bitcore as bc


def scalar_sign(v):
    # independent oracle: sign with sign(0) = +1
    return 1 if v >= 0 else -1


def naive_conv2d(w, x, stride=1, padding=0, dilation=1):
    """Six-loop full-precision convolution with zero padding (oracle)."""
    co, ci, kh, kw = w.shape
    _, h, wd = x.shape
    xp = np.zeros((ci, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + wd] = x
    ho = bc.conv_out_size(h, kh, stride, padding, dilation)
    wo = bc.conv_out_size(wd, kw, stride, padding, dilation)
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[o, c, i, j] * xp[c, y * stride + i * dilation, xx * stride + j * dilation]
                out[o, y, xx] = acc
    return out


class TestSignPack:
    def test_sign_convention_at_zero(self):
        t = bc.sign_pack(np.array([1.5, -0.2, 0.0, -7.0]))
        assert bc.unpack(t).tolist() == [1, -1, 1, -1]

    def test_all_positive_sets_all_bits(self):
        t = bc.sign_pack(np.full(70, 0.3))
        assert (bc.unpack(t) == 1).all()
        # padding bits beyond the valid length stay zero
        mask = ~np.uint64(0) << np.uint64(70 - 64)
        assert t.words[0, 1] & mask == 0

    def test_matches_scalar_sign_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(1000)
        x[::17] = 0.0
        got = bc.unpack(bc.sign_pack(x))
        want = np.array([scalar_sign(v) for v in x], dtype=np.int8)
        assert (got == want).all()

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="non-finite activation"):
            bc.sign_pack(np.array([1.0, np.nan]))
        with pytest.raises(ValueError, match="non-finite activation"):
            bc.sign_pack(np.array([np.inf, 1.0]))

    @given(
        st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=300)
    )
    @settings(max_examples=60, deadline=None)
    def test_pack_unpack_round_trip(self, vals):
        x = np.array(vals)
        t = bc.sign_pack(x)
        back = bc.unpack(t)
        assert back.shape == x.shape
        assert (bc.unpack(bc.sign_pack(back.astype(np.float64))) == back).all()

    def test_round_trip_nd_shapes(self):
        rng = np.random.default_rng(1)
        for shape in [(3,), (64,), (65,), (2, 3, 5), (4, 129), (1, 1, 1)]:
            x = rng.standard_normal(shape)
            assert (bc.unpack(bc.sign_pack(x)) == np.where(x >= 0, 1, -1)).all()


class TestXnorPopcountDot:
    def test_identical_vectors_give_n(self):
        t = bc.sign_pack(np.ones(4))
        assert bc.xnor_popcount_dot(t, t) == 4

    def test_antipodal_vectors_give_minus_n(self):
        a = bc.sign_pack(np.array([1.0, -1.0, 1.0, -1.0]))
        b = bc.sign_pack(np.array([-1.0, 1.0, -1.0, 1.0]))
        assert bc.xnor_popcount_dot(a, b) == -4

    def test_matches_float_dot_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            a = rng.choice([-1.0, 1.0], size=64)
            b = rng.choice([-1.0, 1.0], size=64)
            assert bc.xnor_popcount_dot(bc.sign_pack(a), bc.sign_pack(b)) == int(a @ b)

    def test_ragged_lengths_exact(self):
        # every length from 1 to 513 crosses the word boundaries
        rng = np.random.default_rng(3)
        for n in range(1, 514):
            a = rng.choice([-1.0, 1.0], size=n)
            b = rng.choice([-1.0, 1.0], size=n)
            assert bc.xnor_popcount_dot(bc.sign_pack(a), bc.sign_pack(b)) == int(a @ b)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length mismatch"):
            bc.xnor_popcount_dot(bc.sign_pack(np.ones(3)), bc.sign_pack(np.ones(4)))


class TestBinaryGemm:
    def test_one_by_one(self):
        w = bc.sign_pack(np.array([[1.0]]))
        a = bc.sign_pack(np.array([[1.0]]))
        s = bc.ScaleFactors(alpha=np.array([2.0]), beta=3.0)
        assert bc.binary_gemm(w, a, s) == np.array([[6.0]])

    def test_equals_integer_matmul_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            m, k, n = rng.integers(1, 129, size=3)
            wf = rng.choice([-1.0, 1.0], size=(m, k))
            af = rng.choice([-1.0, 1.0], size=(k, n))
            got = bc.binary_gemm(bc.sign_pack(wf), bc.sign_pack(af), bc.ScaleFactors.unit(m))
            assert (got == wf @ af).all()

    def test_alpha_scaling_reduces_frobenius_error(self):
        rng = np.random.default_rng(5)
        wf = rng.standard_normal((16, 200))
        alpha = bc.weight_scale(wf)
        signs = np.where(wf >= 0, 1.0, -1.0)
        err_scaled = np.linalg.norm(alpha[:, None] * signs - wf)
        err_unscaled = np.linalg.norm(signs - wf)
        assert err_scaled <= err_unscaled

    def test_dimension_errors(self):
        w = bc.sign_pack(np.ones((2, 3)))
        a = bc.sign_pack(np.ones((4, 2)))
        with pytest.raises(ValueError, match="dimension mismatch"):
            bc.binary_gemm(w, a, bc.ScaleFactors.unit(2))
        a = bc.sign_pack(np.ones((3, 2)))
        with pytest.raises(ValueError, match="alpha length"):
            bc.binary_gemm(w, a, bc.ScaleFactors.unit(5))


class TestBinaryConv2d:
    def test_1x1_all_ones(self):
        cin = 5
        w = bc.sign_pack(np.ones((2, cin, 1, 1)))
        a = bc.sign_pack(np.ones((cin, 4, 4)))
        out = bc.binary_conv2d(w, a, bc.ScaleFactors.unit(2))
        assert out.shape == (2, 4, 4)
        assert (out == cin).all()

    def test_matches_naive_conv_oracle(self):
        rng = np.random.default_rng(6)
        wf = rng.choice([-1.0, 1.0], size=(3, 2, 3, 3))
        af = rng.choice([-1.0, 1.0], size=(2, 8, 8))
        got = bc.binary_conv2d(bc.sign_pack(wf), bc.sign_pack(af), bc.ScaleFactors.unit(3))
        assert np.array_equal(got, naive_conv2d(wf, af))

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 6, 6), (2, 0, 1)])
    def test_matches_naive_conv_with_geometry(self, stride, padding, dilation):
        rng = np.random.default_rng(7)
        wf = rng.choice([-1.0, 1.0], size=(2, 3, 3, 3))
        af = rng.choice([-1.0, 1.0], size=(3, 16, 16))
        got = bc.binary_conv2d(
            bc.sign_pack(wf), bc.sign_pack(af), bc.ScaleFactors.unit(2), stride, padding, dilation
        )
        assert np.array_equal(got, naive_conv2d(wf, af, stride, padding, dilation))

    def test_dilation_six_preserves_size(self):
        rng = np.random.default_rng(8)
        wf = rng.choice([-1.0, 1.0], size=(1, 2, 3, 3))
        af = rng.choice([-1.0, 1.0], size=(2, 32, 32))
        out = bc.binary_conv2d(bc.sign_pack(wf), bc.sign_pack(af), bc.ScaleFactors.unit(1), 1, 6, 6)
        assert out.shape == (1, 32, 32)

    def test_equals_im2col_plus_gemm(self):
        # with no padding, im2col in the +-1 domain followed by binary_gemm
        # must agree exactly
        rng = np.random.default_rng(9)
        for _ in range(10):
            ci = int(rng.integers(1, 5))
            co = int(rng.integers(1, 5))
            h = int(rng.integers(3, 12))
            wd = int(rng.integers(3, 12))
            wf = rng.choice([-1.0, 1.0], size=(co, ci, 3, 3))
            af = rng.choice([-1.0, 1.0], size=(ci, h, wd))
            conv = bc.binary_conv2d(bc.sign_pack(wf), bc.sign_pack(af), bc.ScaleFactors.unit(co))
            ho, wo = h - 2, wd - 2
            cols = np.empty((ci, 3, 3, ho, wo))
            for i in range(3):
                for j in range(3):
                    cols[:, i, j] = af[:, i : i + ho, j : j + wo]
            patches = cols.reshape(ci * 9, ho * wo)
            gemm = bc.binary_gemm(
                bc.sign_pack(wf.reshape(co, -1)), bc.sign_pack(patches), bc.ScaleFactors.unit(co)
            )
            assert np.array_equal(conv, gemm.reshape(co, ho, wo))

    def test_scales_applied_per_channel(self):
        rng = np.random.default_rng(10)
        wf = rng.choice([-1.0, 1.0], size=(2, 2, 3, 3))
        af = rng.choice([-1.0, 1.0], size=(2, 6, 6))
        s = bc.ScaleFactors(alpha=np.array([0.5, 2.0]), beta=3.0)
        got = bc.binary_conv2d(bc.sign_pack(wf), bc.sign_pack(af), s, 1, 1, 1)
        want = naive_conv2d(wf, af, 1, 1, 1) * np.array([0.5, 2.0])[:, None, None] * 3.0
        assert np.allclose(got, want)

    def test_kernel_larger_than_padded_input(self):
        w = bc.sign_pack(np.ones((1, 1, 5, 5)))
        a = bc.sign_pack(np.ones((1, 3, 3)))
        with pytest.raises(ValueError, match="kernel larger than padded input"):
            bc.binary_conv2d(w, a, bc.ScaleFactors.unit(1))
