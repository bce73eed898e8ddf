import numpy as np
import pytest

from binroad import autograd as ag

from gradcheck import check_gradients


class TestSignSTE:
    def test_inside_window_passes_gradient(self):
        x = ag.Tensor(np.array([0.5]), requires_grad=True)
        y = ag.sign_ste(x)
        y.backward(np.array([2.0]))
        assert x.grad.tolist() == [2.0]

    def test_outside_window_blocks_gradient(self):
        x = ag.Tensor(np.array([1.5]), requires_grad=True)
        y = ag.sign_ste(x)
        y.backward(np.array([2.0]))
        assert x.grad.tolist() == [0.0]

    def test_boundary_is_strict(self):
        x = ag.Tensor(np.array([1.0, -1.0]), requires_grad=True)
        y = ag.sign_ste(x)
        y.backward(np.array([2.0, 2.0]))
        assert x.grad.tolist() == [0.0, 0.0]

    def test_forward_sign_convention(self):
        x = ag.Tensor(np.array([0.3, -0.3, 0.0]))
        assert ag.sign_ste(x).values.tolist() == [1.0, -1.0, 1.0]

    def test_matches_clip_derivative_off_boundary(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-3, 3, size=200)
        x = x[np.abs(np.abs(x) - 1.0) > 1e-6]
        t = ag.Tensor(x, requires_grad=True)
        ag.sign_ste(t).backward(np.ones_like(x))
        clip_grad = ((x > -1) & (x < 1)).astype(float)
        assert (t.grad == clip_grad).all()


class TestGradChecks:
    def test_elementwise_chain(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4)) + 2.5
        b = rng.standard_normal((3, 4)) + 3.0
        check_gradients(lambda x, y: ag.tsum(ag.mul(ag.add(x, y), ag.sub(x, y))), a, b)
        check_gradients(lambda x, y: ag.tsum(ag.div(x, y)), a, b)
        check_gradients(lambda x: ag.tsum(ag.exp(x)), a * 0.3)
        check_gradients(lambda x: ag.tsum(ag.log(x)), np.abs(a) + 0.5)
        check_gradients(lambda x: ag.tsum(ag.absolute(x)), a)
        check_gradients(lambda x: ag.tsum(ag.power(x, 3)), a)
        check_gradients(lambda x: ag.tsum(ag.sigmoid(x)), a)

    def test_broadcasting_gradients(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((1, 3, 1))
        check_gradients(lambda x, y: ag.tsum(ag.mul(x, y)), a, b)
        c = rng.standard_normal(4)
        check_gradients(lambda x, y: ag.tsum(ag.add(x, y)), a, c)

    def test_matmul_gradients(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((5, 2))
        check_gradients(lambda x, y: ag.tsum(ag.matmul(x, y)), a, b)
        # batched lhs against shared rhs
        a3 = rng.standard_normal((2, 3, 5))
        check_gradients(lambda x, y: ag.tsum(ag.matmul(x, y)), a3, b)
        b3 = rng.standard_normal((2, 5, 4))
        check_gradients(lambda x, y: ag.tsum(ag.matmul(x, y)), a3, b3)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2)])
    def test_conv2d_gradients(self, stride, padding, dilation):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        check_gradients(
            lambda xx, ww: ag.tsum(ag.conv2d(xx, ww, stride, padding, dilation)), x, w
        )

    def test_pool_shuffle_concat_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 5, 6))
        check_gradients(lambda t: ag.tsum(ag.mul(ag.avg_pool2(t), ag.avg_pool2(t))), x)
        y = rng.standard_normal((2, 8, 3, 3))
        check_gradients(lambda t: ag.tsum(ag.power(ag.pixel_shuffle(t, 2), 2)), y)
        a = rng.standard_normal((2, 2, 3))
        b = rng.standard_normal((2, 4, 3))
        check_gradients(
            lambda u, v: ag.tsum(ag.power(ag.concat([u, v], axis=1), 2)), a, b
        )

    def test_softmax_prelu_take_gradients(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal(5)
        check_gradients(lambda t: ag.tsum(ag.mul(ag.softmax(t, axis=-1), ag.Tensor(w))), x)
        x4 = rng.standard_normal((2, 3, 4, 4))
        slope = rng.uniform(0.1, 0.5, size=3)
        check_gradients(lambda t, s: ag.tsum(ag.prelu(t, s, axis=1)), x4, slope)
        v = rng.standard_normal(10)
        idx = np.array([3, 1, 1, 7])
        check_gradients(lambda t: ag.tsum(ag.power(ag.take_flat(t, idx), 2)), v)

    def test_batch_norm_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3, 5))
        gamma = rng.uniform(0.5, 1.5, size=3)
        beta = rng.standard_normal(3)

        def fn(t, g, b):
            y, _, _ = ag.batch_norm_train(t, g, b, axis=1)
            return ag.tsum(ag.power(y, 2))

        check_gradients(fn, x, gamma, beta)

    def test_mean_and_reshape_gradients(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 4))
        check_gradients(lambda t: ag.tmean(ag.power(t, 2)), x)
        check_gradients(lambda t: ag.tsum(ag.power(ag.reshape(t, (6, 4)), 3)), x)
        check_gradients(lambda t: ag.tsum(ag.mul(ag.transpose(t, (2, 0, 1)), ag.transpose(t, (2, 0, 1)))), x)


class TestBatchNormModule:
    def test_normalizes_standard_normal_batch(self):
        rng = np.random.default_rng(9)
        bn = ag.BatchNorm(4)
        x = ag.Tensor(rng.standard_normal((1, 4, 100, 100)) * 3.0 + 1.5)
        y = bn(x).values
        assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-3
        assert np.abs(y.var(axis=(0, 2, 3)) - 1.0).max() < 1e-3

    def test_constant_channel_goes_to_zero(self):
        bn = ag.BatchNorm(2)
        x = ag.Tensor(np.full((1, 2, 8, 8), 7.0))
        y = bn(x).values
        assert np.abs(y).max() < 1e-2

    def test_eval_mode_uses_running_stats(self):
        rng = np.random.default_rng(10)
        bn = ag.BatchNorm(3, momentum=1.0)
        x = rng.standard_normal((2, 3, 6, 6)) * 2.0 + 1.0
        bn(ag.Tensor(x))
        bn.eval()
        y = bn(ag.Tensor(x)).values
        expect = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(
            x.var(axis=(0, 2, 3), keepdims=True) + bn.eps
        )
        assert np.allclose(y, expect, atol=1e-5)


class TestShiftedActivation:
    def test_zero_shifts_reduce_to_prelu(self):
        rng = np.random.default_rng(11)
        act = ag.RPReLU(3)
        x = rng.standard_normal((2, 3, 4, 4))
        y = act(ag.Tensor(x)).values
        want = np.where(x > 0, x, 0.25 * x)
        assert np.allclose(y, want)

    def test_one_gradient_step_reduces_loss(self):
        rng = np.random.default_rng(12)
        shift = ag.ChannelShift(2)
        target = rng.standard_normal((1, 2, 3, 3))
        x = ag.Tensor(np.full((1, 2, 3, 3), 0.7))

        def loss_value():
            d = ag.sub(shift(x), ag.Tensor(target))
            return ag.tsum(ag.mul(d, d))

        l0 = loss_value()
        l0.backward()
        shift.bias.values -= 0.05 * shift.bias.grad
        l1 = loss_value()
        assert float(l1.values) < float(l0.values)

    def test_finite_difference_gradients_on_random_scalars(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            x = rng.standard_normal((1, 1, 1, 1)) * 2
            b = rng.standard_normal(1)
            slope = rng.uniform(0.1, 0.9, size=1)
            gamma = rng.standard_normal(1)
            zeta = rng.standard_normal(1)

            def fn(t, bb, ss, gg, zz):
                s = ag.sub(t, ag.reshape(bb, (1, 1, 1, 1)))
                y = ag.prelu(ag.sub(s, ag.reshape(gg, (1, 1, 1, 1))), ss, axis=1)
                return ag.tsum(ag.add(y, ag.reshape(zz, (1, 1, 1, 1))))

            check_gradients(fn, x, b, slope, gamma, zeta, tol=1e-5)

    def test_all_shift_parameters_receive_gradients(self):
        rng = np.random.default_rng(14)
        act = ag.RPReLU(3)
        shift = ag.ChannelShift(3)
        x = ag.Tensor(rng.standard_normal((2, 3, 4, 4)))
        out = ag.tsum(act(shift(x)))
        out.backward()
        for p in list(act.parameters()) + list(shift.parameters()):
            assert p.grad is not None and np.abs(p.grad).sum() > 0


class TestOptimizers:
    def test_cosine_schedule_endpoints(self):
        opt = ag.SgdCosine([ag.Parameter(np.zeros(1), name="w")], lr0=0.4, epoch_total=100)
        assert opt.lr_at(0) == pytest.approx(0.4)
        assert opt.lr_at(100) == pytest.approx(0.0, abs=1e-12)
        assert opt.lr_at(50) == pytest.approx(0.2)

    def test_adamw_finds_quadratic_minimum(self):
        target = np.array([1.7, -0.3, 0.9])
        p = ag.Parameter(np.zeros(3), name="w")
        opt = ag.AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(100):
            p.grad = 2.0 * (p.values - target)
            opt.step()
        assert np.abs(p.values - target).max() < 1e-2

    def test_missing_gradient_names_parameter(self):
        p = ag.Parameter(np.zeros(2), name="encoder.w0")
        opt = ag.SgdCosine([p], lr0=0.1, epoch_total=10)
        with pytest.raises(ValueError, match="encoder.w0"):
            opt.step(0)
        opt2 = ag.AdamW([p], lr=0.1)
        with pytest.raises(ValueError, match="encoder.w0"):
            opt2.step()

    def test_latent_clip_keeps_ste_window_open(self):
        p = ag.Parameter(np.array([2.0, -3.0, 0.4], dtype=np.float32), name="w")
        p.latent = True
        q = ag.Parameter(np.array([2.0], dtype=np.float32), name="b")
        ag.clip_latent_weights([p, q])
        assert np.abs(p.values).max() < 1.0
        assert p.values[2] == np.float32(0.4)
        assert q.values[0] == np.float32(2.0)


class TestPixelShuffle:
    def test_four_channels_to_2x2(self):
        x = ag.Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        y = ag.pixel_shuffle(x, 2).values
        assert y.shape == (1, 1, 2, 2)
        assert sorted(y.reshape(-1).tolist()) == [1.0, 2.0, 3.0, 4.0]

    def test_unshuffle_inverts_bit_exactly(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((2, 8, 3, 5))
        y = ag.pixel_unshuffle(ag.pixel_shuffle(ag.Tensor(x), 2), 2).values
        assert np.array_equal(x, y)

    def test_sum_preserved(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((1, 12, 4, 4))
        assert ag.pixel_shuffle(ag.Tensor(x), 2).values.sum() == pytest.approx(x.sum())

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            ag.pixel_shuffle(ag.Tensor(np.zeros((1, 6, 2, 2))), 2)


class TestDeterminismAndCheckpoint:
    def test_identical_seeds_identical_losses(self):
        def run():
            rng = np.random.default_rng(42)
            x = ag.Tensor(rng.standard_normal((4, 8)).astype(np.float32))
            w = ag.Tensor(rng.standard_normal((8, 3)).astype(np.float32), requires_grad=True)
            return ag.tsum(ag.softmax(ag.matmul(x, w), axis=-1)).values.tobytes()

        assert run() == run()

    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        class Net(ag.Module):
            def __init__(self):
                super().__init__()
                self.w = ag.Parameter(np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32))
                self.bn = ag.BatchNorm(3)

        net = Net().finalize_names()
        net.bn.set_buffer("running_mean", np.array([1.0, 2.0, 3.0], dtype=np.float32))
        path = tmp_path / "model.ckpt.npz"
        ag.save_checkpoint(path, net, digest="abcd1234")
        net2 = Net().finalize_names()
        meta = ag.load_checkpoint(path, net2)
        assert meta["config_digest"] == "abcd1234"
        assert np.array_equal(net.w.values, net2.w.values)
        assert np.array_equal(net2.bn.running_mean, np.array([1.0, 2.0, 3.0], dtype=np.float32))

    def test_checkpoint_digest_mismatch_raises(self, tmp_path):
        class Net(ag.Module):
            def __init__(self):
                super().__init__()
                self.w = ag.Parameter(np.zeros(2, dtype=np.float32))

        net = Net().finalize_names()
        path = tmp_path / "m.npz"
        ag.save_checkpoint(path, net, digest="aaaa")
        with pytest.raises(ValueError, match="digest"):
            ag.load_checkpoint(path, net, expect_digest="bbbb")
