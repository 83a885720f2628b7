"""Tests for the tensor/tape core: forward examples against hand or naive
oracles, backward against central finite differences, AdamW against a
hand-evaluated update."""

import numpy as np
import pytest

from pano4d import autodiff as ad
from pano4d.autodiff import Tensor


def naive_matmul(a, b):
    """Independent triple-loop multiply used as the matmul oracle."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestForward:
    def test_softmax_uniform_row(self):
        x = Tensor(np.zeros((1, 4)))
        y = ad.softmax(x)
        np.testing.assert_allclose(y.data, np.full((1, 4), 0.25))

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-12)

    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_softmax_rows_stochastic(self):
        rng = np.random.default_rng(1)
        x = rng.normal(scale=10.0, size=(16, 9))
        y = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(16), atol=1e-9)
        assert np.all(y >= 0)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        r1 = ad.matmul(ad.softmax(Tensor(a)), Tensor(b)).data
        r2 = ad.matmul(ad.softmax(Tensor(a)), Tensor(b)).data
        assert r1.tobytes() == r2.tobytes()

    def test_shape_mismatch_names_op(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_no_nan_inf_on_finite_inputs(self):
        big = Tensor(np.array([[1e4, -1e4, 0.0]]))
        assert np.all(np.isfinite(ad.softmax(big).data))
        assert np.all(np.isfinite(ad.sigmoid(big).data))


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.mul(x, x))

    def test_accumulation_without_reset(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        ad.backward(ad.tsum(x))
        ad.backward(ad.tsum(x))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_gradient_linearity(self):
        # backward of a sum of sub-losses equals the sum of their backwards
        rng = np.random.default_rng(3)
        for trial in range(5):
            v = rng.normal(size=(4, 3))
            x = Tensor(v.copy(), requires_grad=True)
            la = ad.tsum(ad.mul(x, x))
            lb = ad.tmean(ad.sigmoid(x))
            ad.backward(ad.add(la, lb))
            combined = x.grad.copy()

            x.zero_grad()
            ad.backward(ad.tsum(ad.mul(x, x)))
            ga = x.grad.copy()
            x.zero_grad()
            ad.backward(ad.tmean(ad.sigmoid(x)))
            gb = x.grad.copy()
            np.testing.assert_allclose(combined, ga + gb, rtol=1e-12)

    def test_softmax_bce_composite_fd(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        t = (rng.random((3, 5)) > 0.5).astype(float)

        def loss():
            return ad.bce_with_logits(ad.softmax(x), t)

        assert ad.finite_diff_check(loss, x, 1e-5) < 1e-4

    def test_linear_loss_fd_near_exact(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        w = np.array([2.0, 3.0, -1.0])

        def loss():
            return ad.tsum(ad.mul(x, w))

        assert ad.finite_diff_check(loss, x, 1e-5) < 1e-10


FD_CASES = [
    ("add", lambda x: ad.tsum(ad.add(x, 1.5))),
    ("mul", lambda x: ad.tsum(ad.mul(x, ad.sigmoid(x)))),
    ("div", lambda x: ad.tsum(ad.div(x, ad.add(ad.mul(x, x), 2.0)))),
    ("matmul", lambda x: ad.tsum(ad.matmul(x, ad.transpose(x)))),
    ("softmax", lambda x: ad.tsum(ad.mul(ad.softmax(x), np.arange(x.shape[1], dtype=float)))),
    ("log_softmax", lambda x: ad.tmean(ad.log_softmax(x))),
    ("sigmoid", lambda x: ad.tsum(ad.sigmoid(x))),
    ("relu", lambda x: ad.tsum(ad.relu(ad.add(x, 0.3)))),
    ("sin", lambda x: ad.tsum(ad.sin(x))),
    ("cos", lambda x: ad.tmean(ad.cos(x))),
    ("exp", lambda x: ad.tmean(ad.exp(x))),
    ("concat", lambda x: ad.tsum(ad.mul(ad.concat([x, x], axis=0), 0.5))),
    ("take", lambda x: ad.tsum(ad.take(x, [0, 0, 1]))),
    ("slice", lambda x: ad.tsum(ad.slice_rows(x, 1, 3))),
    ("segment_mean", lambda x: ad.tsum(ad.segment_mean(x, np.arange(x.shape[0]) % 2, 2))),
    ("scale_rows", lambda x: ad.tsum(ad.scale_rows(x, np.arange(1.0, x.shape[0] + 1)))),
    ("mean", lambda x: ad.tmean(x, axis=0) if x.shape[0] > 1 else ad.tmean(x)),
]


@pytest.mark.parametrize("name,build", FD_CASES, ids=[c[0] for c in FD_CASES])
def test_primitive_fd(name, build):
    """Every differentiable primitive passes the finite-difference oracle on
    randomized shapes."""
    rng = np.random.default_rng(hash(name) % 2**32)
    for shape in [(4, 6), (9, 3)]:
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        loss = lambda: ad.tmean(build(x)) if build(x).data.ndim else build(x)
        err = ad.finite_diff_check(loss, x, 1e-5)
        assert err < 1e-4, f"{name} shape {shape}: fd error {err}"


def test_layer_norm_fd():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    gain = Tensor(rng.normal(size=8), requires_grad=True)
    bias = Tensor(rng.normal(size=8), requires_grad=True)
    weights = rng.normal(size=(5, 8))

    def loss():
        return ad.tsum(ad.mul(ad.layer_norm(x, gain, bias), weights))

    for p in (x, gain, bias):
        assert ad.finite_diff_check(loss, p, 1e-6) < 1e-4


def test_randomized_graph_fd_large_shapes():
    """Composite graph on shapes up to 32x32."""
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(32, 32)), requires_grad=True)
    w = Tensor(rng.normal(size=(32, 32)) / 6.0, requires_grad=True)

    def loss():
        h = ad.relu(ad.matmul(x, w))
        return ad.tmean(ad.mul(ad.softmax(h), rng2))

    rng2 = np.random.default_rng(12).normal(size=(32, 32))
    # only probe the weight (32x32 coords is still fast enough)
    assert ad.finite_diff_check(loss, w, 1e-5) < 1e-4


class TestAdamW:
    def test_zero_grad_zero_decay_no_change(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = ad.AdamW([({"p": p}, 0.1)])
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_single_step_hand_value(self):
        # hand evaluation: m=0.1, v=0.001, m_hat=1, v_hat=1
        # p <- 1.0 - 0.1 * 1 / (1 + 1e-8)
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = ad.AdamW([({"p": p}, 0.1)], betas=(0.9, 0.999), eps=1e-8)
        p.grad = np.array(1.0)
        opt.step()
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert p.data == pytest.approx(expected, abs=1e-15)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array(2.0), requires_grad=True)
        opt = ad.AdamW([({"p": p}, 0.1)], weight_decay=0.5)
        p.grad = np.array(0.0)
        opt.step()
        # pure decay: p - lr*wd*p = 2.0 - 0.1*0.5*2.0
        assert p.data == pytest.approx(1.9, abs=1e-15)

    def test_nonfinite_gradient_rejected(self):
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = ad.AdamW([({"p": p}, 0.1)])
        p.grad = np.array(np.nan)
        with pytest.raises(ValueError, match="non-finite"):
            opt.step()

    def test_identical_seeded_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            opt = ad.AdamW([({"p": p}, 0.05)])
            traj = []
            for _ in range(10):
                opt.zero_grad()
                ad.backward(ad.tsum(ad.mul(p, ad.sigmoid(p))))
                opt.step()
                traj.append(p.data.copy())
            return np.stack(traj)

        assert run().tobytes() == run().tobytes()


def test_step_decay_factor():
    assert ad.step_decay_factor(0, [30, 60]) == 1.0
    assert ad.step_decay_factor(30, [30, 60]) == pytest.approx(0.1)
    assert ad.step_decay_factor(75, [30, 60]) == pytest.approx(0.01)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    params = {
        "a.w": Tensor(rng.normal(size=(3, 4))),
        "a.b": Tensor(rng.normal(size=4)),
        "alpha": Tensor(np.array(1.0)),
    }
    base = str(tmp_path / "ckpt")
    ad.save_params(params, base)
    loaded = ad.load_params(base)
    assert set(loaded) == set(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name].data)
        assert loaded[name].shape == params[name].data.shape
