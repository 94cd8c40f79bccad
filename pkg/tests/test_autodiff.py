import numpy as np
import pytest

from vqtsgen import autodiff as ad
from vqtsgen.errors import ConfigurationError

from gradcheck import max_relative_error

GRAD_TOL = 1e-6


def t64(rng, *shape, lo=-1.0, hi=1.0, requires_grad=True):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad, dtype=np.float64)


def t64_away_from(rng, *shape, gap=0.05):
    # keep values clear of the activation kink so central differences are valid
    vals = rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return ad.Tensor(vals, requires_grad=True, dtype=np.float64)


# -- conv1d forward contract ---------------------------------------------------

def test_conv1d_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    x = ad.Tensor(np.zeros((2, 3, 16)))
    w = ad.Tensor(rng.normal(size=(4, 3, 5)))
    b = ad.Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
    y = ad.conv1d(x, w, b, padding=2)
    assert np.allclose(y.data, b.data[None, :, None])


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(1)
    x = ad.Tensor(rng.normal(size=(1, 2, 10)))
    w = ad.Tensor(np.eye(2).reshape(2, 2, 1))
    y = ad.conv1d(x, w)
    assert np.allclose(y.data, x.data)


def test_conv1d_hand_example():
    x = ad.Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    w = ad.Tensor(np.array([[[1.0, 0.0, -1.0]]]))
    y = ad.conv1d(x, w)
    assert y.data.shape == (1, 1, 1)
    assert np.isclose(y.data[0, 0, 0], -2.0)


@pytest.mark.parametrize("stride,dilation,padding,k", [(1, 1, 0, 3), (2, 1, 1, 4), (1, 2, 2, 3), (3, 2, 4, 5)])
def test_conv1d_output_length_formula(stride, dilation, padding, k):
    L = 23
    x = ad.Tensor(np.zeros((1, 1, L)))
    w = ad.Tensor(np.zeros((1, 1, k)))
    y = ad.conv1d(x, w, stride=stride, dilation=dilation, padding=padding)
    expect = (L + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    assert y.data.shape[-1] == expect


def test_conv1d_linear_in_input():
    rng = np.random.default_rng(2)
    x1 = rng.normal(size=(2, 3, 20)).astype(np.float32)
    x2 = rng.normal(size=(2, 3, 20)).astype(np.float32)
    w = ad.Tensor(rng.normal(size=(4, 3, 3)).astype(np.float32))
    a, b = 0.7, -1.3
    y_mix = ad.conv1d(ad.Tensor(a * x1 + b * x2), w, padding=1).data
    y_sep = a * ad.conv1d(ad.Tensor(x1), w, padding=1).data + b * ad.conv1d(ad.Tensor(x2), w, padding=1).data
    assert np.allclose(y_mix, y_sep, atol=1e-5)


def test_conv1d_channel_mismatch_raises():
    x = ad.Tensor(np.zeros((1, 3, 8)))
    w = ad.Tensor(np.zeros((2, 4, 3)))
    with pytest.raises(ConfigurationError):
        ad.conv1d(x, w)


def test_conv1d_span_too_large_raises():
    x = ad.Tensor(np.zeros((1, 1, 4)))
    w = ad.Tensor(np.zeros((1, 1, 3)))
    with pytest.raises(ConfigurationError):
        ad.conv1d(x, w, dilation=4)


# -- gradient checks against the finite-difference oracle ----------------------

def test_grad_conv1d():
    rng = np.random.default_rng(10)
    for i in range(10):
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        x = t64(rng, 2, 2, 12)
        w = t64(rng, 3, 2, 3)
        b = t64(rng, 3)
        def build():
            y = ad.conv1d(x, w, b, stride=stride, dilation=dilation, padding=padding)
            return ad.tsum(ad.mul(y, y))
        assert max_relative_error(build, [x, w, b]) < GRAD_TOL


def test_grad_conv1d_cl():
    rng = np.random.default_rng(30)
    for _ in range(10):
        stride = int(rng.integers(1, 3))
        left, right = int(rng.integers(0, 3)), int(rng.integers(0, 3))
        x = t64(rng, 2, 12, 2)
        w = t64(rng, 3, 2, 4)
        b = t64(rng, 4)
        def build():
            y = ad.conv1d_cl(x, w, b, stride=stride, padding=(left, right))
            return ad.tsum(ad.mul(y, y))
        assert max_relative_error(build, [x, w, b]) < GRAD_TOL


def test_conv1d_cl_matches_conv1d():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(2, 3, 16)).astype(np.float32)          # [B, C, L]
    w = rng.normal(size=(4, 3, 5)).astype(np.float32)           # [O, C, k]
    y_ref = ad.conv1d(ad.Tensor(x), ad.Tensor(w), stride=2, padding=2).data
    y_cl = ad.conv1d_cl(ad.Tensor(x.transpose(0, 2, 1)), ad.Tensor(w.transpose(2, 1, 0)),
                        stride=2, padding=(2, 2)).data
    assert np.allclose(y_ref, y_cl.transpose(0, 2, 1), atol=1e-5)


def test_grad_upsample2():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = t64(rng, 2, 3, 7)
        def build():
            y = ad.upsample2(x)
            return ad.tsum(ad.mul(y, y))
        assert max_relative_error(build, [x]) < GRAD_TOL
        x2 = t64(rng, 2, 5, 3)
        def build_axis1():
            y = ad.upsample2(x2, axis=1)
            return ad.tsum(ad.mul(y, y))
        assert max_relative_error(build_axis1, [x2]) < GRAD_TOL


def test_grad_linear():
    rng = np.random.default_rng(12)
    for _ in range(10):
        x = t64(rng, 3, 4, 5)
        w = t64(rng, 5, 6)
        b = t64(rng, 6)
        def build():
            return ad.tsum(ad.mul(ad.linear(x, w, b), ad.linear(x, w, b)))
        assert max_relative_error(build, [x, w, b]) < GRAD_TOL


def test_grad_softmax():
    rng = np.random.default_rng(13)
    for _ in range(10):
        x = t64(rng, 4, 6)
        c = rng.normal(size=(4, 6))
        def build():
            return ad.tsum(ad.mul(ad.softmax(x), ad.Tensor(c, dtype=np.float64)))
        assert max_relative_error(build, [x]) < GRAD_TOL


def test_grad_log_softmax():
    rng = np.random.default_rng(14)
    for _ in range(10):
        x = t64(rng, 3, 5)
        c = rng.normal(size=(3, 5))
        def build():
            return ad.tsum(ad.mul(ad.log_softmax(x), ad.Tensor(c, dtype=np.float64)))
        assert max_relative_error(build, [x]) < GRAD_TOL


def test_grad_layer_norm():
    rng = np.random.default_rng(15)
    for _ in range(10):
        x = t64(rng, 2, 3, 8)
        g = t64(rng, 8, lo=0.5, hi=1.5)
        b = t64(rng, 8)
        c = rng.normal(size=(2, 3, 8))
        def build():
            return ad.tsum(ad.mul(ad.layer_norm(x, g, b), ad.Tensor(c, dtype=np.float64)))
        assert max_relative_error(build, [x, g, b]) < GRAD_TOL


def test_grad_attention():
    rng = np.random.default_rng(16)
    for _ in range(10):
        x = t64(rng, 2, 5, 8)
        wq = t64(rng, 8, 8)
        wk = t64(rng, 8, 8)
        wv = t64(rng, 8, 8)
        wo = t64(rng, 8, 8)
        c = rng.normal(size=(2, 5, 8))
        def build():
            y = ad.attention(x, wq, wk, wv, wo, num_heads=2)
            return ad.tsum(ad.mul(y, ad.Tensor(c, dtype=np.float64)))
        assert max_relative_error(build, [x, wq, wk, wv, wo]) < GRAD_TOL


def test_grad_relu_gelu():
    rng = np.random.default_rng(17)
    for _ in range(10):
        x = t64_away_from(rng, 3, 7)
        def build_relu():
            return ad.tsum(ad.mul(ad.relu(x), ad.relu(x)))
        assert max_relative_error(build_relu, [x]) < GRAD_TOL
        y = t64(rng, 3, 7)
        def build_gelu():
            return ad.tsum(ad.mul(ad.gelu(y), ad.gelu(y)))
        assert max_relative_error(build_gelu, [y]) < GRAD_TOL


def test_grad_snake():
    rng = np.random.default_rng(18)
    for _ in range(10):
        x = t64(rng, 2, 3, 6, lo=-2.0, hi=2.0)
        alpha = ad.Tensor(rng.uniform(0.3, 2.0, size=(1, 3, 1)), requires_grad=True, dtype=np.float64)
        def build():
            y = ad.snake(x, alpha)
            return ad.tsum(ad.mul(y, y))
        assert max_relative_error(build, [x, alpha]) < GRAD_TOL


def test_grad_cross_entropy():
    rng = np.random.default_rng(19)
    for _ in range(10):
        logits = t64(rng, 6, 5, lo=-2.0, hi=2.0)
        targets = rng.integers(0, 5, size=6)
        weights = rng.uniform(0.0, 1.0, size=6)
        weights[0] = 0.0  # exercise fully-masked rows
        def build():
            return ad.cross_entropy(logits, targets, weights)
        assert max_relative_error(build, [logits]) < GRAD_TOL


def test_grad_losses():
    rng = np.random.default_rng(20)
    for _ in range(10):
        a = t64(rng, 3, 8)
        b = ad.Tensor(a.data + np.sign(rng.normal(size=(3, 8))) * rng.uniform(0.1, 1.0, size=(3, 8)),
                      requires_grad=True, dtype=np.float64)
        def build_l1():
            return ad.l1_loss(a, b)
        assert max_relative_error(build_l1, [a, b]) < GRAD_TOL
        def build_mse():
            return ad.mse_loss(a, b)
        assert max_relative_error(build_mse, [a, b]) < GRAD_TOL


def test_grad_embedding_and_misc():
    rng = np.random.default_rng(21)
    table = t64(rng, 7, 4)
    ids = rng.integers(0, 7, size=(3, 5))
    def build():
        y = ad.embedding(table, ids)
        return ad.tsum(ad.mul(y, y))
    assert max_relative_error(build, [table]) < GRAD_TOL
    x = t64(rng, 2, 6)
    def build_pad():
        y = ad.pad_right_edge(ad.pad_zeros(x, 1, 2), 3)
        return ad.tsum(ad.mul(y, y))
    assert max_relative_error(build_pad, [x]) < GRAD_TOL
    x3 = t64(rng, 2, 5, 2)
    def build_pad_axis1():
        y = ad.crop_to(ad.pad_right_edge(x3, 3, axis=1), 6, axis=1)
        return ad.tsum(ad.mul(y, y))
    assert max_relative_error(build_pad_axis1, [x3]) < GRAD_TOL


def test_grad_two_layer_conv_net():
    rng = np.random.default_rng(22)
    x = t64(rng, 2, 1, 16, requires_grad=False)
    w1 = t64(rng, 4, 1, 3)
    b1 = t64(rng, 4)
    w2 = t64(rng, 2, 4, 3)
    b2 = t64(rng, 2)
    target = ad.Tensor(rng.normal(size=(2, 2, 16)), dtype=np.float64)
    def build():
        h = ad.gelu(ad.conv1d(x, w1, b1, padding=1))
        y = ad.conv1d(h, w2, b2, padding=1)
        return ad.mse_loss(y, target)
    assert max_relative_error(build, [w1, b1, w2, b2]) < GRAD_TOL


# -- backward contract ----------------------------------------------------------

def test_backward_linear_loss_gives_ones():
    p = ad.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    ad.tsum(p).backward()
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_quadratic_loss_gives_param():
    p = ad.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    ad.mul(ad.tsum(ad.mul(p, p)), 0.5).backward()
    assert np.allclose(p.grad, p.data)


def test_backward_rejects_nonscalar():
    p = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(p, 2.0).backward()


def test_no_grad_blocks_recording():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(p, 3.0)
    assert not y.requires_grad and y._parents == ()


# -- softmax invariants -----------------------------------------------------------

def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(23)
    x = ad.Tensor(rng.normal(size=(50, 9)) * 10, dtype=np.float64)
    y = ad.softmax(x).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(y > 0)


# -- optimizer --------------------------------------------------------------------

def _param(vals):
    return ad.Tensor(np.asarray(vals, dtype=np.float64), requires_grad=True)


def test_adamw_zero_grad_no_decay_keeps_params():
    p = _param([1.0, -2.0, 3.0])
    opt = ad.AdamW({"p": p})
    p.grad = np.zeros(3)
    before = p.data.copy()
    opt.step(lr=0.1)
    assert np.array_equal(p.data, before)
    assert opt.step_count == 1


def test_adamw_decay_only_closed_form():
    p = _param([1.0, -2.0, 4.0])
    lam, lr = 0.1, 0.05
    opt = ad.AdamW({"p": p}, weight_decay=lam)
    p.grad = np.zeros(3)
    before = p.data.copy()
    opt.step(lr=lr)
    assert np.allclose(p.data, before * (1.0 - lr * lam), rtol=1e-12)


def test_adamw_first_step_is_signed_lr():
    p = _param([0.0, 0.0])
    opt = ad.AdamW({"p": p})
    g = np.array([0.3, -0.7])
    p.grad = g.copy()
    lr = 0.01
    opt.step(lr=lr)
    # bias-corrected first step: -lr * g/(|g| + eps) ~= -lr*sign(g)
    assert np.allclose(p.data, -lr * np.sign(g), atol=1e-6)


def test_adamw_shape_mismatch_raises():
    p = _param([1.0, 2.0])
    opt = ad.AdamW({"p": p})
    p.grad = np.zeros(3)
    with pytest.raises(ValueError):
        opt.step(lr=0.1)


# -- learning-rate schedule ----------------------------------------------------------

def test_lr_schedule_endpoints():
    sched = ad.LrSchedule(initial=0.005, final=0.0005, warmup_steps=100, total_steps=1000)
    assert ad.lr_at(sched, 0) == 0.0
    assert np.isclose(ad.lr_at(sched, 100), 0.005)
    assert np.isclose(ad.lr_at(sched, 1000), 0.0005)
    assert np.isclose(ad.lr_at(sched, 5000), 0.0005)


def test_lr_schedule_monotone_after_warmup():
    sched = ad.LrSchedule(initial=0.005, final=0.0005, warmup_steps=50, total_steps=500)
    rates = [ad.lr_at(sched, s) for s in range(50, 501)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_lr_schedule_rejects_negative_step():
    sched = ad.LrSchedule(0.005, 0.0005, 10, 100)
    with pytest.raises(ValueError):
        ad.lr_at(sched, -1)
