import math

import numpy as np
import pytest

from gaborcnn import gabor, tensor
from gaborcnn.errors import ShapeError
from gaborcnn.gabor import GaborParamSet
from gaborcnn.gradcheck import numeric_grad, rel_error
from gaborcnn.layers import (
    Conv,
    Dense,
    Dropout,
    GaborConv,
    SoftmaxCrossEntropy,
    conv_param_count,
    gabor_param_count,
)
from gaborcnn.tensor import ConvGeometry


def _param_set(c_out, c_in, k, seed=0):
    return gabor.init_param_set(c_out, c_in, k, rng_seed=seed)


def test_gabor_forward_k1_zero_phase_sums_channels():
    shape = (2, 3)
    ps = GaborParamSet(
        omega=np.full(shape, 1.0),
        theta=np.zeros(shape),
        psi=np.zeros(shape),
        sigma=np.full(shape, 2.0),
        kernel_size=1,
    )
    layer = GaborConv(ps, ConvGeometry(1))
    layer.bias[...] = [0.5, -0.25]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 4))
    out = layer.forward(x)
    channel_sum = x.sum(axis=1, keepdims=True)
    expected = np.concatenate([channel_sum + 0.5, channel_sum - 0.25], axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gabor_forward_deterministic():
    layer = GaborConv(_param_set(3, 1, 5), ConvGeometry(5, 1, 2))
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8))
    np.testing.assert_array_equal(layer.forward(x), layer.forward(x))


def test_gabor_forward_matches_naive_composition():
    ps = _param_set(3, 1, 5, seed=9)
    layer = GaborConv(ps, ConvGeometry(5, 1, 2))
    x = np.random.default_rng(2).normal(size=(1, 1, 8, 8))
    out = layer.forward(x)
    oracle = tensor.conv2d_naive(x, gabor.make_kernels(ps), layer.bias,
                                 ConvGeometry(5, 1, 2))
    assert np.abs(out - oracle).max() <= 1e-10


def test_gabor_forward_channel_mismatch():
    layer = GaborConv(_param_set(2, 2, 3), ConvGeometry(3))
    with pytest.raises(ShapeError):
        layer.forward(np.ones((1, 3, 6, 6)))


def test_gabor_backward_before_forward_rejected():
    layer = GaborConv(_param_set(1, 1, 3), ConvGeometry(3))
    with pytest.raises(ShapeError):
        layer.backward(np.ones((1, 1, 4, 4)))


def test_gabor_backward_zero_cotangent():
    layer = GaborConv(_param_set(2, 1, 3), ConvGeometry(3, 1, 1))
    x = np.random.default_rng(3).normal(size=(1, 1, 6, 6))
    out = layer.forward(x)
    gx = layer.backward(np.zeros_like(out))
    assert not gx.any()
    for _, g in layer.parameters():
        assert not g.any()


def test_gabor_backward_k1_psi_chain_rule():
    # k=1 kernel is cos(psi); dL/dpsi = -sin(psi) * dL/dK
    psi0 = 0.8
    ps = GaborParamSet(
        omega=np.full((1, 1), 1.0),
        theta=np.zeros((1, 1)),
        psi=np.full((1, 1), psi0),
        sigma=np.full((1, 1), 2.0),
        kernel_size=1,
    )
    layer = GaborConv(ps, ConvGeometry(1))
    x = np.random.default_rng(4).normal(size=(1, 1, 3, 3))
    out = layer.forward(x)
    ct = np.random.default_rng(5).normal(size=out.shape)
    layer.backward(ct)
    dL_dK = float((ct * x).sum())
    assert layer.grad_psi[0, 0] == pytest.approx(-math.sin(psi0) * dL_dK, rel=1e-12)


@pytest.mark.parametrize("k", [3, 5, 11])
def test_gabor_layer_end_to_end_finite_differences(k):
    rng = np.random.default_rng(k)
    ps = _param_set(int(rng.integers(1, 5)), int(rng.integers(1, 3)), k,
                    seed=int(rng.integers(1000)))
    layer = GaborConv(ps, ConvGeometry(k, 1, k // 2))
    x = rng.normal(size=(1, ps.c_in, 8, 8))
    out = layer.forward(x)
    ct = rng.normal(size=out.shape)
    layer.backward(ct)
    analytic = {
        "omega": (ps.omega, layer.grad_omega.copy()),
        "theta": (ps.theta, layer.grad_theta.copy()),
        "psi": (ps.psi, layer.grad_psi.copy()),
        "sigma": (ps.sigma, layer.grad_sigma.copy()),
    }
    for name, (arr, grad) in analytic.items():
        def loss(v, _arr=arr):
            saved = _arr.copy()
            _arr[...] = v
            val = float(np.sum(ct * layer.forward(x)))
            _arr[...] = saved
            return val

        assert rel_error(grad, numeric_grad(loss, arr.copy())) <= 1e-4, name


def test_frozen_gabor_equals_standard_conv():
    ps = _param_set(4, 2, 5, seed=11)
    geom = ConvGeometry(5, 1, 2)
    glayer = GaborConv(ps, geom)
    glayer.bias[...] = np.random.default_rng(6).normal(size=4)

    clayer = Conv(2, 4, geom)
    clayer.kernels[...] = gabor.make_kernels(ps)
    clayer.bias[...] = glayer.bias

    x = np.random.default_rng(7).normal(size=(2, 2, 9, 9))
    out_g = glayer.forward(x)
    out_c = clayer.forward(x)
    assert np.abs(out_g - out_c).max() <= 1e-12

    ct = np.random.default_rng(8).normal(size=out_g.shape)
    gx_g = glayer.backward(ct)
    gx_c = clayer.backward(ct)
    assert np.abs(gx_g - gx_c).max() <= 1e-12


def test_parameter_count_formulas():
    ps = _param_set(40, 1, 9)
    glayer = GaborConv(ps, ConvGeometry(9))
    n_gabor = sum(p.size for p, _ in glayer.parameters())
    assert n_gabor == gabor_param_count(40, 1) == 4 * 40 * 1 + 40

    clayer = Conv(1, 40, ConvGeometry(9))
    n_conv = sum(p.size for p, _ in clayer.parameters())
    assert n_conv == conv_param_count(40, 1, 9) == 81 * 40 + 40
    # weight-only per-slice reduction for k=9
    assert (81 * 40) / (4 * 40) == 20.25


def test_parameters_identity_stable():
    layer = Dense(4, 3)
    first = layer.parameters()
    second = layer.parameters()
    for (p1, g1), (p2, g2) in zip(first, second):
        assert p1 is p2 and g1 is g2


def test_dense_gradients():
    rng = np.random.default_rng(9)
    layer = Dense(8, 4, rng=rng)
    x = rng.normal(size=(3, 8))
    ct = rng.normal(size=(3, 4))
    layer.forward(x)
    gx = layer.backward(ct)

    def loss_wb(w, b, xv):
        saved_w, saved_b = layer.weight.copy(), layer.bias.copy()
        layer.weight[...] = w
        layer.bias[...] = b
        val = float(np.sum(ct * layer.forward(xv)))
        layer.weight[...] = saved_w
        layer.bias[...] = saved_b
        return val

    w0, b0 = layer.weight.copy(), layer.bias.copy()
    assert rel_error(layer.grad_weight,
                     numeric_grad(lambda v: loss_wb(v, b0, x), w0.copy())) <= 1e-6
    assert rel_error(layer.grad_bias,
                     numeric_grad(lambda v: loss_wb(w0, v, x), b0.copy())) <= 1e-6
    assert rel_error(gx,
                     numeric_grad(lambda v: loss_wb(w0, b0, v), x.copy())) <= 1e-6


def test_softmax_ce_uniform_logits():
    for k in (2, 3, 5):
        head = SoftmaxCrossEntropy()
        logits = np.zeros((4, k))
        labels = np.arange(4) % k
        assert head.forward(logits, labels) == pytest.approx(math.log(k), rel=1e-12)
        assert np.abs(head.probabilities().sum(axis=1) - 1.0).max() <= 1e-12


def test_softmax_ce_backward_form():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    head = SoftmaxCrossEntropy()
    head.forward(logits, labels)
    grad = head.backward()
    probs = head.probabilities()
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(grad, (probs - onehot) / 5, atol=1e-14)


def test_dropout_p0_identity():
    layer = Dropout(0.0)
    x = np.random.default_rng(11).normal(size=(2, 8))
    np.testing.assert_array_equal(layer.forward(x, training=True), x)
    np.testing.assert_array_equal(layer.forward(x, training=False), x)


def test_dropout_invalid_p():
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(ShapeError):
            Dropout(p)


def test_dropout_inference_identity_and_backward():
    layer = Dropout(0.4, rng=np.random.default_rng(12))
    x = np.random.default_rng(13).normal(size=(3, 6))
    np.testing.assert_array_equal(layer.forward(x, training=False), x)
    grad = np.ones_like(x)
    np.testing.assert_array_equal(layer.backward(grad), grad)

    out = layer.forward(x, training=True)
    survivors = out != 0
    np.testing.assert_allclose(out[survivors], (x / 0.6)[survivors], atol=1e-12)
    back = layer.backward(grad)
    np.testing.assert_allclose(back[survivors], 1 / 0.6, atol=1e-12)
    assert not back[~survivors].any()


def test_dropout_expectation_matches_inference():
    # training-mode mean over many masks ~ inference output
    p = 0.3
    layer = Dropout(p, rng=np.random.default_rng(14))
    x = np.random.default_rng(15).normal(size=(1, 16)) + 2.0
    draws = 10_000
    acc = np.zeros_like(x)
    for _ in range(draws):
        acc += layer.forward(x, training=True)
    mean = acc / draws
    # per-element std of the estimator: |x| * sqrt(p/(1-p)) / sqrt(draws)
    stderr = np.abs(x) * math.sqrt(p / (1 - p)) / math.sqrt(draws)
    assert (np.abs(mean - x) <= 3 * stderr + 1e-12).all()
