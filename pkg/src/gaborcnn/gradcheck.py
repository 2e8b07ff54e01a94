"""Finite-difference verification of every analytic gradient in the
package: layer primitives, the four Gabor parameter gradients, and the
end-to-end chain through a small network into the loss.

Central differences with eps=1e-5 (1e-6 for the per-pixel Gabor kernel
partials) are the ground truth; the hard gate is max relative error 1e-4.
"""

import zlib

import numpy as np

from . import tensor
from .errors import ShapeError
from .gabor import GaborParams, init_param_set, kernel_param_grads, make_kernel
from .layers import Dense, GaborConv, SoftmaxCrossEntropy
from .tensor import ConvGeometry
from .train import build_network

TOLERANCE = 1e-4


def rel_error(a, b, floor=1e-3):
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps near-zero true gradients from amplifying the O(1e-10)
    noise inherent to central differences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f w.r.t. every element of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def _random_cotangent(rng, shape):
    return rng.normal(size=shape)


def check_conv(rng):
    n, c_in, c_out = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    h = w = int(rng.integers(max(k, 4), 9))
    geom = ConvGeometry(k, stride, pad)
    x = rng.normal(size=(n, c_in, h, w))
    kern = rng.normal(size=(c_out, c_in, k, k))
    bias = rng.normal(size=c_out)
    ct = _random_cotangent(rng, tensor.conv2d_forward(x, kern, bias, geom).shape)

    def loss_of(x_, kern_, bias_):
        return float(np.sum(ct * tensor.conv2d_forward(x_, kern_, bias_, geom)))

    gx, gk, gb = tensor.conv2d_backward(x, kern, geom, ct)
    errs = [
        rel_error(gx, numeric_grad(lambda v: loss_of(v, kern, bias), x.copy())),
        rel_error(gk, numeric_grad(lambda v: loss_of(x, v, bias), kern.copy())),
        rel_error(gb, numeric_grad(lambda v: loss_of(x, kern, v), bias.copy())),
    ]
    return max(errs)


def check_maxpool(rng):
    n, c = 1, int(rng.integers(1, 3))
    h = w = int(rng.integers(4, 9))
    window = int(rng.integers(2, 4))
    stride = window
    if window > h:
        window = stride = 2
    x = rng.normal(size=(n, c, h, w))
    out, argmax = tensor.maxpool2d(x, window, stride)
    ct = _random_cotangent(rng, out.shape)

    def loss_of(x_):
        o, _ = tensor.maxpool2d(x_, window, stride)
        return float(np.sum(ct * o))

    gx = tensor.maxpool2d_backward(ct, argmax, x.shape)
    return rel_error(gx, numeric_grad(loss_of, x.copy()))


def check_relu(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.1  # keep sample points away from the kink
    ct = _random_cotangent(rng, x.shape)

    def loss_of(x_):
        return float(np.sum(ct * tensor.relu_forward(x_)))

    return rel_error(tensor.relu_backward(x, ct), numeric_grad(loss_of, x.copy()))


def check_dense(rng):
    n_in, n_out, batch = 8, 4, 3
    layer = Dense(n_in, n_out, rng=np.random.default_rng(rng.integers(2**32)))
    x = rng.normal(size=(batch, n_in))
    ct = _random_cotangent(rng, (batch, n_out))

    def loss_with(w, b, xv):
        layer.weight[...] = w
        layer.bias[...] = b
        return float(np.sum(ct * layer.forward(xv)))

    w0, b0 = layer.weight.copy(), layer.bias.copy()
    layer.forward(x)
    gx = layer.backward(ct)
    gw, gb = layer.grad_weight.copy(), layer.grad_bias.copy()
    errs = [
        rel_error(gw, numeric_grad(lambda v: loss_with(v, b0, x), w0.copy())),
        rel_error(gb, numeric_grad(lambda v: loss_with(w0, v, x), b0.copy())),
        rel_error(gx, numeric_grad(lambda v: loss_with(w0, b0, v), x.copy())),
    ]
    layer.weight[...] = w0
    layer.bias[...] = b0
    return max(errs)


def check_softmax_ce(rng):
    batch, k = 4, 3
    logits = rng.normal(size=(batch, k))
    labels = rng.integers(0, k, size=batch)
    head = SoftmaxCrossEntropy()

    def loss_of(lg):
        return float(SoftmaxCrossEntropy().forward(lg, labels))

    head.forward(logits, labels)
    return rel_error(head.backward(), numeric_grad(loss_of, logits.copy()))


def check_gabor_kernel(rng):
    """Per-pixel Gabor parameter partials vs central differences."""
    k = int(rng.choice([3, 5, 7, 11]))
    p = GaborParams(
        omega=float(rng.uniform(0.3, 1.6)),
        theta=float(rng.uniform(0.0, np.pi)),
        psi=float(rng.uniform(0.0, np.pi)),
        sigma=float(rng.uniform(1.0, 4.0)),
    )
    analytic = kernel_param_grads(p, k)
    eps = 1e-6
    errs = []
    for name, grad in zip(("omega", "theta", "psi", "sigma"), analytic):
        def kernel_at(delta, _name=name):
            q = GaborParams(
                p.omega + (delta if _name == "omega" else 0.0),
                p.theta + (delta if _name == "theta" else 0.0),
                p.psi + (delta if _name == "psi" else 0.0),
                p.sigma + (delta if _name == "sigma" else 0.0),
            )
            return make_kernel(q, k)

        fd = (kernel_at(eps) - kernel_at(-eps)) / (2.0 * eps)
        errs.append(rel_error(grad, fd, floor=1e-5))
    return max(errs)


def check_gabor_layer(rng):
    """End-to-end chain: loss gradient of every Gabor scalar through the
    layer (kernel synthesis + convolution) vs finite differences."""
    c_in = int(rng.integers(1, 3))
    c_out = int(rng.integers(1, 5))
    k = int(rng.choice([3, 5, 11]))
    geom = ConvGeometry(k, 1, k // 2)
    ps = init_param_set(c_out, c_in, k, int(rng.integers(2**32)))
    layer = GaborConv(ps, geom)
    x = rng.normal(size=(1, c_in, 8, 8))
    out = layer.forward(x)
    ct = _random_cotangent(rng, out.shape)
    gx = layer.backward(ct)
    grad_bias = layer.grad_bias.copy()

    errs = [
        rel_error(gx, numeric_grad(
            lambda v: float(np.sum(ct * layer.forward(v))), x.copy()))
    ]

    param_grads = {
        "omega": (ps.omega, layer.grad_omega.copy()),
        "theta": (ps.theta, layer.grad_theta.copy()),
        "psi": (ps.psi, layer.grad_psi.copy()),
        "sigma": (ps.sigma, layer.grad_sigma.copy()),
        "bias": (layer.bias, grad_bias),
    }
    for arr, analytic in param_grads.values():
        def loss_of(v, _arr=arr):
            saved = _arr.copy()
            _arr[...] = v
            out_v = layer.forward(x)
            _arr[...] = saved
            return float(np.sum(ct * out_v))

        errs.append(rel_error(analytic, numeric_grad(loss_of, arr.copy())))
    return max(errs)


def check_toy_network(rng):
    """Every parameter of a small GaborConv -> ReLU -> MaxPool -> Dense ->
    SoftmaxCE net against finite differences of the loss."""
    seed = int(rng.integers(2**32))
    spec = (
        "gabor_conv(out=2, k=5, stride=1, pad=2); relu; "
        "maxpool(window=2, stride=2); flatten; dense(out=num_classes); softmax_ce"
    )
    net = build_network(spec, (1, 12, 12), 2, seed)
    # the first layer still needs its input gradient checked end to end
    net.layers[0].need_grad_input = True
    x = rng.normal(size=(2, 1, 12, 12))
    labels = rng.integers(0, 2, size=2)

    def loss_now():
        logits = net.forward_logits(x, training=False)
        return float(net.loss.forward(logits, labels))

    loss_now()
    net.backward_from_loss()
    analytic = [(p, g.copy()) for p, g in net.parameters()]

    max_err = 0.0
    for p, g in analytic:
        def loss_of(v, _p=p):
            saved = _p.copy()
            _p[...] = v
            val = loss_now()
            _p[...] = saved
            return val

        max_err = max(max_err, rel_error(g, numeric_grad(loss_of, p.copy())))
    return max_err


CHECKS = {
    "conv": (check_conv, 20),
    "maxpool": (check_maxpool, 20),
    "relu": (check_relu, 20),
    "dense": (check_dense, 20),
    "softmax_ce": (check_softmax_ce, 20),
    "gabor_kernel": (check_gabor_kernel, 50),
    "gabor_layer": (check_gabor_layer, 20),
    "toy_network": (check_toy_network, 3),
}


def run(seed=0, layer=None, corrupt=None):
    """Run the suite; returns a list of (name, max relative error).

    layer filters checks by substring; corrupt (test hook) maps a check
    name to an artificial error injected into its result.
    """
    results = []
    for name, (fn, repeats) in CHECKS.items():
        if layer is not None and layer not in name:
            continue
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(repeats):
            worst = max(worst, fn(rng))
        if corrupt and name in corrupt:
            worst += corrupt[name]
        results.append((name, worst))
    if not results:
        raise ShapeError(f"no gradient checks match layer filter {layer!r}")
    return results


def all_passed(results, tolerance=TOLERANCE):
    return all(err <= tolerance for _, err in results)
