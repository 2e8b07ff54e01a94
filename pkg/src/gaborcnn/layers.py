"""Layer objects with a uniform forward/backward contract.

Every layer caches what its backward pass needs during forward; backward
before forward is an error. parameters() returns stable (value, grad)
array pairs -- the same ndarray objects across calls -- so optimizers can
hold references. Gradients are written (not accumulated) on each backward.
"""

import numpy as np

from . import gabor, tensor
from .errors import ShapeError

_HE_STD = lambda fan_in: np.sqrt(2.0 / fan_in)  # noqa: E731


class Layer:
    """Base layer. Subclasses implement forward/backward; parameter-free
    layers inherit the empty parameters()."""

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def parameters(self):
        return []

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise ShapeError(f"{type(self).__name__}.backward called before forward")


class GaborConv(Layer):
    """Convolution whose kernels are synthesized from learnable Gabor
    parameters on every forward pass (never cached across steps).

    Learnables: 4 * c_out * c_in Gabor scalars + c_out biases. The k*k
    kernel pixels are derived values and never exposed as parameters.
    """

    def __init__(self, param_set, geom, need_grad_input=True):
        if param_set.kernel_size != geom.kernel:
            raise ShapeError(
                f"param set kernel {param_set.kernel_size} != geometry {geom.kernel}"
            )
        self.param_set = param_set
        self.geom = geom
        self.need_grad_input = need_grad_input
        self.bias = np.zeros(param_set.c_out)
        self.grad_omega = np.zeros_like(param_set.omega)
        self.grad_theta = np.zeros_like(param_set.theta)
        self.grad_psi = np.zeros_like(param_set.psi)
        self.grad_sigma = np.zeros_like(param_set.sigma)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def forward(self, x, training=False):
        x = tensor.as_tensor4(x, "input")
        if x.shape[1] != self.param_set.c_in:
            raise ShapeError(
                f"input has {x.shape[1]} channels, GaborConv expects "
                f"{self.param_set.c_in}"
            )
        kernels = gabor.make_kernels(self.param_set)
        out, cols = tensor.conv2d_forward_cols(x, kernels, self.bias, self.geom)
        self._cache = (x, kernels, cols)
        return out

    def backward(self, grad_out):
        self._require_cache()
        x, kernels, cols = self._cache
        grad_input, grad_k, grad_b = tensor.conv2d_backward(
            x, kernels, self.geom, grad_out,
            need_grad_input=self.need_grad_input, cols=cols,
        )
        dw, dt, dp, ds = gabor.make_kernels_grads(self.param_set)
        # chain rule: contract pixel gradients against each parameter's
        # per-pixel sensitivity
        self.grad_omega[...] = (grad_k * dw).sum(axis=(2, 3))
        self.grad_theta[...] = (grad_k * dt).sum(axis=(2, 3))
        self.grad_psi[...] = (grad_k * dp).sum(axis=(2, 3))
        self.grad_sigma[...] = (grad_k * ds).sum(axis=(2, 3))
        self.grad_bias[...] = grad_b
        return grad_input

    def parameters(self):
        ps = self.param_set
        return [
            (ps.omega, self.grad_omega),
            (ps.theta, self.grad_theta),
            (ps.psi, self.grad_psi),
            (ps.sigma, self.grad_sigma),
            (self.bias, self.grad_bias),
        ]

    def materialize_kernels(self):
        return gabor.make_kernels(self.param_set)


class Conv(Layer):
    """Standard learnable-kernel convolution, He-initialized."""

    def __init__(self, c_in, c_out, geom, rng=None, need_grad_input=True):
        self.geom = geom
        k = geom.kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernels = rng.normal(0.0, _HE_STD(c_in * k * k), size=(c_out, c_in, k, k))
        self.bias = np.zeros(c_out)
        self.grad_kernels = np.zeros_like(self.kernels)
        self.grad_bias = np.zeros_like(self.bias)
        self.need_grad_input = need_grad_input
        self._cache = None

    def forward(self, x, training=False):
        x = tensor.as_tensor4(x, "input")
        out, cols = tensor.conv2d_forward_cols(x, self.kernels, self.bias, self.geom)
        self._cache = (x, cols)
        return out

    def backward(self, grad_out):
        self._require_cache()
        x, cols = self._cache
        grad_input, grad_k, grad_b = tensor.conv2d_backward(
            x, self.kernels, self.geom, grad_out,
            need_grad_input=self.need_grad_input, cols=cols,
        )
        self.grad_kernels[...] = grad_k
        self.grad_bias[...] = grad_b
        return grad_input

    def parameters(self):
        return [(self.kernels, self.grad_kernels), (self.bias, self.grad_bias)]

    def materialize_kernels(self):
        return self.kernels


class ReLU(Layer):
    def forward(self, x, training=False):
        self._cache = x
        return tensor.relu_forward(x)

    def backward(self, grad_out):
        self._require_cache()
        return tensor.relu_backward(self._cache, grad_out)


class MaxPool(Layer):
    def __init__(self, window, stride):
        self.window = window
        self.stride = stride
        self._cache = None

    def forward(self, x, training=False):
        out, argmax = tensor.maxpool2d(x, self.window, self.stride)
        self._cache = (x.shape, argmax)
        return out

    def backward(self, grad_out):
        self._require_cache()
        shape, argmax = self._cache
        return tensor.maxpool2d_backward(grad_out, argmax, shape)


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-p) in training, identity
    at inference. The mask generator is reseeded per epoch by the trainer
    (set_rng) so resumed runs replay the same masks."""

    def __init__(self, p, rng=None):
        if not (0.0 <= p < 1.0):
            raise ShapeError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._cache = None

    def set_rng(self, rng):
        self.rng = rng

    def forward(self, x, training=False):
        self._cache = True  # marks forward-seen; mask None means identity
        if not training or self.p == 0.0:
            self._mask = None
            return np.asarray(x, dtype=np.float64)
        mask = (self.rng.random(np.shape(x)) >= self.p) / (1.0 - self.p)
        self._mask = mask
        return x * mask

    def backward(self, grad_out):
        self._require_cache()
        if self._mask is None:
            return np.asarray(grad_out, dtype=np.float64)
        return grad_out * self._mask


class Flatten(Layer):
    def forward(self, x, training=False):
        self._cache = np.shape(x)
        return tensor.flatten(x)

    def backward(self, grad_out):
        self._require_cache()
        return tensor.unflatten(grad_out, self._cache)


class Dense(Layer):
    """Fully connected y = x W^T + b on (n, features) inputs."""

    def __init__(self, in_features, out_features, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = rng.normal(0.0, _HE_STD(in_features), size=(out_features, in_features))
        self.bias = np.zeros(out_features)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"dense expects (n, {self.weight.shape[1]}), got {x.shape}"
            )
        self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        self._require_cache()
        x = self._cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        self.grad_weight[...] = grad_out.T @ x
        self.grad_bias[...] = grad_out.sum(axis=0)
        return grad_out @ self.weight

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


class SoftmaxCrossEntropy:
    """Fused softmax + mean cross-entropy head.

    forward(logits, labels) -> scalar loss; backward() -> grad_logits =
    (softmax - onehot) / batch. Log-sum-exp with max subtraction for
    stability.
    """

    def __init__(self):
        self._cache = None

    def forward(self, logits, labels):
        logits = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels)
        if logits.ndim != 2:
            raise ShapeError(f"logits must be (n, classes), got {logits.shape}")
        n, k = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
        if labels.min() < 0 or labels.max() >= k:
            raise ShapeError("label out of range")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self._cache = (np.exp(log_probs), labels)
        return -log_probs[np.arange(n), labels].mean()

    def backward(self):
        if self._cache is None:
            raise ShapeError("SoftmaxCrossEntropy.backward called before forward")
        probs, labels = self._cache
        n = probs.shape[0]
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return grad / n

    def probabilities(self):
        if self._cache is None:
            raise ShapeError("no cached probabilities")
        return self._cache[0]


def gabor_param_count(c_out, c_in):
    """Learnable scalars of a GaborConv layer: 4 per slice + bias."""
    return 4 * c_out * c_in + c_out


def conv_param_count(c_out, c_in, k):
    """Learnable scalars of a standard conv layer."""
    return k * k * c_out * c_in + c_out
