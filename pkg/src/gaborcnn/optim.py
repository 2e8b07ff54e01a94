"""Parameter update rules: Adam (bias-corrected, eps outside the root)
and plain SGD, plus the projection that keeps Gabor sigma/omega positive
after every step.
"""

import numpy as np

from .errors import NumericError, ShapeError
from .gabor import OMEGA_MIN, SIGMA_MIN


def _check_grads(params):
    for i, (p, g) in enumerate(params):
        if p.shape != g.shape:
            raise ShapeError(
                f"param {i}: grad shape {g.shape} != param shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter tensor {i}")


class Adam:
    """Adam over a fixed list of (value, grad) array pairs.

    Updates values in place: m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2,
    p <- p - lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p, _ in self.params]
        self.v = [np.zeros_like(p) for p, _ in self.params]

    def step(self):
        _check_grads(self.params)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(self.params):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self):
        """Named state arrays for checkpointing; t as a 1-element array."""
        out = {"optim/t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"optim/{i}/m"] = self.m[i]
            out[f"optim/{i}/v"] = self.v[i]
        return out

    def load_state_tensors(self, tensors):
        self.t = int(tensors["optim/t"][0])
        for i in range(len(self.params)):
            m, v = tensors[f"optim/{i}/m"], tensors[f"optim/{i}/v"]
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise ShapeError(f"optimizer state {i} shape mismatch")
            self.m[i] = m.copy()
            self.v[i] = v.copy()


class SGD:
    """Plain stochastic gradient descent baseline: p <- p - lr * g."""

    def __init__(self, params, lr=0.01):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self):
        _check_grads(self.params)
        self.t += 1
        for p, g in self.params:
            p -= self.lr * g

    def state_tensors(self):
        return {"optim/t": np.array([float(self.t)])}

    def load_state_tensors(self, tensors):
        self.t = int(tensors["optim/t"][0])


def sgd_step(params, grads, lr):
    """Functional single step over parallel lists of arrays."""
    pairs = list(zip(params, grads))
    _check_grads(pairs)
    for p, g in pairs:
        p -= lr * g
    return params


def project_gabor_constraints(param_set):
    """Clamp sigma and omega to their floors in place; theta/psi untouched.

    Idempotent; runs after every optimizer step so no other code ever
    observes invalid parameters.
    """
    np.maximum(param_set.sigma, SIGMA_MIN, out=param_set.sigma)
    np.maximum(param_set.omega, OMEGA_MIN, out=param_set.omega)
    return param_set
