"""Real Gabor function evaluation, kernel synthesis, analytic parameter
gradients, and the 40-filter (5 frequencies x 8 orientations) init bank.

Kernels live on an integer pixel grid centered at the kernel midpoint,
x increasing rightward (columns), y downward (rows):

    g(x, y) = exp(-(x'^2 + y'^2) / (2 sigma^2)) * cos(omega * x' + psi)
    x' =  x cos(theta) + y sin(theta)
    y' = -x sin(theta) + y cos(theta)

Hand-derived partials, each verified against finite differences in the
test suite (E = envelope, C = cos(omega x' + psi), S = sin(omega x' + psi)):

    dg/dpsi   = -E S
    dg/domega = -E S x'
    dg/dsigma =  E C (x'^2 + y'^2) / sigma^3
    dg/dtheta = -E S omega y'      (envelope term vanishes: x'^2 + y'^2
                                    is rotation-invariant)
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SIGMA_MIN = 1e-3
OMEGA_MIN = 1e-3

BANK_FREQUENCIES = 5
BANK_ORIENTATIONS = 8
BANK_SIZE = BANK_FREQUENCIES * BANK_ORIENTATIONS


@dataclass
class GaborParams:
    """One kernel slice's learnable scalars."""

    omega: float  # spatial frequency, rad/pixel, > 0
    theta: float  # orientation, rad (periodic, never wrapped)
    psi: float  # phase, rad (periodic, never wrapped)
    sigma: float  # Gaussian envelope width, pixels, > 0

    def __post_init__(self):
        if not self.omega > 0.0:
            raise ShapeError(f"omega must be > 0, got {self.omega}")
        if not self.sigma > 0.0:
            raise ShapeError(f"sigma must be > 0, got {self.sigma}")


@dataclass
class GaborParamSet:
    """Dense (c_out, c_in) table of Gabor parameters for one conv layer.

    Each field is a float64 array of shape (c_out, c_in); the quadruple at
    [o, i] generates the (o, i) kernel slice.
    """

    omega: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    kernel_size: int

    def __post_init__(self):
        shape = self.omega.shape
        for name in ("theta", "psi", "sigma"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {shape}")
        _check_kernel_size(self.kernel_size)

    @property
    def c_out(self):
        return self.omega.shape[0]

    @property
    def c_in(self):
        return self.omega.shape[1]

    def slice_params(self, o, i):
        return GaborParams(
            float(self.omega[o, i]),
            float(self.theta[o, i]),
            float(self.psi[o, i]),
            float(self.sigma[o, i]),
        )


def _check_kernel_size(k):
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"kernel size must be odd and >= 1, got {k}")


def eval_gabor(x, y, p):
    """Real Gabor value at pixel offset (x, y) from the kernel center."""
    xr = x * math.cos(p.theta) + y * math.sin(p.theta)
    yr = -x * math.sin(p.theta) + y * math.cos(p.theta)
    envelope = math.exp(-(xr * xr + yr * yr) / (2.0 * p.sigma * p.sigma))
    return envelope * math.cos(p.omega * xr + p.psi)


def _grid(k):
    half = (k - 1) // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    return x, y


def make_kernel(p, k):
    """Synthesize a k x k kernel; kernel[r, c] = g(c - mid, r - mid)."""
    _check_kernel_size(k)
    x, y = _grid(k)
    xr = x * np.cos(p.theta) + y * np.sin(p.theta)
    yr = -x * np.sin(p.theta) + y * np.cos(p.theta)
    envelope = np.exp(-(xr**2 + yr**2) / (2.0 * p.sigma**2))
    return envelope * np.cos(p.omega * xr + p.psi)


def kernel_param_grads(p, k):
    """Exact partials of every kernel pixel w.r.t. (omega, theta, psi, sigma).

    Returns four k x k matrices in that order.
    """
    _check_kernel_size(k)
    x, y = _grid(k)
    xr = x * np.cos(p.theta) + y * np.sin(p.theta)
    yr = -x * np.sin(p.theta) + y * np.cos(p.theta)
    r2 = xr**2 + yr**2
    envelope = np.exp(-r2 / (2.0 * p.sigma**2))
    phase = p.omega * xr + p.psi
    ec = envelope * np.cos(phase)
    es = envelope * np.sin(phase)

    d_omega = -es * xr
    d_theta = -es * p.omega * yr
    d_psi = -es
    d_sigma = ec * r2 / p.sigma**3
    return d_omega, d_theta, d_psi, d_sigma


def make_kernels(ps):
    """Vectorized synthesis of the full (c_out, c_in, k, k) kernel tensor."""
    x, y = _grid(ps.kernel_size)
    x, y = x[None, None], y[None, None]
    theta = ps.theta[:, :, None, None]
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    envelope = np.exp(-(xr**2 + yr**2) / (2.0 * ps.sigma[:, :, None, None] ** 2))
    return envelope * np.cos(ps.omega[:, :, None, None] * xr + ps.psi[:, :, None, None])


def make_kernels_grads(ps):
    """Vectorized partials, four (c_out, c_in, k, k) tensors
    (d/domega, d/dtheta, d/dpsi, d/dsigma)."""
    x, y = _grid(ps.kernel_size)
    x, y = x[None, None], y[None, None]
    omega = ps.omega[:, :, None, None]
    theta = ps.theta[:, :, None, None]
    psi = ps.psi[:, :, None, None]
    sigma = ps.sigma[:, :, None, None]
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    r2 = xr**2 + yr**2
    envelope = np.exp(-r2 / (2.0 * sigma**2))
    phase = omega * xr + psi
    ec = envelope * np.cos(phase)
    es = envelope * np.sin(phase)
    return -es * xr, -es * omega * yr, -es, ec * r2 / sigma**3


def build_filter_bank():
    """The 40 (omega, theta) init pairs: omega_n = pi/2 * sqrt(2)^-(n-1)
    for n = 1..5, theta_m = pi/8 * (m-1) for m = 1..8, n-major order."""
    entries = []
    for n in range(1, BANK_FREQUENCIES + 1):
        omega = (math.pi / 2.0) * math.sqrt(2.0) ** (-(n - 1))
        for m in range(1, BANK_ORIENTATIONS + 1):
            entries.append((omega, math.pi / 8.0 * (m - 1)))
    return entries


def init_param_set(c_out, c_in, k, rng_seed):
    """Initialize a parameter table from the filter bank.

    Flat slot index (out-major) cycles through the 40 bank entries;
    sigma = pi/omega exactly; psi ~ U(0, pi) from the seeded generator.
    """
    if c_out < 1 or c_in < 1:
        raise ShapeError(f"need c_out, c_in >= 1, got {c_out}, {c_in}")
    _check_kernel_size(k)
    bank = build_filter_bank()
    rng = np.random.default_rng(rng_seed)

    omega = np.empty((c_out, c_in))
    theta = np.empty((c_out, c_in))
    for o in range(c_out):
        for i in range(c_in):
            w, t = bank[(o * c_in + i) % BANK_SIZE]
            omega[o, i], theta[o, i] = w, t
    psi = rng.uniform(0.0, math.pi, size=(c_out, c_in))
    sigma = math.pi / omega
    return GaborParamSet(omega, theta, psi, sigma, kernel_size=k)
