"""Elastic deformation attack.

A raw displacement field W (2 x H x W, in pixels) is smoothed by a Gaussian
kernel into V, and the image is resampled at (i + V0, j + V1) with bilinear
interpolation. PGD runs on W under a coordinatewise bound |W| <= eps.
"""

import functools

import numpy as np

from advtransfer.attacks import _finish, _per_example, _promote, _unbatch
from advtransfer.errors import InvalidArgument
from advtransfer.geometry import Family, PerturbationBudget, clamp_pixels, project_linf, random_init
from advtransfer.model import loss_and_input_gradient
from advtransfer.tensor import bilinear_gather, convolve2d_same, gaussian_kernel, gaussian_kernel_1d

KERNEL_SIZE = 25
KERNEL_SIGMA = 3.0


class GaussianSmoother:
    """Zero-padded same-size Gaussian smoothing of (..., H, W) fields.

    The normalized 2-D Gaussian is the outer product of normalized 1-D
    Gaussians, so the convolution is applied as banded matrices along rows
    and columns. ``adjoint`` is the transpose map.
    """

    def __init__(self, height, width, size=KERNEL_SIZE, sigma=KERNEL_SIGMA):
        self.height, self.width = height, width
        self.size, self.sigma = size, sigma
        self.kernel = gaussian_kernel(size, sigma)
        if size > 2 * min(height, width) + 1:
            raise InvalidArgument(f"kernel extent {size} too large for {height}x{width} field")
        g = gaussian_kernel_1d(size, sigma)
        self.rows = self._band(height, g)
        self.cols = self._band(width, g)

    @staticmethod
    def _band(n, g):
        half = len(g) // 2
        mat = np.zeros((n, n))
        for i in range(n):
            lo, hi = max(0, i - half), min(n, i + half + 1)
            mat[i, lo:hi] = g[lo - i + half : hi - i + half]
        return mat

    def __call__(self, field):
        return self.rows @ field @ self.cols.T

    def adjoint(self, grad):
        return self.rows.T @ grad @ self.cols

    def direct(self, field):
        """Reference path through the generic 2-D convolution."""
        return convolve2d_same(field, self.kernel)


@functools.lru_cache(maxsize=8)
def smoother_for(height, width, size=KERNEL_SIZE, sigma=KERNEL_SIGMA):
    return GaussianSmoother(height, width, size, sigma)


def _grid(h, w):
    return np.arange(h, dtype=np.float64)[:, None], np.arange(w, dtype=np.float64)[None, :]


def _warp(x, V):
    h, w = x.shape[-2:]
    ii, jj = _grid(h, w)
    return bilinear_gather(x, ii + V[:, 0], jj + V[:, 1])


def flow_warp(x, V):
    """Resample ``x`` at (i + V[0], j + V[1]) with edge-clamped bilinear interpolation."""
    x = np.asarray(x, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x, V = x[None], V[None]
    if V.shape != (x.shape[0], 2) + x.shape[2:]:
        raise InvalidArgument(f"flow shape {V.shape} does not match image shape {x.shape}")
    out = _warp(x, V)[0]
    return out[0] if single else out


def smooth_flow(W, smoother=None):
    W = np.asarray(W, dtype=np.float64)
    smoother = smoother or smoother_for(*W.shape[-2:])
    return smoother(W)


def flow_gradient(model, x, y_target, W, smoother=None):
    """Gradient of the targeted loss w.r.t. the raw field W.

    Chains the input gradient through the bilinear weights to V and then
    through the transpose of the smoothing.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x, W = x[None], W[None]
    if W.shape != (x.shape[0], 2) + x.shape[2:]:
        raise InvalidArgument(f"field shape {W.shape} does not match image shape {x.shape}")
    smoother = smoother or smoother_for(*x.shape[-2:])
    _, g = _loss_and_field_grad(model, x, np.broadcast_to(y_target, (len(x),)), W, smoother)
    return g[0] if single else g


def _loss_and_field_grad(model, x, y_target, W, smoother):
    V = smoother(W)
    warped, d_row, d_col = _warp(x, V)
    loss, gx, _ = loss_and_input_gradient(model, warped, y_target)
    gV = np.stack([(gx * d_row).sum(axis=1), (gx * d_col).sum(axis=1)], axis=1)
    return loss, smoother.adjoint(gV)


def elastic_attack(model, x, y_target, budget, rng, smoother=None):
    """Sign-gradient PGD on W with |W| <= eps; output is the warped, clamped image.

    ``residual`` is max |W|; ``aux["field"]`` holds W and ``aux["flow"]`` V.
    """
    if Family(budget.family) != Family.ELASTIC:
        raise InvalidArgument(f"elastic_attack needs an elastic budget, got {budget.family}")
    x, y_target, eps, single = _promote(x, y_target, budget.epsilon)
    n, _, h, w = x.shape
    smoother = smoother or smoother_for(h, w)
    b = PerturbationBudget(Family.ELASTIC, eps, budget.steps)
    step = _per_example(b.step_size, 4)
    W = random_init(b, (n, 2, h, w), rng)
    for _ in range(budget.steps):
        _, g = _loss_and_field_grad(model, x, y_target, W, smoother)
        W = project_linf(W - step * np.sign(g), eps)
    V = smoother(W)
    x_adv = clamp_pixels(_warp(x, V)[0])
    residual = np.abs(W).max(axis=(1, 2, 3))
    result = _finish(model, x, x_adv, y_target, residual, {"field": W, "flow": V})
    return _unbatch(result) if single else result
