"""Numerical primitives shared by every attack.

Tensors are plain float64 numpy arrays. Images are laid out channels x height
x width with values in [0, 255]; batches carry an extra leading axis.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advtransfer.errors import InvalidArgument

PIXEL_MAX = 255.0
BLOCK = 8


def as_tensor(x, name="tensor"):
    """Convert to a float64 array and reject NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return arr


def gaussian_kernel(size, sigma):
    """Normalized ``size x size`` Gaussian kernel centered on the middle entry."""
    if int(size) != size or size < 1 or size % 2 == 0:
        raise InvalidArgument(f"kernel size must be an odd positive integer, got {size}")
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    g = gaussian_kernel_1d(size, sigma)
    return np.outer(g, g)


def gaussian_kernel_1d(size, sigma):
    half = size // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return g / g.sum()


def convolve2d_same(field, kernel):
    """Same-size correlation of the last two axes of ``field`` with ``kernel``.

    Values outside the grid are treated as zero. Leading axes of ``field`` are
    carried through unchanged.
    """
    field = as_tensor(field, "field")
    kernel = as_tensor(kernel, "kernel")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise InvalidArgument(f"kernel must be square with odd extent, got {kernel.shape}")
    if field.ndim < 2:
        raise InvalidArgument("field must have at least two axes")
    k = kernel.shape[0]
    h, w = field.shape[-2:]
    if k > 2 * min(h, w) + 1:
        raise InvalidArgument(f"kernel extent {k} too large for {h}x{w} field")
    half = k // 2
    pad = [(0, 0)] * (field.ndim - 2) + [(half, half), (half, half)]
    padded = np.pad(field, pad)
    windows = sliding_window_view(padded, (k, k), axis=(-2, -1))
    return np.einsum("...ij,ij->...", windows, kernel)


def _sample_positions(coords, extent):
    """Clamp coordinates to [0, extent-1]; return the lower node and fraction.

    The lower node is capped at extent-2 so the far edge is reached with
    fraction 1. ``inside`` is False where clamping was active.
    """
    clamped = np.clip(coords, 0.0, extent - 1.0)
    inside = (coords > 0.0) & (coords < extent - 1.0)
    lower = np.minimum(np.floor(clamped), max(extent - 2, 0)).astype(np.intp)
    frac = clamped - lower
    return lower, frac, inside


def bilinear_sample(image, u, v, channel):
    """Bilinearly interpolated value of ``image[channel]`` at row ``u``, column ``v``.

    Coordinates outside the image are clamped to its rectangle.
    """
    image = np.asarray(image, dtype=np.float64)
    plane = image[channel]
    h, w = plane.shape
    i0, fu, _ = _sample_positions(np.float64(u), h)
    j0, fv, _ = _sample_positions(np.float64(v), w)
    i1 = min(int(i0) + 1, h - 1)
    j1 = min(int(j0) + 1, w - 1)
    return float(
        (1 - fu) * (1 - fv) * plane[i0, j0]
        + (1 - fu) * fv * plane[i0, j1]
        + fu * (1 - fv) * plane[i1, j0]
        + fu * fv * plane[i1, j1]
    )


def bilinear_gather(images, rows, cols):
    """Vectorized bilinear sampling at per-pixel positions.

    ``images`` is (N, C, H, W); ``rows`` and ``cols`` are (N, H, W) sample
    coordinates shared by all channels. Returns the sampled (N, C, H, W)
    images together with the partial derivatives of every output value with
    respect to its row and column coordinate (zero where clamping is active).
    """
    n, c, h, w = images.shape
    i0, fu, in_u = _sample_positions(rows, h)
    j0, fv, in_v = _sample_positions(cols, w)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    flat = images.reshape(n, c, h * w)

    def take(ii, jj):
        idx = (ii * w + jj).reshape(n, 1, h * w)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(
            n, c, h, w
        )

    p00, p01, p10, p11 = take(i0, j0), take(i0, j1), take(i1, j0), take(i1, j1)
    fu_ = fu[:, None]
    fv_ = fv[:, None]
    out = (1 - fu_) * (1 - fv_) * p00 + (1 - fu_) * fv_ * p01 + fu_ * (1 - fv_) * p10 + fu_ * fv_ * p11
    d_row = ((1 - fv_) * (p10 - p00) + fv_ * (p11 - p01)) * in_u[:, None]
    d_col = ((1 - fu_) * (p01 - p00) + fu_ * (p11 - p10)) * in_v[:, None]
    return out, d_row, d_col


def dct_matrix(n=BLOCK):
    """Orthonormal DCT-II matrix: row u holds basis function u."""
    x = np.arange(n)
    u = np.arange(n)[:, None]
    mat = np.cos(np.pi * (2 * x + 1) * u / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT = dct_matrix()


def dct2_block(block):
    block = as_tensor(block, "block")
    if block.shape != (BLOCK, BLOCK):
        raise InvalidArgument(f"expected an 8x8 block, got {block.shape}")
    return _DCT @ block @ _DCT.T


def idct2_block(coeffs):
    coeffs = as_tensor(coeffs, "coeffs")
    if coeffs.shape != (BLOCK, BLOCK):
        raise InvalidArgument(f"expected an 8x8 block, got {coeffs.shape}")
    return _DCT.T @ coeffs @ _DCT


def _check_blocks(x):
    h, w = x.shape[-2:]
    if h % BLOCK or w % BLOCK:
        raise InvalidArgument(f"height and width must be divisible by 8, got {h}x{w}")


def blockwise_dct(x):
    """Apply the orthonormal 8x8 DCT to every block of the last two axes."""
    _check_blocks(x)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    blocks = x.reshape(lead + (h // BLOCK, BLOCK, w // BLOCK, BLOCK))
    out = np.einsum("ua,...iajb,vb->...iujv", _DCT, blocks, _DCT, optimize=True)
    return out.reshape(x.shape)


def blockwise_idct(c):
    _check_blocks(c)
    h, w = c.shape[-2:]
    lead = c.shape[:-2]
    blocks = c.reshape(lead + (h // BLOCK, BLOCK, w // BLOCK, BLOCK))
    out = np.einsum("ua,...iujv,vb->...iajb", _DCT, blocks, _DCT, optimize=True)
    return out.reshape(c.shape)
