"""Differentiable JPEG coefficient map and the attack that bounds changes to it.

The map is RGB -> YCbCr, level shift by -128, orthonormal 8x8 block DCT per
channel, division by the quantization table. There is no rounding and no
chroma subsampling, so the map is affine and exactly invertible.
"""

import numpy as np

from advtransfer.attacks import _finish, _per_example, _promote, _unbatch, targeted_grad_fn
from advtransfer.errors import InvalidArgument
from advtransfer.geometry import Family, PerturbationBudget, clamp_pixels, project_linf, random_init
from advtransfer.tensor import BLOCK, blockwise_dct, blockwise_idct

DEFAULT_QUALITY = 75

# ITU-T T.81 Annex K tables (quality 50 baseline)
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# JFIF full-range RGB -> YCbCr
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
LEVEL_SHIFT = 128.0


def scaled_table(table, quality):
    """libjpeg quality scaling of a base table, entries clipped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise InvalidArgument(f"quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((table * scale + 50.0) / 100.0), 1.0, 255.0)


def quant_tables(quality=DEFAULT_QUALITY):
    """(3, 8, 8) divisors for the Y, Cb and Cr channels."""
    luma = scaled_table(LUMA_TABLE, quality)
    chroma = scaled_table(CHROMA_TABLE, quality)
    return np.stack([luma, chroma, chroma])


def _tiled(q, h, w):
    return np.tile(q, (1, h // BLOCK, w // BLOCK))


def _check(x):
    if x.ndim < 3 or x.shape[-3] != 3:
        raise InvalidArgument(f"expected 3-channel images, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % BLOCK or w % BLOCK:
        raise InvalidArgument(f"image size {h}x{w} is not divisible by 8")


def _color(x, mat):
    return np.einsum("ij,...jhw->...ihw", mat, x)


def jpeg_forward_linear(x, quality=DEFAULT_QUALITY):
    """Linear part of the coefficient map (the map minus its constant term)."""
    x = np.asarray(x, dtype=np.float64)
    _check(x)
    h, w = x.shape[-2:]
    return blockwise_dct(_color(x, RGB_TO_YCBCR)) / _tiled(quant_tables(quality), h, w)


def jpeg_forward(x, quality=DEFAULT_QUALITY):
    x = np.asarray(x, dtype=np.float64)
    _check(x)
    h, w = x.shape[-2:]
    ycc = _color(x, RGB_TO_YCBCR) + (YCBCR_OFFSET - LEVEL_SHIFT)[:, None, None]
    return blockwise_dct(ycc) / _tiled(quant_tables(quality), h, w)


def jpeg_inverse_linear(z, quality=DEFAULT_QUALITY):
    """Inverse of :func:`jpeg_forward_linear`."""
    z = np.asarray(z, dtype=np.float64)
    _check(z)
    h, w = z.shape[-2:]
    return _color(blockwise_idct(z * _tiled(quant_tables(quality), h, w)), YCBCR_TO_RGB)


def jpeg_linear_adjoint(b, quality=DEFAULT_QUALITY):
    """Transpose of :func:`jpeg_forward_linear`."""
    b = np.asarray(b, dtype=np.float64)
    _check(b)
    h, w = b.shape[-2:]
    return _color(blockwise_idct(b / _tiled(quant_tables(quality), h, w)), RGB_TO_YCBCR.T)


def jpeg_decode_adjoint(g, quality=DEFAULT_QUALITY):
    """Transpose of :func:`jpeg_inverse_linear`: pulls an image gradient back to coefficients."""
    g = np.asarray(g, dtype=np.float64)
    _check(g)
    h, w = g.shape[-2:]
    return blockwise_dct(_color(g, YCBCR_TO_RGB.T)) * _tiled(quant_tables(quality), h, w)


def jpeg_decode(z, quality=DEFAULT_QUALITY):
    """Exact inverse of :func:`jpeg_forward`, without clamping."""
    z = np.asarray(z, dtype=np.float64)
    _check(z)
    h, w = z.shape[-2:]
    ycc = blockwise_idct(z * _tiled(quant_tables(quality), h, w)) - (YCBCR_OFFSET - LEVEL_SHIFT)[:, None, None]
    return _color(ycc, YCBCR_TO_RGB)


def jpeg_right_inverse(z, quality=DEFAULT_QUALITY):
    """Decode coefficients to an image and clamp it to [0, 255]."""
    return clamp_pixels(jpeg_decode(z, quality))


def jpeg_attack(model, x, y_target, budget, rng, quality=DEFAULT_QUALITY):
    """PGD on the coefficients z = jpeg_forward(x') inside an Linf ball.

    The iterate is kept as a coefficient offset dz around jpeg_forward(x);
    since decoding is affine, x' = x + jpeg_inverse_linear(dz). Gradients are
    taken at the unclamped decode and pulled back through the decode's
    transpose; the output is clamped once at the end. ``residual`` is the
    coefficient-space Linf distance of the unclamped decode and
    ``aux["clamp_slack"]`` the extra distance introduced by clamping.
    """
    if Family(budget.family) != Family.JPEG:
        raise InvalidArgument(f"jpeg_attack needs a jpeg budget, got {budget.family}")
    x, y_target, eps, single = _promote(x, y_target, budget.epsilon)
    _check(x)
    b = PerturbationBudget(Family.JPEG, eps, budget.steps)
    step = _per_example(b.step_size, x.ndim)
    grad_x = targeted_grad_fn(model, y_target)
    dz = random_init(b, x.shape, rng)
    for _ in range(budget.steps):
        gx = grad_x(x + jpeg_inverse_linear(dz, quality))
        gz = jpeg_decode_adjoint(gx, quality)
        dz = project_linf(dz - step * np.sign(gz), eps)
    pre = x + jpeg_inverse_linear(dz, quality)
    x_adv = clamp_pixels(pre)
    z_clean = jpeg_forward(x, quality)
    axes = (1, 2, 3)
    residual = np.abs(jpeg_forward(pre, quality) - z_clean).max(axis=axes)
    post = np.abs(jpeg_forward(x_adv, quality) - z_clean).max(axis=axes)
    aux = {"clamp_slack": np.maximum(post - residual, 0.0), "coeff_offset": dz}
    result = _finish(model, x, x_adv, y_target, residual, aux)
    return _unbatch(result) if single else result


def constants_report(quality=DEFAULT_QUALITY):
    """Plain-text dump of the quantization tables and color constants."""
    q = quant_tables(quality)
    lines = [f"quality = {quality}", "rgb_to_ycbcr ="]
    lines += ["  " + " ".join(f"{v: .6f}" for v in row) for row in RGB_TO_YCBCR]
    lines.append("ycbcr_offset = " + " ".join(f"{v:g}" for v in YCBCR_OFFSET))
    lines.append(f"level_shift = {LEVEL_SHIFT:g}")
    for name, table in zip(("luma", "chroma"), (q[0], q[1])):
        lines.append(f"{name}_table =")
        lines += ["  " + " ".join(f"{int(v):3d}" for v in row) for row in table]
    return "\n".join(lines) + "\n"
