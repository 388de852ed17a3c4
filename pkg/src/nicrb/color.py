"""Colour-space conversions: BT.601 YCbCr and sRGB/D65 CIELAB.

Array versions work on (..., 3, H, W) arrays; the ``*_t`` versions build
differentiable graphs for use inside attack losses.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])
YCBCR_INV = np.linalg.inv(YCBCR)

RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
WHITE = RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


def rgb_to_ycbcr(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,...jhw->...ihw", YCBCR, x) + YCBCR_OFFSET[:, None, None]


def ycbcr_to_rgb(y: np.ndarray) -> np.ndarray:
    return np.einsum("ij,...jhw->...ihw", YCBCR_INV, y - YCBCR_OFFSET[:, None, None])


def luma_t(x) -> ad.Tensor:
    """Y channel of BT.601 full-range YCbCr, keeps a singleton channel axis."""
    return ad.channel_mix(x, YCBCR[:1])


def srgb_decode(c: np.ndarray) -> np.ndarray:
    # odd extension below zero so unclipped out-of-gamut values round-trip
    a = np.abs(c)
    return np.sign(c) * np.where(a <= 0.04045, a / 12.92, ((np.maximum(a, 0.04045) + 0.055) / 1.055) ** 2.4)


def srgb_encode(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.maximum(c, 0.0031308) ** (1 / 2.4) - 0.055)


def _srgb_encode_grad(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.0031308, 12.92, 1.055 / 2.4 * np.maximum(c, 0.0031308) ** (1 / 2.4 - 1))


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _finv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def _finv_grad(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, 3 * t ** 2, 3 * _DELTA ** 2)


def rgb_to_lab(x: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] (channel axis -3) to CIELAB under D65."""
    lin = srgb_decode(np.asarray(x, dtype=np.float64))
    xyz = np.einsum("ij,...jhw->...ihw", RGB_TO_XYZ, lin) / WHITE[:, None, None]
    fx, fy, fz = _f(xyz[..., 0, :, :]), _f(xyz[..., 1, :, :]), _f(xyz[..., 2, :, :])
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-3)


def lab_to_rgb(lab: np.ndarray, clip: bool = True) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0, :, :] + 16) / 116
    fx = fy + lab[..., 1, :, :] / 500
    fz = fy - lab[..., 2, :, :] / 200
    xyz = np.stack([_finv(fx), _finv(fy), _finv(fz)], axis=-3) * WHITE[:, None, None]
    lin = np.einsum("ij,...jhw->...ihw", XYZ_TO_RGB, xyz)
    if clip:
        lin = np.clip(lin, 0.0, 1.0)
        return srgb_encode(lin)
    return np.sign(lin) * srgb_encode(np.abs(lin))


def lab_to_rgb_t(lightness: np.ndarray, a, b) -> ad.Tensor:
    """Differentiable Lab -> sRGB with a constant L channel.

    ``lightness`` has shape (N, 1, H, W); ``a`` and ``b`` are tensors of the
    same shape. Out-of-gamut values are clipped to [0, 1].
    """
    fy = (lightness + 16.0) / 116.0
    fx = ad.add(fy, ad.mul(a, 1 / 500))
    fz = ad.sub(fy, ad.mul(b, 1 / 200))
    fin = lambda t: ad.elementwise(t, _finv, _finv_grad, "lab_finv")  # noqa: E731
    xyz = ad.concat([fin(fx) * WHITE[0], ad.Tensor(_finv(fy) * WHITE[1]), fin(fz) * WHITE[2]], axis=1)
    lin = ad.clamp(ad.channel_mix(xyz, XYZ_TO_RGB), 0.0, 1.0)
    return ad.elementwise(lin, srgb_encode, _srgb_encode_grad, "srgb_encode")
