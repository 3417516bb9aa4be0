"""Fidelity metrics: PSNR and a differentiable multi-scale SSIM.

MS-SSIM follows the standard 5-scale recipe (11x11 Gaussian window,
sigma 1.5, the usual scale weights); on images too small to support all
five scales the trailing scales are dropped and the weights
renormalised, since an 11-tap window no longer fits. Implemented on the
autodiff tensors so it can serve as the perceptual term of the training
objective.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
_C1 = (_K1 * 1.0) ** 2
_C2 = (_K2 * 1.0) ** 2
_CS_FLOOR = 1e-4


def _gaussian_taps(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA
                   ) -> np.ndarray:
    xs = np.arange(size, dtype=T.DTYPE) - (size - 1) / 2.0
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


_TAPS = _gaussian_taps()


def _crop_even(x: Tensor) -> Tensor:
    c, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return x
    he, we = h - h % 2, w - w % 2

    def bw(g):
        full = np.zeros((c, h, w), dtype=T.DTYPE)
        full[:, :he, :we] = g
        return (full,)
    return T.make_op(x.data[:, :he, :we].copy(), (x,), bw)


def _ssim_terms(x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    """Mean contrast-structure term and mean luminance*cs term."""
    mu_x = T.blur2d(x, _TAPS)
    mu_y = T.blur2d(y, _TAPS)
    xx = T.blur2d(x * x, _TAPS) - mu_x * mu_x
    yy = T.blur2d(y * y, _TAPS) - mu_y * mu_y
    xy = T.blur2d(x * y, _TAPS) - mu_x * mu_y
    cs_map = (xy * 2.0 + _C2) / (xx + yy + _C2)
    lum_map = (mu_x * mu_y * 2.0 + _C1) / (mu_x * mu_x + mu_y * mu_y + _C1)
    return T.reduce_mean(cs_map), T.reduce_mean(lum_map * cs_map)


def usable_scales(height: int, width: int, requested: int = 5) -> int:
    scales = 1
    size = min(height, width)
    while scales < requested and size // 2 >= WINDOW_SIZE:
        scales += 1
        size //= 2
    return scales


def ms_ssim(x: Tensor | np.ndarray, y: Tensor | np.ndarray,
            scales: int = 5) -> Tensor:
    """Multi-scale structural similarity in [0, 1]; 1 means identical."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.DTYPE))
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=T.DTYPE))
    if x.shape != y.shape:
        raise T.ShapeError("ms_ssim operands must share a shape")
    _, h, w = x.shape
    scales = usable_scales(h, w, scales)
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    result = None
    for level in range(scales):
        cs, full = _ssim_terms(x, y)
        term = full if level == scales - 1 else cs
        term = T.clamp(term, lo=_CS_FLOOR)
        powered = T.exp(T.log(term) * weights[level])
        result = powered if result is None else result * powered
        if level < scales - 1:
            x = T.avgpool2x2(_crop_even(x))
            y = T.avgpool2x2(_crop_even(y))
    return result


def psnr(x: np.ndarray, x_hat: np.ndarray, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] scale, capped."""
    x = np.asarray(x, dtype=T.DTYPE)
    x_hat = np.asarray(x_hat, dtype=T.DTYPE)
    if x.shape != x_hat.shape:
        raise T.ShapeError("psnr operands must share a shape")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * float(np.log10(mse)))
