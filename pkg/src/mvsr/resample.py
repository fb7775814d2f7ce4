"""Anti-aliased bicubic resampling and the sub-pixel losses built on it.

Downsampling by integer factor f uses a Catmull-Rom kernel stretched by f
(argument t/f, 2f taps per side), which moves the cutoff to the low-rate
Nyquist band. Both directions are separable and realized as constant
per-axis matrices, so the whole resampler is a pair of matmuls and stays
differentiable through the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor


class NonDivisibleExtentError(Exception):
    """Image extent not divisible by the resampling factor."""


class LambdaOutOfRangeError(Exception):
    """Loss mixing weight outside [0, 1]."""


@dataclass(frozen=True)
class ResampleConfig:
    kernel_a: float = -0.5
    factor: int = 2

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def cubic_kernel(t, a: float = -0.5):
    """Keys' piecewise-cubic kernel; a=-0.5 is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (a + 2.0) * t[near] ** 3 - (a + 3.0) * t[near] ** 2 + 1.0
    out[far] = a * (t[far] ** 3 - 5.0 * t[far] ** 2 + 8.0 * t[far] - 4.0)
    return out


def _reflect(idx: int, n: int) -> int:
    """Mirror an index into [0, n-1], edge pixel included in the mirror."""
    while idx < 0 or idx >= n:
        if idx < 0:
            idx = -1 - idx
        else:
            idx = 2 * n - 1 - idx
    return idx


@lru_cache(maxsize=64)
def _down_matrix(n: int, factor: int, kernel_a: float) -> np.ndarray:
    """(n//factor, n) row-stochastic resampling matrix for one axis."""
    n_out = n // factor
    m = np.zeros((n_out, n), dtype=np.float64)
    support = 2 * factor
    for i in range(n_out):
        center = (i + 0.5) * factor - 0.5
        j_lo = int(np.floor(center - support)) + 1
        j_hi = int(np.ceil(center + support)) - 1
        js = np.arange(j_lo, j_hi + 1)
        ws = cubic_kernel((js - center) / factor, kernel_a)
        for j, w in zip(js, ws):
            m[i, _reflect(int(j), n)] += w
        m[i, :] /= m[i, :].sum()
    return m


@lru_cache(maxsize=64)
def _up_matrix(n: int, factor: int, kernel_a: float) -> np.ndarray:
    """(n*factor, n) bicubic interpolation matrix for one axis."""
    n_out = n * factor
    m = np.zeros((n_out, n), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) / factor - 0.5
        j_lo = int(np.floor(center)) - 1
        js = np.arange(j_lo, j_lo + 4)
        ws = cubic_kernel(js - center, kernel_a)
        for j, w in zip(js, ws):
            m[i, _reflect(int(j), n)] += w
        m[i, :] /= m[i, :].sum()
    return m


def _apply_separable(img, mv: np.ndarray, mh: np.ndarray):
    """rows <- mv @ rows, cols <- mh @ cols, HWC or HW, Tensor or array."""
    tensor_in = isinstance(img, Tensor)
    x = img if tensor_in else Tensor(np.asarray(img))
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (*x.data.shape, 1))
    h, w, c = x.data.shape
    mv = mv.astype(x.data.dtype)
    mh = mh.astype(x.data.dtype)
    y = ad.matmul(Tensor(mv), ad.reshape(x, (h, w * c)))
    y = ad.reshape(y, (mv.shape[0], w, c))
    y = ad.transpose(y, (1, 0, 2))
    y = ad.matmul(Tensor(mh), ad.reshape(y, (w, mv.shape[0] * c)))
    y = ad.reshape(y, (mh.shape[0], mv.shape[0], c))
    y = ad.transpose(y, (1, 0, 2))
    if squeeze:
        y = ad.reshape(y, y.data.shape[:2])
    return y if tensor_in else y.data


def downsample_aa(img, cfg: ResampleConfig = ResampleConfig()):
    """Anti-aliased bicubic downsampling by cfg.factor.

    Accepts HW or HWC arrays (returns arrays) or Tensors (returns Tensors,
    differentiable). Output pixel i is centered at (i+0.5)*factor - 0.5 of
    the input grid.
    """
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    h, w = data.shape[:2]
    if h % cfg.factor or w % cfg.factor:
        raise NonDivisibleExtentError(
            f"extents {h}x{w} not divisible by factor {cfg.factor}")
    mv = _down_matrix(h, cfg.factor, cfg.kernel_a)
    mh = _down_matrix(w, cfg.factor, cfg.kernel_a)
    return _apply_separable(img, mv, mh)


def upsample_bicubic(img, factor: int, kernel_a: float = -0.5):
    """Plain bicubic upsampling by an integer factor (no kernel stretch)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    h, w = data.shape[:2]
    mv = _up_matrix(h, factor, kernel_a)
    mh = _up_matrix(w, factor, kernel_a)
    return _apply_separable(img, mv, mh)


def subpixel_loss(render, lr_gt, cfg: ResampleConfig = ResampleConfig()):
    """Mean absolute error between downsample_aa(render) and the LR ground
    truth; differentiable in render when given as a Tensor."""
    down = downsample_aa(render, cfg)
    down_shape = down.data.shape if isinstance(down, Tensor) else down.shape
    gt = lr_gt.data if isinstance(lr_gt, Tensor) else np.asarray(lr_gt)
    if tuple(down_shape) != tuple(gt.shape):
        raise ShapeMismatchError(
            f"downsampled render {down_shape} vs LR ground truth {gt.shape}")
    if isinstance(down, Tensor):
        return ad.mean(ad.abs_(ad.sub(down, Tensor(gt))))
    return float(np.mean(np.abs(down - gt)))


def loss_3dgs(l_ren, l_sp, lambda_ren: float):
    """Convex combination of the rendering and sub-pixel losses.

    The endpoint weights return the corresponding operand untouched so that
    lambda 0/1 are exact, not within-epsilon.
    """
    if not 0.0 <= lambda_ren <= 1.0:
        raise LambdaOutOfRangeError(f"lambda_ren={lambda_ren} outside [0, 1]")
    if lambda_ren == 1.0:
        return l_ren
    if lambda_ren == 0.0:
        return l_sp
    if isinstance(l_ren, Tensor) or isinstance(l_sp, Tensor):
        return ad.add(ad.mul(ad.as_tensor(l_ren), lambda_ren),
                      ad.mul(ad.as_tensor(l_sp), 1.0 - lambda_ren))
    return lambda_ren * l_ren + (1.0 - lambda_ren) * l_sp
