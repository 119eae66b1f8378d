"""Training loss (L1 + D-SSIM) with analytic image gradients, plus metrics.

The SSIM map is the standard windowed form: 11x11 Gaussian window with
sigma 1.5, C1 = 0.01^2 and C2 = 0.03^2 on unit dynamic range, computed per
channel and averaged; borders use reflect padding (edge sample included).
The backward pass differentiates through the windowed statistics directly
rather than by autodiff, using the exact adjoint of the padded window
filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW_RADIUS = 5
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

PSNR_SENTINEL = 99.0


def _gaussian_window(radius: int = SSIM_WINDOW_RADIUS, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_WINDOW_1D = _gaussian_window()


def _check_shapes(img: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {gt.shape}")
    return img, gt


def _filter2d(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window with reflect (symmetric) borders."""
    out = correlate1d(x, _WINDOW_1D, axis=0, mode="reflect")
    return correlate1d(out, _WINDOW_1D, axis=1, mode="reflect")


def _fold_reflect(x: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Adjoint of symmetric padding by the window radius along one axis."""
    r = SSIM_WINDOW_RADIUS
    x = np.moveaxis(x, axis, 0)
    out = x[r:r + n].copy()
    out[:r] += x[:r][::-1]
    out[n - r:] += x[r + n:][::-1]
    return np.moveaxis(out, 0, axis)


def _adjoint_axis(u: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of (symmetric pad -> valid window correlation) along one axis:
    full correlation (the window is symmetric) followed by a border fold."""
    n = u.shape[axis]
    r = SSIM_WINDOW_RADIUS
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    full = correlate1d(np.pad(u, pad, mode="constant"), _WINDOW_1D,
                       axis=axis, mode="constant")
    return _fold_reflect(full, n, axis)


def _filter2d_adjoint(g: np.ndarray) -> np.ndarray:
    """Exact adjoint of _filter2d (the two axis filters commute)."""
    return _adjoint_axis(_adjoint_axis(g, 0), 1)


@dataclass
class SsimMap:
    """Per-pixel channel-averaged SSIM field in [-1, 1]."""

    values: np.ndarray
    window_radius: int = SSIM_WINDOW_RADIUS

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def _ssim_stats(x: np.ndarray, y: np.ndarray):
    mx = _filter2d(x)
    my = _filter2d(y)
    mxx = _filter2d(x * x)
    myy = _filter2d(y * y)
    mxy = _filter2d(x * y)
    sx = mxx - mx * mx
    sy = myy - my * my
    sxy = mxy - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sx + sy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim_map(img: np.ndarray, gt: np.ndarray) -> SsimMap:
    """Channel-averaged windowed SSIM between two HxWx3 images."""
    img, gt = _check_shapes(img, gt)
    h, w = img.shape[:2]
    size = 2 * SSIM_WINDOW_RADIUS + 1
    if h < size or w < size:
        raise ValueError(f"images smaller than the {size}x{size} SSIM window")
    total = np.zeros((h, w))
    for ch in range(3):
        _, _, a1, a2, b1, b2 = _ssim_stats(img[:, :, ch], gt[:, :, ch])
        total += (a1 * a2) / (b1 * b2)
    return SsimMap(total / 3.0)


def _ssim_backward_channel(x: np.ndarray, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """d(sum upstream * SSIM_channel)/dx through the windowed statistics."""
    mx, my, a1, a2, b1, b2 = _ssim_stats(x, y)
    s = (a1 * a2) / (b1 * b2)
    # Partials w.r.t. the five filtered moments (mu_x, mu_xx, mu_xy direct).
    d_sx = -s / b2                       # via sigma_x^2 = mxx - mx^2
    d_sxy = 2.0 * a1 / (b1 * b2)         # via 2*sxy + C2
    d_mx = (2.0 * my * a2 / (b1 * b2)    # a1 term
            - 2.0 * mx * s / b1          # b1 term
            - 2.0 * mx * d_sx            # sigma_x^2 depends on mx
            - my * d_sxy)                # sigma_xy depends on mx
    d_mxx = d_sx
    d_mxy = d_sxy
    return (_filter2d_adjoint(upstream * d_mx)
            + 2.0 * x * _filter2d_adjoint(upstream * d_mxx)
            + y * _filter2d_adjoint(upstream * d_mxy))


def ssim_mean_backward(img: np.ndarray, gt: np.ndarray, upstream: float) -> np.ndarray:
    """Gradient of upstream * mean(ssim_map(img, gt)) w.r.t. img."""
    img, gt = _check_shapes(img, gt)
    h, w = img.shape[:2]
    field = np.full((h, w), upstream / (3.0 * h * w))
    grad = np.empty_like(img)
    for ch in range(3):
        grad[:, :, ch] = _ssim_backward_channel(img[:, :, ch], gt[:, :, ch], field)
    return grad


def l1_loss(img: np.ndarray, gt: np.ndarray):
    """Mean absolute error and its image gradient."""
    img, gt = _check_shapes(img, gt)
    diff = img - gt
    loss = float(np.abs(diff).mean())
    d_image = np.sign(diff) / diff.size
    return loss, d_image


def combined_loss(img: np.ndarray, gt: np.ndarray, lambda_ssim: float):
    """(1 - lambda) * L1 + lambda * (1 - mean SSIM), with image gradient."""
    if not 0.0 <= lambda_ssim <= 1.0:
        raise ValueError("lambda_ssim must lie in [0, 1]")
    img, gt = _check_shapes(img, gt)
    l1, d_l1 = l1_loss(img, gt)
    if lambda_ssim == 0.0:
        return l1, d_l1
    smap = ssim_map(img, gt)
    loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - smap.mean)
    d_image = (1.0 - lambda_ssim) * d_l1 + ssim_mean_backward(img, gt, -lambda_ssim)
    return float(loss), d_image


def psnr(img: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit range; identical images report 99.0."""
    img, gt = _check_shapes(img, gt)
    mse = float(np.mean((img - gt) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_SENTINEL)
