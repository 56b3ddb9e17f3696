"""Image quality metrics and expert-specialization statistics.

The SSIM here is the one the photometric loss trains against, so it comes
with an analytic input gradient. Convention: 11-tap Gaussian window with
sigma 1.5, applied as a zero-padded separable 'same' convolution; constants
C1 = 0.01^2, C2 = 0.03^2 for unit-range images. Multichannel images are
scored per channel and averaged.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from .errors import InvalidInputError

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def gaussian_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _blur(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = convolve1d(img, window, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, window, axis=1, mode="constant", cval=0.0)


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise InvalidInputError(f"expected (H, W) or (H, W, C) image, got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return ssim_and_grad(a, b)[0]


def ssim_and_grad(a: np.ndarray, b: np.ndarray):
    """Returns (mean SSIM, d(mean SSIM)/d(a)) with a's original shape."""
    a0 = np.asarray(a, dtype=np.float64)
    x = _as_channels(a)
    y = _as_channels(b)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    win = gaussian_window()

    mu_x = _blur(x, win)
    mu_y = _blur(y, win)
    bxx = _blur(x * x, win)
    byy = _blur(y * y, win)
    bxy = _blur(x * y, win)

    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * (bxy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = (bxx - mu_x ** 2) + (byy - mu_y ** 2) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())

    # partials of mean(s) w.r.t. the blurred statistics, then one transposed
    # blur (the window is symmetric, so blur is self-adjoint under zero pad)
    n = s.size
    inv = 1.0 / (b1 * b2)
    d_bxy = 2.0 * a1 * inv / n
    d_bxx = -s / b2 / n
    d_mux = (2.0 * mu_y * (a2 - a1) * inv - s * (2.0 * mu_x / b1 - 2.0 * mu_x / b2)) / n
    grad = _blur(d_mux, win) + 2.0 * x * _blur(d_bxx, win) + y * _blur(d_bxy, win)
    return value, grad.reshape(a0.shape)


# ---------------------------------------------------------------------------
# scene statistics


def sobel_map(image: np.ndarray) -> np.ndarray:
    """(H, W) gradient magnitude of the channel-mean image, zero-padded."""
    img = _as_channels(image).mean(axis=2)
    h, w = img.shape
    p = np.zeros((h + 2, w + 2))
    p[1:-1, 1:-1] = img
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2.0 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2.0 * p[:-2, 1:-1] - p[:-2, 2:])
    return np.sqrt(gx ** 2 + gy ** 2)


def frame_difference(images) -> float:
    """Mean L2 difference between consecutive frames."""
    images = [np.asarray(i, dtype=np.float64) for i in images]
    if len(images) < 2:
        raise InvalidInputError("need at least two frames")
    steps = [np.sqrt(np.mean((b - a) ** 2)) for a, b in zip(images, images[1:])]
    return float(np.mean(steps))


def motion_magnitudes(expert, times=None) -> np.ndarray:
    """(N,) mean per-step displacement of each gaussian over sampled times."""
    from .experts import means_at
    if times is None:
        times = np.linspace(0.0, 1.0, 13)
    disp = np.zeros(len(expert.base))
    prev = means_at(expert, float(times[0]))
    for t in times[1:]:
        cur = means_at(expert, float(t))
        disp += np.linalg.norm(cur - prev, axis=1)
        prev = cur
    return disp / (len(times) - 1)


def detail_at_gaussians(expert, view) -> np.ndarray:
    """(N,) image-detail score under each gaussian's projected center."""
    from .experts import gaussians_at
    from .scene import project_gaussians
    if view.image is None:
        raise InvalidInputError("view carries no image")
    detail = sobel_map(view.image)
    gs = gaussians_at(expert, view.time)
    proj = project_gaussians(view.camera, gs)
    out = np.zeros(len(gs))
    if len(proj):
        px = np.clip(proj.mean2d[:, 0].astype(int), 0, view.camera.width - 1)
        py = np.clip(proj.mean2d[:, 1].astype(int), 0, view.camera.height - 1)
        out[proj.index] = detail[py, px]
    return out


WEIGHT_EPS = 1e-8


def specialization_scores(weights, values, denominator: str = "count",
                          normalize: bool = False) -> np.ndarray:
    """Per-expert weighted mean of a per-gaussian statistic.

    weights/values: per-expert lists of (N_k,) arrays. The default
    denominator counts gaussians whose weight is positive (beyond a small
    tolerance); "weight_sum" divides by the summed weights instead.
    normalize=True rescales the result by its max so the scores land in
    [0, 1] for comparison across statistics.
    """
    if denominator not in ("count", "weight_sum"):
        raise InvalidInputError(f"unknown denominator {denominator!r}")
    if len(weights) != len(values):
        raise InvalidInputError("weights/values expert count mismatch")
    out = np.zeros(len(weights))
    for k, (w, m) in enumerate(zip(weights, values)):
        w = np.asarray(w, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if w.shape != m.shape:
            raise InvalidInputError(f"expert {k}: weight/value shape mismatch")
        num = float((w * m).sum())
        if denominator == "count":
            den = float((w > WEIGHT_EPS).sum())
        else:
            den = float(w.sum())
        out[k] = num / den if abs(den) > WEIGHT_EPS else 0.0
    if normalize:
        top = np.abs(out).max()
        if top > 0.0:
            out = out / top
    return out
