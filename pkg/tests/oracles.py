"""Independent reference implementations used to cross-check the package.

Everything here is written directly from the math, favoring clarity over
speed, and deliberately shares no code with src/. The naive compositor
walks every splat for every pixel; the SSIM reference slides an explicit
11x11 window; the RAdam reference runs the published scalar recurrence.
"""

import numpy as np

ALPHA_MAX = 0.999
T_MIN = 1e-4
Q_MAX = 9.0


def naive_composite(mean2d, cov2d, opacity, channels, height, width):
    """Direct per-pixel front-to-back compositing over depth-sorted splats.

    cov2d is packed (xx, xy, yy). Returns (image (H, W, C), final_t (H*W,)).
    A splat contributes at a pixel when its Mahalanobis distance is within
    3 sigma and the transmittance before it is still at least T_MIN; its
    alpha is the opacity times the Gaussian density, clamped.
    """
    m = len(opacity)
    n_ch = channels.shape[1]
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    px, py = np.meshgrid(xs, ys)             # (H, W)
    px = px.ravel()
    py = py.ravel()

    # alpha matrix: pixel x splat, zero outside 3 sigma
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
    ia = cov2d[:, 2] / det
    ib = -cov2d[:, 1] / det
    ic = cov2d[:, 0] / det
    dx = px[:, None] - mean2d[None, :, 0]    # (P, M)
    dy = py[:, None] - mean2d[None, :, 1]
    q = ia * dx ** 2 + 2.0 * ib * dx * dy + ic * dy ** 2
    alpha = np.where(q <= Q_MAX,
                     np.minimum(ALPHA_MAX, opacity[None, :] * np.exp(-0.5 * q)),
                     0.0)

    # transmittance before each splat; once it drops below T_MIN every later
    # splat is excluded, and excluded splats leave T unchanged
    tb = np.cumprod(1.0 - alpha, axis=1)
    tbefore = np.concatenate([np.ones((len(px), 1)), tb[:, :-1]], axis=1)
    live = tbefore >= T_MIN
    w = alpha * tbefore * live
    image = w @ channels
    final_t = np.where(live, 1.0 - alpha, 1.0).prod(axis=1)
    return image.reshape(height, width, n_ch), final_t


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f at array x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst relative disagreement, with a floor soaking up FD noise on
    near-zero entries (dead units, cancelled terms)."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def ssim_reference(a, b, c1=0.01 ** 2, c2=0.03 ** 2, n=11, sigma=1.5):
    """Sliding-window SSIM with an explicit 2D Gaussian window, zero padding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    x = np.arange(n) - (n - 1) / 2.0
    w1 = np.exp(-0.5 * (x / sigma) ** 2)
    w1 /= w1.sum()
    ker = np.outer(w1, w1)
    h, w, c = a.shape
    r = n // 2
    pa = np.zeros((h + 2 * r, w + 2 * r, c))
    pb = np.zeros_like(pa)
    pa[r:-r, r:-r] = a
    pb[r:-r, r:-r] = b
    vals = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            wx = pa[i:i + n, j:j + n]
            wy = pb[i:i + n, j:j + n]
            mx = np.einsum("ij,ijc->c", ker, wx)
            my = np.einsum("ij,ijc->c", ker, wy)
            sxx = np.einsum("ij,ijc->c", ker, wx * wx) - mx ** 2
            syy = np.einsum("ij,ijc->c", ker, wy * wy) - my ** 2
            sxy = np.einsum("ij,ijc->c", ker, wx * wy) - mx * my
            vals[i, j] = ((2 * mx * my + c1) * (2 * sxy + c2)) \
                / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(vals.mean())


def radam_reference(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Scalar RAdam trajectory for a fixed gradient sequence."""
    x = float(x0)
    m = 0.0
    v = 0.0
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        rho = rho_inf - 2.0 * t * beta2 ** t / (1.0 - beta2 ** t)
        if rho > 4.0:
            vhat = np.sqrt(v / (1.0 - beta2 ** t))
            rect = np.sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf)
                           / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
            x -= lr * rect * mhat / (vhat + eps)
        else:
            x -= lr * mhat
        out.append(x)
    return np.array(out)
