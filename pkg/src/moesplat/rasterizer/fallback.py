"""Pure-numpy compositing kernels.

Same contracts as the compiled extension in _kernels.pyx; used when the
extension is unavailable or when MOESPLAT_BACKEND=python. The forward pass
walks splats in depth order and updates a whole-image transmittance buffer,
which is pixel-for-pixel equivalent to the per-pixel front-to-back walk the
compiled kernel does.
"""

from __future__ import annotations

import numpy as np

ALPHA_MAX = 0.999
T_MIN = 1e-4
Q_MAX = 9.0


def _splat_rect(mx, my, rx, ry, height, width):
    x0 = max(int(np.floor(mx - rx)), 0)
    x1 = min(int(np.ceil(mx + rx)) + 1, width)
    y0 = max(int(np.floor(my - ry)), 0)
    y1 = min(int(np.ceil(my + ry)) + 1, height)
    return x0, x1, y0, y1


def forward_composite(mean2d, conic, radii, opacity, channels, height, width):
    """Front-to-back composite of depth-sorted splats.

    Inputs are already depth sorted. Returns (image, final_t, pix_offsets,
    idx, g, alpha, tbefore): the per-pixel contributor stream in row-major
    pixel order, contributors in depth order.
    """
    m, n_ch = channels.shape
    image = np.zeros((height * width, n_ch))
    t_buf = np.ones(height * width)

    pix_parts, idx_parts, g_parts, a_parts, t_parts = [], [], [], [], []
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5

    for i in range(m):
        x0, x1, y0, y1 = _splat_rect(mean2d[i, 0], mean2d[i, 1],
                                     radii[i, 0], radii[i, 1], height, width)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = xs[x0:x1] - mean2d[i, 0]
        dy = ys[y0:y1] - mean2d[i, 1]
        a, b, c = conic[i]
        q = (a * dx ** 2)[None, :] + (2.0 * b) * dy[:, None] * dx[None, :] \
            + (c * dy ** 2)[:, None]
        lin = (np.arange(y0, y1)[:, None] * width + np.arange(x0, x1)[None, :]).ravel()
        q = q.ravel()
        t_here = t_buf[lin]
        hit = (q <= Q_MAX) & (t_here >= T_MIN)
        if not np.any(hit):
            continue
        lin = lin[hit]
        g = np.exp(-0.5 * q[hit])
        alpha = np.minimum(ALPHA_MAX, opacity[i] * g)
        t_here = t_here[hit]

        image[lin] += (alpha * t_here)[:, None] * channels[i][None, :]
        t_buf[lin] = t_here * (1.0 - alpha)

        pix_parts.append(lin)
        idx_parts.append(np.full(len(lin), i, dtype=np.int32))
        g_parts.append(g)
        a_parts.append(alpha)
        t_parts.append(t_here)

    if pix_parts:
        pix = np.concatenate(pix_parts)
        order = np.argsort(pix, kind="stable")   # keeps depth order per pixel
        pix = pix[order]
        idx = np.concatenate(idx_parts)[order]
        g = np.concatenate(g_parts)[order]
        alpha = np.concatenate(a_parts)[order]
        tbefore = np.concatenate(t_parts)[order]
        counts = np.bincount(pix, minlength=height * width)
    else:
        idx = np.zeros(0, dtype=np.int32)
        g = alpha = tbefore = np.zeros(0)
        counts = np.zeros(height * width, dtype=np.int64)

    pix_offsets = np.zeros(height * width + 1, dtype=np.int64)
    np.cumsum(counts, out=pix_offsets[1:])
    return (image.reshape(height, width, n_ch), t_buf, pix_offsets,
            idx, g, alpha, tbefore)


def _entry_pixels(pix_offsets):
    counts = np.diff(pix_offsets)
    return np.repeat(np.arange(len(counts)), counts)


def backward_composite(pix_offsets, idx, g, alpha, tbefore,
                       mean2d, conic, opacity, channels, upstream):
    """Gradients of sum(upstream * image) w.r.t. channels, opacity, mean2d,
    and the packed conic.

    Splats clamped at the opacity ceiling get zero density/opacity/geometry
    gradient. Returns arrays aligned with the (sorted) splat inputs.
    """
    height, width, n_ch = upstream.shape
    up = upstream.reshape(-1, n_ch)
    m = len(opacity)

    d_channels = np.zeros((m, n_ch))
    d_opacity = np.zeros(m)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    if len(idx) == 0:
        return d_channels, d_opacity, d_mean2d, d_conic

    pix = _entry_pixels(pix_offsets)
    u = up[pix]                                  # (K, C)
    ch = channels[idx]                           # (K, C)
    w = alpha * tbefore

    np.add.at(d_channels, idx, w[:, None] * u)

    # suffix sums of later contributions within each pixel
    contrib = w[:, None] * ch
    csum = np.cumsum(contrib, axis=0)
    seg_last = np.repeat(pix_offsets[1:] - 1, np.diff(pix_offsets))
    suffix = csum[seg_last] - csum[np.arange(len(idx))]

    d_alpha = (u * (tbefore[:, None] * ch - suffix / (1.0 - alpha)[:, None])).sum(axis=1)
    live = alpha < ALPHA_MAX
    np.add.at(d_opacity, idx, g * d_alpha * live)

    d_g = opacity[idx] * d_alpha * live
    px = pix % width + 0.5
    py = pix // width + 0.5
    dx = px - mean2d[idx, 0]
    dy = py - mean2d[idx, 1]
    a, b, c = conic[idx, 0], conic[idx, 1], conic[idx, 2]
    qd_x = a * dx + b * dy
    qd_y = b * dx + c * dy
    scale = d_g * g
    np.add.at(d_mean2d, idx, np.stack([scale * qd_x, scale * qd_y], axis=1))

    # alpha = op * exp(-q/2) with q = a dx^2 + 2 b dx dy + c dy^2
    d_q = -0.5 * alpha * d_alpha * live
    np.add.at(d_conic, idx,
              np.stack([d_q * dx * dx, 2.0 * d_q * dx * dy, d_q * dy * dy],
                       axis=1))
    return d_channels, d_opacity, d_mean2d, d_conic


def replay(pix_offsets, idx, alpha, tbefore, channels, height, width):
    """Composite cached contributors against new per-splat channels."""
    n_ch = channels.shape[1]
    image = np.zeros((height * width, n_ch))
    if len(idx):
        pix = _entry_pixels(pix_offsets)
        np.add.at(image, pix, (alpha * tbefore)[:, None] * channels[idx])
    return image.reshape(height, width, n_ch)


def channel_backward(pix_offsets, idx, alpha, tbefore, n_splats, upstream):
    """Channel-only gradient against cached contributors."""
    height, width, n_ch = upstream.shape
    d_channels = np.zeros((n_splats, n_ch))
    if len(idx):
        pix = _entry_pixels(pix_offsets)
        up = upstream.reshape(-1, n_ch)
        np.add.at(d_channels, idx, (alpha * tbefore)[:, None] * up[pix])
    return d_channels


def fused_forward(mean2d, conic, radii, opacity, channels, expert_id,
                  n_experts, height, width, shared_t):
    """Composite one merged depth-sorted stream into per-expert images.

    shared_t=False keeps an independent transmittance per expert, so each
    expert's image equals what a solo render of its splats would produce.
    shared_t=True composites through a single shared transmittance.
    """
    m, n_ch = channels.shape
    images = np.zeros((n_experts, height * width, n_ch))
    n_t = 1 if shared_t else n_experts
    t_buf = np.ones((n_t, height * width))
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5

    for i in range(m):
        x0, x1, y0, y1 = _splat_rect(mean2d[i, 0], mean2d[i, 1],
                                     radii[i, 0], radii[i, 1], height, width)
        if x0 >= x1 or y0 >= y1:
            continue
        k = int(expert_id[i])
        row = 0 if shared_t else k
        dx = xs[x0:x1] - mean2d[i, 0]
        dy = ys[y0:y1] - mean2d[i, 1]
        a, b, c = conic[i]
        q = (a * dx ** 2)[None, :] + (2.0 * b) * dy[:, None] * dx[None, :] \
            + (c * dy ** 2)[:, None]
        lin = (np.arange(y0, y1)[:, None] * width + np.arange(x0, x1)[None, :]).ravel()
        q = q.ravel()
        t_here = t_buf[row, lin]
        hit = (q <= Q_MAX) & (t_here >= T_MIN)
        if not np.any(hit):
            continue
        lin = lin[hit]
        g = np.exp(-0.5 * q[hit])
        alpha = np.minimum(ALPHA_MAX, opacity[i] * g)
        t_here = t_here[hit]
        images[k, lin] += (alpha * t_here)[:, None] * channels[i][None, :]
        t_buf[row, lin] = t_here * (1.0 - alpha)

    return images.reshape(n_experts, height, width, n_ch), t_buf
