# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled compositing kernels.

Tile-bucketed front-to-back alpha compositing over depth-sorted splats,
its analytic backward pass, contributor-graph replay, and the fused
multi-expert variant. Mirrors fallback.py; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF ALPHA_MAX = 0.999
DEF T_MIN = 1e-4


def forward_composite(double[:, ::1] mean2d, double[:, ::1] conic,
                      double[::1] opacity, double[:, ::1] channels,
                      long long[::1] tile_offsets, int[::1] tile_items,
                      int height, int width, int tile, int n_tx):
    """Per-pixel composite walk. Two passes: count contributors, then fill."""
    cdef int n_ch = channels.shape[1]
    cdef int n_tiles = tile_offsets.shape[0] - 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] image = np.zeros((height * width, n_ch))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] final_t = np.ones(height * width)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pix_offsets = np.zeros(height * width + 1, dtype=np.int64)

    cdef double[:, ::1] img = image
    cdef double[::1] ft = final_t
    cdef long long[::1] po = pix_offsets

    cdef int t, tx, ty, x0, x1, y0, y1, px, py, pix, i, it, c
    cdef long long s, e, total
    cdef double tcur, dx, dy, q, g, a, w

    # pass 1: contributor counts and final transmittance
    for t in range(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        s = tile_offsets[t]
        e = tile_offsets[t + 1]
        if s == e:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * width + px
                tcur = 1.0
                for it in range(s, e):
                    if tcur < T_MIN:
                        break
                    i = tile_items[it]
                    dx = (px + 0.5) - mean2d[i, 0]
                    dy = (py + 0.5) - mean2d[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy \
                        + conic[i, 2] * dy * dy
                    if q > 9.0:
                        continue
                    g = exp(-0.5 * q)
                    a = opacity[i] * g
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    po[pix + 1] += 1
                    tcur = tcur * (1.0 - a)
                ft[pix] = tcur

    total = 0
    for pix in range(height * width):
        total += po[pix + 1]
        po[pix + 1] = total

    cdef cnp.ndarray[cnp.int32_t, ndim=1] idx = np.empty(total, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gs = np.empty(total)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] alphas = np.empty(total)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tbefore = np.empty(total)
    cdef int[::1] idx_v = idx
    cdef double[::1] g_v = gs
    cdef double[::1] a_v = alphas
    cdef double[::1] t_v = tbefore
    cdef long long cursor

    # pass 2: record contributors and accumulate channels
    for t in range(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        s = tile_offsets[t]
        e = tile_offsets[t + 1]
        if s == e:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * width + px
                cursor = po[pix]
                tcur = 1.0
                for it in range(s, e):
                    if tcur < T_MIN:
                        break
                    i = tile_items[it]
                    dx = (px + 0.5) - mean2d[i, 0]
                    dy = (py + 0.5) - mean2d[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy \
                        + conic[i, 2] * dy * dy
                    if q > 9.0:
                        continue
                    g = exp(-0.5 * q)
                    a = opacity[i] * g
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    idx_v[cursor] = i
                    g_v[cursor] = g
                    a_v[cursor] = a
                    t_v[cursor] = tcur
                    cursor += 1
                    w = a * tcur
                    for c in range(n_ch):
                        img[pix, c] += w * channels[i, c]
                    tcur = tcur * (1.0 - a)

    return (image.reshape(height, width, n_ch), final_t, pix_offsets,
            idx, gs, alphas, tbefore)


def backward_composite(long long[::1] pix_offsets, int[::1] idx, double[::1] g,
                       double[::1] alpha, double[::1] tbefore,
                       double[:, ::1] mean2d, double[:, ::1] conic,
                       double[::1] opacity, double[:, ::1] channels,
                       double[:, :, ::1] upstream):
    cdef int height = upstream.shape[0]
    cdef int width = upstream.shape[1]
    cdef int n_ch = upstream.shape[2]
    cdef int m = opacity.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_channels = np.zeros((m, n_ch))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d_opacity = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_mean2d = np.zeros((m, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_conic = np.zeros((m, 3))
    cdef double[:, ::1] dch = d_channels
    cdef double[::1] dop = d_opacity
    cdef double[:, ::1] dmu = d_mean2d
    cdef double[:, ::1] dcon = d_conic

    cdef cnp.ndarray[cnp.float64_t, ndim=1] suffix = np.zeros(n_ch)
    cdef double[::1] sfx = suffix

    cdef int pix, px, py, i, c
    cdef long long j
    cdef double w, d_alpha, d_g, d_q, dx, dy, qx, qy, scale

    for pix in range(height * width):
        py = pix // width
        px = pix - py * width
        for c in range(n_ch):
            sfx[c] = 0.0
        # walk back to front so sfx holds the sum over later contributors
        for j in range(pix_offsets[pix + 1] - 1, pix_offsets[pix] - 1, -1):
            i = idx[j]
            w = alpha[j] * tbefore[j]
            d_alpha = 0.0
            for c in range(n_ch):
                dch[i, c] += w * upstream[py, px, c]
                d_alpha += upstream[py, px, c] * (
                    tbefore[j] * channels[i, c] - sfx[c] / (1.0 - alpha[j]))
                sfx[c] += w * channels[i, c]
            if alpha[j] < ALPHA_MAX:
                dop[i] += g[j] * d_alpha
                d_g = opacity[i] * d_alpha
                dx = (px + 0.5) - mean2d[i, 0]
                dy = (py + 0.5) - mean2d[i, 1]
                qx = conic[i, 0] * dx + conic[i, 1] * dy
                qy = conic[i, 1] * dx + conic[i, 2] * dy
                scale = d_g * g[j]
                dmu[i, 0] += scale * qx
                dmu[i, 1] += scale * qy
                # alpha = op * exp(-q/2), q = a dx^2 + 2 b dx dy + c dy^2
                d_q = -0.5 * alpha[j] * d_alpha
                dcon[i, 0] += d_q * dx * dx
                dcon[i, 1] += 2.0 * d_q * dx * dy
                dcon[i, 2] += d_q * dy * dy
    return d_channels, d_opacity, d_mean2d, d_conic


def replay(long long[::1] pix_offsets, int[::1] idx, double[::1] alpha,
           double[::1] tbefore, double[:, ::1] channels, int height, int width):
    cdef int n_ch = channels.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] image = np.zeros((height * width, n_ch))
    cdef double[:, ::1] img = image
    cdef int pix, i, c
    cdef long long j
    cdef double w
    for pix in range(height * width):
        for j in range(pix_offsets[pix], pix_offsets[pix + 1]):
            i = idx[j]
            w = alpha[j] * tbefore[j]
            for c in range(n_ch):
                img[pix, c] += w * channels[i, c]
    return image.reshape(height, width, n_ch)


def channel_backward(long long[::1] pix_offsets, int[::1] idx, double[::1] alpha,
                     double[::1] tbefore, int n_splats,
                     double[:, :, ::1] upstream):
    cdef int height = upstream.shape[0]
    cdef int width = upstream.shape[1]
    cdef int n_ch = upstream.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_channels = np.zeros((n_splats, n_ch))
    cdef double[:, ::1] dch = d_channels
    cdef int pix, px, py, i, c
    cdef long long j
    cdef double w
    for pix in range(height * width):
        py = pix // width
        px = pix - py * width
        for j in range(pix_offsets[pix], pix_offsets[pix + 1]):
            i = idx[j]
            w = alpha[j] * tbefore[j]
            for c in range(n_ch):
                dch[i, c] += w * upstream[py, px, c]
    return d_channels


def fused_forward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] opacity,
                  double[:, ::1] channels, int[::1] expert_id, int n_experts,
                  long long[::1] tile_offsets, int[::1] tile_items,
                  int height, int width, int tile, int n_tx, bint shared_t):
    """One merged walk producing per-expert images.

    With shared_t every splat attenuates a single transmittance; otherwise
    each expert keeps its own and the result matches per-expert solo renders.
    """
    cdef int n_ch = channels.shape[1]
    cdef int n_tiles = tile_offsets.shape[0] - 1
    cdef int n_t = 1 if shared_t else n_experts
    cdef cnp.ndarray[cnp.float64_t, ndim=3] images = np.zeros((n_experts, height * width, n_ch))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] final_t = np.ones((n_t, height * width))
    cdef double[:, :, ::1] img = images
    cdef double[:, ::1] ft = final_t
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tloc_arr = np.empty(n_t)
    cdef double[::1] tloc = tloc_arr

    cdef int t, tx, ty, x0, x1, y0, y1, px, py, pix, i, k, row, c, dead
    cdef long long s, e, it
    cdef double dx, dy, q, g, a, w, tcur

    for t in range(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        s = tile_offsets[t]
        e = tile_offsets[t + 1]
        if s == e:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * width + px
                for row in range(n_t):
                    tloc[row] = 1.0
                dead = 0
                for it in range(s, e):
                    if dead == n_t:
                        break
                    i = tile_items[it]
                    k = expert_id[i]
                    row = 0 if shared_t else k
                    tcur = tloc[row]
                    if tcur < T_MIN:
                        continue
                    dx = (px + 0.5) - mean2d[i, 0]
                    dy = (py + 0.5) - mean2d[i, 1]
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy \
                        + conic[i, 2] * dy * dy
                    if q > 9.0:
                        continue
                    g = exp(-0.5 * q)
                    a = opacity[i] * g
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * tcur
                    for c in range(n_ch):
                        img[k, pix, c] += w * channels[i, c]
                    tcur = tcur * (1.0 - a)
                    tloc[row] = tcur
                    if tcur < T_MIN:
                        dead += 1
                for row in range(n_t):
                    ft[row, pix] = tloc[row]
    return images.reshape(n_experts, height, width, n_ch), final_t
