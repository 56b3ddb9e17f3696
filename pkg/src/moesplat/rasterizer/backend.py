"""Kernel backend selection.

Prefers the compiled extension, falls back to the numpy implementation.
MOESPLAT_BACKEND=python|compiled forces a choice (compiled raises if the
extension is missing). Both backends share semantics; small float drift
between them comes only from libm vs vectorized exp.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError
from . import fallback

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_choice = os.environ.get("MOESPLAT_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "compiled", "python"):
    raise ConfigError(f"MOESPLAT_BACKEND must be auto|compiled|python, got {_choice!r}")
if _choice == "compiled" and _compiled is None:
    raise ConfigError("MOESPLAT_BACKEND=compiled but the extension is not built")

BACKEND_NAME = "compiled" if (_compiled is not None and _choice != "python") else "python"
_use_compiled = BACKEND_NAME == "compiled"

TILE = 16


def build_tiles(mean2d, radii, height: int, width: int):
    """Bucket splats into 16px tiles their 3-sigma box touches.

    Returns (tile_offsets, tile_items, n_tx); items within a tile keep the
    incoming (depth) order.
    """
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    m = len(radii)

    x_lo = np.maximum(mean2d[:, 0] - radii[:, 0], 0.0)
    x_hi = np.minimum(mean2d[:, 0] + radii[:, 0], float(width))
    y_lo = np.maximum(mean2d[:, 1] - radii[:, 1], 0.0)
    y_hi = np.minimum(mean2d[:, 1] + radii[:, 1], float(height))
    on = (x_lo < x_hi) & (y_lo < y_hi)

    tx0 = np.clip(np.floor(x_lo / TILE).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(np.ceil(x_hi / TILE).astype(np.int64), 1, n_tx)
    ty0 = np.clip(np.floor(y_lo / TILE).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(np.ceil(y_hi / TILE).astype(np.int64), 1, n_ty)
    spans_x = np.where(on, tx1 - tx0, 0)
    spans_y = np.where(on, ty1 - ty0, 0)
    counts = spans_x * spans_y

    total = int(counts.sum())
    items = np.repeat(np.arange(m, dtype=np.int32), counts)
    starts = np.concatenate(([0], np.cumsum(counts)))[:m]
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    sx = np.repeat(np.maximum(spans_x, 1), counts)
    lx = local % sx
    ly = local // sx
    tiles = (np.repeat(ty0, counts) + ly) * n_tx + np.repeat(tx0, counts) + lx

    order = np.argsort(tiles, kind="stable")   # stable keeps depth order per tile
    tiles = tiles[order]
    items = items[order]
    tile_offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tiles, minlength=n_tx * n_ty), out=tile_offsets[1:])
    return tile_offsets, items, n_tx


def _c(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


def forward_composite(mean2d, conic, radii, opacity, channels, height, width):
    if _use_compiled:
        tile_offsets, tile_items, n_tx = build_tiles(mean2d, radii, height, width)
        return _compiled.forward_composite(
            _c(mean2d), _c(conic), _c(opacity), _c(channels),
            tile_offsets, tile_items, height, width, TILE, n_tx)
    return fallback.forward_composite(mean2d, conic, radii, opacity, channels,
                                      height, width)


def backward_composite(pix_offsets, idx, g, alpha, tbefore,
                       mean2d, conic, opacity, channels, upstream):
    if _use_compiled:
        return _compiled.backward_composite(
            pix_offsets, idx, _c(g), _c(alpha), _c(tbefore),
            _c(mean2d), _c(conic), _c(opacity), _c(channels), _c(upstream))
    return fallback.backward_composite(pix_offsets, idx, g, alpha, tbefore,
                                       mean2d, conic, opacity, channels, upstream)


def replay(pix_offsets, idx, alpha, tbefore, channels, height, width):
    if _use_compiled:
        return _compiled.replay(pix_offsets, idx, _c(alpha), _c(tbefore),
                                _c(channels), height, width)
    return fallback.replay(pix_offsets, idx, alpha, tbefore, channels, height, width)


def channel_backward(pix_offsets, idx, alpha, tbefore, n_splats, upstream):
    if _use_compiled:
        return _compiled.channel_backward(pix_offsets, idx, _c(alpha), _c(tbefore),
                                          n_splats, _c(upstream))
    return fallback.channel_backward(pix_offsets, idx, alpha, tbefore,
                                     n_splats, upstream)


def fused_forward(mean2d, conic, radii, opacity, channels, expert_id,
                  n_experts, height, width, shared_t):
    if _use_compiled:
        tile_offsets, tile_items, n_tx = build_tiles(mean2d, radii, height, width)
        return _compiled.fused_forward(
            _c(mean2d), _c(conic), _c(opacity), _c(channels),
            _c(expert_id, np.int32), n_experts,
            tile_offsets, tile_items, height, width, TILE, n_tx, shared_t)
    return fallback.fused_forward(mean2d, conic, radii, opacity, channels,
                                  expert_id, n_experts, height, width, shared_t)
