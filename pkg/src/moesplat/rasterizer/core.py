"""Tile-based CPU rasterizer for screen-space Gaussian splats.

Splats carry an arbitrary channel vector, not just rgb: the same compositor
renders color images and router weight planes. Every forward pass returns a
RenderGraph recording, per pixel, the ordered contributor list with its
density, alpha and incoming transmittance, so that:

  * compositing can be replayed against new channel values without touching
    geometry (linear in the channel count), and
  * the analytic backward pass can run without re-walking tiles.

Depth ordering is the total order (depth, expert_id, gauss_id); ties are
impossible across distinct splats, making renders reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from ..instrumentation import COUNTERS
from . import backend
from .fallback import ALPHA_MAX, Q_MAX, T_MIN

TILE = backend.TILE


@dataclass
class ChannelSplat:
    """A single projected splat with a free-form channel payload."""

    mean2d: np.ndarray   # (2,)
    cov2d: np.ndarray    # (3,) packed (xx, xy, yy)
    depth: float
    opacity: float
    channels: np.ndarray  # (C,)


def alpha_of(splat: ChannelSplat, u) -> float:
    """Clamped alpha of one splat at image point u, 0 outside 3 sigma."""
    xx, xy, yy = np.asarray(splat.cov2d, dtype=np.float64)
    det = xx * yy - xy * xy
    if det <= 0.0:
        raise InvalidInputError("screen covariance must be positive definite")
    dx = float(u[0]) - float(splat.mean2d[0])
    dy = float(u[1]) - float(splat.mean2d[1])
    q = (yy * dx * dx - 2.0 * xy * dx * dy + xx * dy * dy) / det
    if q > Q_MAX:
        return 0.0
    return min(ALPHA_MAX, float(splat.opacity) * float(np.exp(-0.5 * q)))


class SplatBatch:
    """Depth-unsorted splats headed for the compositor (SoA)."""

    __slots__ = ("mean2d", "cov2d", "depth", "opacity", "channels",
                 "expert_id", "gauss_id")

    def __init__(self, mean2d, cov2d, depth, opacity, channels,
                 expert_id=None, gauss_id=None):
        self.mean2d = np.asarray(mean2d, dtype=np.float64)
        self.cov2d = np.asarray(cov2d, dtype=np.float64)
        self.depth = np.asarray(depth, dtype=np.float64)
        self.opacity = np.asarray(opacity, dtype=np.float64)
        self.channels = np.asarray(channels, dtype=np.float64)
        m = len(self.depth)
        self.expert_id = (np.zeros(m, dtype=np.int32) if expert_id is None
                          else np.asarray(expert_id, dtype=np.int32))
        self.gauss_id = (np.arange(m, dtype=np.int32) if gauss_id is None
                         else np.asarray(gauss_id, dtype=np.int32))
        if self.mean2d.shape != (m, 2) or self.cov2d.shape != (m, 3):
            raise InvalidInputError("splat geometry arrays have wrong shape")
        if self.channels.ndim != 2 or self.channels.shape[0] != m:
            raise InvalidInputError("channels must be (n_splats, n_channels)")
        if self.opacity.shape != (m,) or self.expert_id.shape != (m,) \
                or self.gauss_id.shape != (m,):
            raise InvalidInputError("per-splat arrays have wrong shape")
        if m and (not np.all(np.isfinite(self.depth)) or np.any(self.depth <= 0.0)):
            raise InvalidInputError("splat depths must be finite and positive")

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]

    @classmethod
    def from_splats(cls, splats) -> "SplatBatch":
        splats = list(splats)
        widths = {len(np.atleast_1d(s.channels)) for s in splats}
        if len(widths) > 1:
            raise InvalidInputError(f"mixed channel counts in batch: {sorted(widths)}")
        c = widths.pop() if widths else 0
        return cls(
            np.array([s.mean2d for s in splats]).reshape(-1, 2),
            np.array([s.cov2d for s in splats]).reshape(-1, 3),
            np.array([s.depth for s in splats]),
            np.array([s.opacity for s in splats]),
            np.array([s.channels for s in splats]).reshape(-1, c),
        )

    @classmethod
    def from_projection(cls, proj, opacities, channels, expert: int = 0) -> "SplatBatch":
        """Pair visible projected splats with their opacity/channel rows."""
        rows = proj.index
        m = len(rows)
        return cls(proj.mean2d, proj.cov2d, proj.depth,
                   np.asarray(opacities, dtype=np.float64)[rows],
                   np.asarray(channels, dtype=np.float64)[rows],
                   np.full(m, expert, dtype=np.int32),
                   rows.astype(np.int32))

    @classmethod
    def concatenate(cls, batches) -> "SplatBatch":
        batches = list(batches)
        if not batches:
            raise InvalidInputError("cannot merge zero batches")
        widths = {b.n_channels for b in batches}
        if len(widths) > 1:
            raise InvalidInputError(f"mixed channel counts in batch: {sorted(widths)}")
        return cls(*[np.concatenate([getattr(b, f) for b in batches])
                     for f in ("mean2d", "cov2d", "depth", "opacity", "channels",
                               "expert_id", "gauss_id")])


def conic_and_radii(cov2d: np.ndarray):
    """Invert packed 2x2 covariances; also the 3-sigma half extents."""
    xx, xy, yy = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = xx * yy - xy * xy
    if np.any(det <= 0.0) or np.any(xx <= 0.0):
        raise InvalidInputError("screen covariance must be positive definite")
    conic = np.stack([yy / det, -xy / det, xx / det], axis=1)
    radii = 3.0 * np.sqrt(np.stack([xx, yy], axis=1))
    return conic, radii


@dataclass
class RenderGraph:
    """Frozen record of one composite: sorted splats plus per-pixel streams.

    `order` maps sorted row -> original batch row. Contributor indices in
    `idx` refer to sorted rows. `tbefore` is the transmittance seen by each
    contributor, `final_t` what survives each pixel.
    """

    height: int
    width: int
    order: np.ndarray        # (M,)
    mean2d: np.ndarray       # (M, 2) sorted
    conic: np.ndarray        # (M, 3) sorted
    opacity: np.ndarray      # (M,) sorted
    channels: np.ndarray     # (M, C) sorted
    pix_offsets: np.ndarray  # (H*W + 1,)
    idx: np.ndarray          # (K,) int32
    g: np.ndarray            # (K,)
    alpha: np.ndarray        # (K,)
    tbefore: np.ndarray      # (K,)
    final_t: np.ndarray      # (H*W,)

    def __len__(self) -> int:
        return len(self.order)

    @property
    def n_contributors(self) -> int:
        return len(self.idx)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]


@dataclass
class SplatGrads:
    """Composite gradients, aligned with the original (unsorted) batch."""

    channels: np.ndarray  # (M, C)
    opacity: np.ndarray   # (M,)
    mean2d: np.ndarray    # (M, 2)
    cov2d: np.ndarray     # (M, 3) packed (xx, xy, yy)


def _sort(batch: SplatBatch):
    COUNTERS.bump("depth_sorts")
    return np.lexsort((batch.gauss_id, batch.expert_id, batch.depth))


def rasterize(batch: SplatBatch, height: int, width: int):
    """Render a batch; returns (image (H, W, C), RenderGraph)."""
    if height <= 0 or width <= 0:
        raise InvalidInputError("image dimensions must be positive")
    order = _sort(batch)
    mean2d = batch.mean2d[order]
    cov2d = batch.cov2d[order]
    opacity = batch.opacity[order]
    channels = batch.channels[order]
    conic, radii = conic_and_radii(cov2d) if len(batch) else (
        np.zeros((0, 3)), np.zeros((0, 2)))

    COUNTERS.bump("composite_passes")
    image, final_t, pix_offsets, idx, g, alpha, tbefore = backend.forward_composite(
        mean2d, conic, radii, opacity, channels, height, width)
    graph = RenderGraph(height, width, order, mean2d, conic, opacity, channels,
                        pix_offsets, idx, g, alpha, tbefore, final_t)
    return image, graph


def composite_backward(graph: RenderGraph, upstream: np.ndarray) -> SplatGrads:
    """Pull an image-space gradient back onto splat channels/opacity/geometry."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (graph.height, graph.width, graph.n_channels):
        raise InvalidInputError(
            f"upstream shape {upstream.shape} does not match render "
            f"({graph.height}, {graph.width}, {graph.n_channels})")
    d_ch, d_op, d_mu, d_con = backend.backward_composite(
        graph.pix_offsets, graph.idx, graph.g, graph.alpha, graph.tbefore,
        graph.mean2d, graph.conic, graph.opacity, graph.channels, upstream)

    # chain conic -> cov2d through the 2x2 inverse: dM = -C dC C with both
    # off-diagonal slots tied to the single packed parameter
    ca, cb, cc = graph.conic[:, 0], graph.conic[:, 1], graph.conic[:, 2]
    ga, gb, gc = d_con[:, 0], 0.5 * d_con[:, 1], d_con[:, 2]
    m00 = -(ca * (ga * ca + gb * cb) + cb * (gb * ca + gc * cb))
    m01 = -(ca * (ga * cb + gb * cc) + cb * (gb * cb + gc * cc))
    m11 = -(cb * (ga * cb + gb * cc) + cc * (gb * cb + gc * cc))
    d_cov = np.stack([m00, 2.0 * m01, m11], axis=1)

    m = len(graph.order)
    out = SplatGrads(np.empty((m, graph.n_channels)), np.empty(m),
                     np.empty((m, 2)), np.empty((m, 3)))
    out.channels[graph.order] = d_ch
    out.opacity[graph.order] = d_op
    out.mean2d[graph.order] = d_mu
    out.cov2d[graph.order] = d_cov
    return out


def replay(graph: RenderGraph, channels: np.ndarray) -> np.ndarray:
    """Re-composite cached contributors with new channels (original order)."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 2 or channels.shape[0] != len(graph.order):
        raise InvalidInputError("replay channels must be (n_splats, n_channels)")
    COUNTERS.bump("graph_replays")
    return backend.replay(graph.pix_offsets, graph.idx, graph.alpha, graph.tbefore,
                          channels[graph.order], graph.height, graph.width)


def replay_channel_backward(graph: RenderGraph, upstream: np.ndarray) -> np.ndarray:
    """Channel gradient of a replay; (M, C_upstream), original order."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 3 or upstream.shape[:2] != (graph.height, graph.width):
        raise InvalidInputError("upstream shape does not match render")
    d_sorted = backend.channel_backward(graph.pix_offsets, graph.idx, graph.alpha,
                                        graph.tbefore, len(graph.order), upstream)
    out = np.empty_like(d_sorted)
    out[graph.order] = d_sorted
    return out
