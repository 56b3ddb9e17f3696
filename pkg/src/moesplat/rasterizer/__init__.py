from .backend import BACKEND_NAME
from .core import (ALPHA_MAX, Q_MAX, T_MIN, TILE, ChannelSplat, RenderGraph,
                   SplatBatch, SplatGrads, alpha_of, composite_backward,
                   conic_and_radii, rasterize, replay, replay_channel_backward)

__all__ = [
    "ALPHA_MAX", "Q_MAX", "T_MIN", "TILE", "BACKEND_NAME",
    "ChannelSplat", "RenderGraph", "SplatBatch", "SplatGrads",
    "alpha_of", "composite_backward", "conic_and_radii", "rasterize",
    "replay", "replay_channel_backward",
]
