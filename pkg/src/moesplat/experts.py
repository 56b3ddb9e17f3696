"""Dynamic-scene experts: Gaussian sets whose means move over time.

Each expert owns a static set of Gaussians (rotation, scale fixed after
init) plus one motion model giving means as a function of normalized time:

  polynomial  per-gaussian coefficients, mean(t) = sum_j a_j t^j
  keyframe    piecewise-linear interpolation between keyframe means
  deform      shared tanh MLP driven by per-gaussian latent codes and t

Trainable state is colors, opacities and the motion arrays. Gradients reach
3D means through the projection Jacobian; screen-space covariance is treated
as constant along that path (its time variation is second order for the
small per-frame motions this targets).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, StateError
from .nn import DenseTanhMLP
from .rasterizer import SplatBatch, composite_backward, rasterize
from .scene import (GaussianSet, View, project_gaussians,
                    project_mean_backward, random_unit_quats)

EXPERT_KINDS = ("polynomial", "keyframe", "deform")

DEFORM_HIDDEN = 16
DEFORM_DEPTH = 2

# motion arrays that are structure, not parameters
_STATIC_MOTION_KEYS = frozenset({"key_times"})


@dataclass
class ExpertModel:
    kind: str
    base: GaussianSet
    motion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise InvalidParameterError(f"unknown expert kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.base)

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by stable names (shared with optimizers)."""
        out = {"colors": self.base.colors, "opacities": self.base.opacities}
        for k, v in self.motion.items():
            if k not in _STATIC_MOTION_KEYS:
                out[f"motion.{k}"] = v
        return out


def _check_time(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise InvalidParameterError(f"time {t} outside [0, 1]")
    return t


def _deform_input(motion: dict, t: float) -> np.ndarray:
    lat = motion["latents"]
    return np.concatenate([lat, np.full((len(lat), 1), t)], axis=1)


def _deform_mlp(motion: dict) -> DenseTanhMLP:
    return DenseTanhMLP.from_arrays(motion, DEFORM_DEPTH + 1)


def means_at(expert: ExpertModel, t: float) -> np.ndarray:
    """(N, 3) means at normalized time t in [0, 1]."""
    t = _check_time(t)
    m = expert.motion
    if expert.kind == "polynomial":
        coeffs = m["coeffs"]                      # (N, 3, D+1)
        powers = t ** np.arange(coeffs.shape[2])
        return coeffs @ powers
    if expert.kind == "keyframe":
        times, keys = m["key_times"], m["key_means"]   # (M,), (N, M, 3)
        j = int(np.searchsorted(times, t, side="right"))
        j = min(max(j, 1), len(times) - 1)
        w = (t - times[j - 1]) / (times[j] - times[j - 1])
        return (1.0 - w) * keys[:, j - 1] + w * keys[:, j]
    out, _ = _deform_mlp(m).forward(_deform_input(m, t))
    return expert.base.means + out


def motion_backward(expert: ExpertModel, t: float, d_means: np.ndarray) -> dict:
    """Chain a (N, 3) mean gradient into the motion arrays."""
    t = _check_time(t)
    m = expert.motion
    if expert.kind == "polynomial":
        powers = t ** np.arange(m["coeffs"].shape[2])
        return {"coeffs": d_means[:, :, None] * powers[None, None, :]}
    if expert.kind == "keyframe":
        times = m["key_times"]
        j = int(np.searchsorted(times, t, side="right"))
        j = min(max(j, 1), len(times) - 1)
        w = (t - times[j - 1]) / (times[j] - times[j - 1])
        d_keys = np.zeros_like(m["key_means"])
        d_keys[:, j - 1] = (1.0 - w) * d_means
        d_keys[:, j] += w * d_means
        return {"key_means": d_keys}
    mlp = _deform_mlp(m)
    x = _deform_input(m, t)
    _, acts = mlp.forward(x)
    dx, dws, dbs = mlp.backward(acts, d_means)
    out = {"latents": dx[:, :-1]}
    for i in range(mlp.n_layers):
        out[f"w{i}"] = dws[i]
        out[f"b{i}"] = dbs[i]
    return out


def gaussians_at(expert: ExpertModel, t: float) -> GaussianSet:
    """The expert's Gaussians posed at time t (geometry aside from means
    is the static base)."""
    gs = expert.base.copy()
    gs.means = means_at(expert, t)
    return gs


@dataclass
class ExpertRender:
    """Cached forward pass of one expert for one view."""

    view: View
    gaussians: GaussianSet
    proj: object          # ProjectedSplats
    image: np.ndarray     # (H, W, 3)
    graph: object         # RenderGraph


@dataclass
class ExpertGrads:
    colors: np.ndarray     # (N, 3)
    opacities: np.ndarray  # (N,)
    means: np.ndarray      # (N, 3) gradient at time t, pre motion chaining
    motion: dict           # matches expert.motion keys


def render_expert(expert: ExpertModel, view: View, expert_id: int = 0) -> ExpertRender:
    gs = gaussians_at(expert, view.time)
    proj = project_gaussians(view.camera, gs)
    batch = SplatBatch.from_projection(proj, gs.opacities, gs.colors, expert_id)
    image, graph = rasterize(batch, view.camera.height, view.camera.width)
    return ExpertRender(view, gs, proj, image, graph)


def expert_backward(expert: ExpertModel, render: ExpertRender,
                    d_image: np.ndarray) -> ExpertGrads:
    """Gradients of sum(d_image * image) for the render's view.

    Requires the cached forward pass from render_expert.
    """
    if render is None or render.graph is None:
        raise StateError("expert_backward needs a cached render_expert result")
    if len(render.gaussians) != len(expert.base):
        raise InvalidInputError("cached render does not match this expert")
    grads = composite_backward(render.graph, d_image)
    n = len(expert.base)
    d_colors = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_means = np.zeros((n, 3))
    rows = render.proj.index
    d_colors[rows] = grads.channels
    d_opac[rows] = grads.opacity
    d_means[rows] = project_mean_backward(render.view.camera, render.proj,
                                          grads.mean2d, grads.cov2d)
    return ExpertGrads(d_colors, d_opac, d_means,
                       motion_backward(expert, render.view.time, d_means))


def init_expert(kind: str, points: np.ndarray, n_gaussians: int,
                rng: np.random.Generator, *, degree: int = 2, n_keys: int = 5,
                latent_dim: int = 8, jitter_std: float = 0.05,
                scale_range: tuple = (0.03, 0.09)) -> ExpertModel:
    """A fresh expert seeded near reference points.

    Base means are sampled (with replacement, so oversampling is fine) from
    `points` and jittered; motion starts at rest.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise InvalidInputError("points must be a non-empty (P, 3) array")
    if n_gaussians <= 0:
        raise InvalidParameterError("expert needs at least one gaussian")
    pick = rng.integers(0, len(points), size=n_gaussians)
    means = points[pick] + rng.normal(0.0, jitter_std, (n_gaussians, 3))
    base = GaussianSet(
        means,
        random_unit_quats(rng, n_gaussians),
        rng.uniform(scale_range[0], scale_range[1], (n_gaussians, 3)),
        np.full(n_gaussians, 0.5),
        rng.uniform(0.2, 0.8, (n_gaussians, 3)),
    )
    if kind == "polynomial":
        coeffs = np.zeros((n_gaussians, 3, degree + 1))
        coeffs[:, :, 0] = base.means
        motion = {"coeffs": coeffs}
    elif kind == "keyframe":
        motion = {"key_times": np.linspace(0.0, 1.0, n_keys),
                  "key_means": np.repeat(base.means[:, None, :], n_keys, axis=1)}
    elif kind == "deform":
        mlp = DenseTanhMLP(latent_dim + 1, DEFORM_HIDDEN, 3, DEFORM_DEPTH, rng)
        motion = {"latents": rng.normal(0.0, 0.1, (n_gaussians, latent_dim))}
        motion.update(mlp.param_arrays())
    else:
        raise InvalidParameterError(f"unknown expert kind {kind!r}")
    return ExpertModel(kind, base, motion)
