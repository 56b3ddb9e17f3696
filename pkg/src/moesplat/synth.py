"""Procedural dynamic test scenes with exact ground truth.

A scene is a handful of spatial regions, each following one motion regime:

  polynomial  smooth quadratic drift, coherent across the region
  keyframe    piecewise-linear zigzag between waypoint times
  static      textured clutter that never moves

Regions are stored as expert models holding the true motion, so renders of
the ground truth reuse the normal forward path. All parameters are snapped
to float32 before rendering, so a scene reloaded from disk re-renders the
stored images to float32 rounding (well inside 1e-6), not merely to some
loose fitting tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, InvalidSpecError
from .experts import ExpertModel
from .rasterizer import SplatBatch, conic_and_radii, rasterize
from .scene import (Camera, Dataset, GaussianSet, View, normalize_quat,
                    project_gaussians, random_unit_quats, rot_to_quat)

REGION_REGIMES = ("polynomial", "keyframe", "static")


@dataclass
class RegionSpec:
    regime: str
    n_gaussians: int = 70
    center: tuple = (0.0, 0.0, 0.0)
    extent: tuple = (0.7, 0.7, 0.3)
    amplitude: float = 0.4
    n_keys: int = 5
    opacity_range: tuple = (0.4, 0.9)

    def __post_init__(self):
        if self.regime not in REGION_REGIMES:
            raise InvalidSpecError(f"unknown region regime {self.regime!r}")
        if self.n_gaussians <= 0:
            raise InvalidSpecError("region needs at least one gaussian")
        if self.amplitude < 0:
            raise InvalidSpecError("amplitude must be non-negative")
        if self.n_keys < 2:
            raise InvalidSpecError("keyframe regime needs at least two keys")
        lo, hi = self.opacity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise InvalidSpecError("opacity_range must satisfy 0 <= lo <= hi <= 1")


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    n_views: int = 25
    test_every: int = 5
    cam_distance: float = 5.0
    orbit_deg: float = 0.0
    near_clip: float = 0.1
    regions: list = field(default_factory=lambda: [
        RegionSpec("polynomial", center=(-1.2, 0.0, 0.0)),
        RegionSpec("keyframe", center=(1.2, 0.0, 0.0)),
        RegionSpec("static", center=(0.0, 0.0, 0.6)),
    ])

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidSpecError("image dimensions must be positive")
        if self.n_views < 2:
            raise InvalidSpecError("need at least two views")
        if self.test_every < 2:
            raise InvalidSpecError("test_every must be >= 2")
        if not (10.0 <= self.fov_deg <= 140.0):
            raise InvalidSpecError("fov out of range")
        if not self.regions:
            raise InvalidSpecError("scene needs at least one region")


@dataclass
class SceneModel:
    """Ground truth: one expert per region plus its regime label."""

    regions: list          # list[ExpertModel]
    regimes: list          # list[str]

    def gaussians_at(self, t: float) -> GaussianSet:
        return GaussianSet.concatenate([_region_gaussians(r, t)
                                        for r in self.regions])

    def render(self, view: View) -> np.ndarray:
        gs = self.gaussians_at(view.time)
        proj = project_gaussians(view.camera, gs)
        batch = SplatBatch.from_projection(proj, gs.opacities, gs.colors)
        image, _ = rasterize(batch, view.camera.height, view.camera.width)
        return image

    def region_footprint(self, view: View, region: int) -> np.ndarray:
        """(H, W) bool mask of pixels a region's 3-sigma boxes touch."""
        gs = _region_gaussians(self.regions[region], view.time)
        proj = project_gaussians(view.camera, gs)
        mask = np.zeros((view.camera.height, view.camera.width), dtype=bool)
        if len(proj):
            _, radii = conic_and_radii(proj.cov2d)
            x0 = np.clip(np.floor(proj.mean2d[:, 0] - radii[:, 0]), 0,
                         view.camera.width).astype(int)
            x1 = np.clip(np.ceil(proj.mean2d[:, 0] + radii[:, 0]) + 1, 0,
                         view.camera.width).astype(int)
            y0 = np.clip(np.floor(proj.mean2d[:, 1] - radii[:, 1]), 0,
                         view.camera.height).astype(int)
            y1 = np.clip(np.ceil(proj.mean2d[:, 1] + radii[:, 1]) + 1, 0,
                         view.camera.height).astype(int)
            for a, b, c, d in zip(y0, y1, x0, x1):
                mask[a:b, c:d] = True
        return mask

    def moving_footprint(self, view: View) -> np.ndarray:
        mask = np.zeros((view.camera.height, view.camera.width), dtype=bool)
        for i, regime in enumerate(self.regimes):
            if regime != "static":
                mask |= self.region_footprint(view, i)
        return mask


def _region_gaussians(region: ExpertModel, t: float) -> GaussianSet:
    from .experts import gaussians_at
    return gaussians_at(region, t)


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _quantize_region(region: ExpertModel) -> ExpertModel:
    """Snap all parameters to float32 grid (quats re-normalized, as a load
    from disk would)."""
    base = GaussianSet(_f32(region.base.means), _f32(region.base.quats),
                       _f32(region.base.scales), _f32(region.base.opacities),
                       _f32(region.base.colors))
    motion = {k: _f32(v) for k, v in region.motion.items()}
    return ExpertModel(region.kind, base, motion)


def _build_region(spec: RegionSpec, rng: np.random.Generator) -> ExpertModel:
    n = spec.n_gaussians
    lo = np.asarray(spec.center) - np.asarray(spec.extent)
    hi = np.asarray(spec.center) + np.asarray(spec.extent)
    pos = rng.uniform(lo, hi, (n, 3))
    base = GaussianSet(
        pos,
        random_unit_quats(rng, n),
        rng.uniform(0.04, 0.10, (n, 3)),
        rng.uniform(spec.opacity_range[0], spec.opacity_range[1], n),
        rng.uniform(0.15, 0.95, (n, 3)),
    )
    depth_damp = np.array([1.0, 1.0, 0.3])   # keep motion mostly in-plane
    amp = spec.amplitude

    if spec.regime == "static":
        coeffs = pos[:, :, None].copy()
        return ExpertModel("polynomial", base, {"coeffs": coeffs})

    if spec.regime == "polynomial":
        d_mid = rng.uniform(-amp, amp, 3) * depth_damp
        d_end = rng.uniform(-amp, amp, 3) * depth_damp
        dm = d_mid + rng.normal(0.0, 0.1 * amp, (n, 3)) * depth_damp
        de = d_end + rng.normal(0.0, 0.1 * amp, (n, 3)) * depth_damp
        coeffs = np.zeros((n, 3, 3))
        coeffs[:, :, 0] = pos
        coeffs[:, :, 1] = 4.0 * dm - de        # through d(0.5)=dm, d(1)=de
        coeffs[:, :, 2] = 2.0 * de - 4.0 * dm
        return ExpertModel("polynomial", base, {"coeffs": coeffs})

    key_times = np.linspace(0.0, 1.0, spec.n_keys)
    offs = rng.uniform(-amp, amp, (spec.n_keys, 3)) * depth_damp
    offs[0] = 0.0
    jit = rng.normal(0.0, 0.05 * amp, (n, spec.n_keys, 3)) * depth_damp
    jit[:, 0] = 0.0
    key_means = pos[:, None, :] + offs[None, :, :] + jit
    return ExpertModel("keyframe", base,
                       {"key_times": key_times, "key_means": key_means})


def _orbit_camera(spec: SceneSpec, angle: float) -> Camera:
    pos = np.array([spec.cam_distance * np.sin(angle), 0.0,
                    -spec.cam_distance * np.cos(angle)])
    fwd = -pos / np.linalg.norm(pos)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right /= np.linalg.norm(right)
    up = np.cross(fwd, right)
    rot = np.stack([right, up, fwd], axis=1)
    f = spec.width / (2.0 * np.tan(np.deg2rad(spec.fov_deg) / 2.0))
    return Camera(spec.width, spec.height, f, f, spec.width / 2.0,
                  spec.height / 2.0, rot_to_quat(rot), pos, spec.near_clip)


def synth_scene(spec: SceneSpec, seed: int):
    """Deterministic scene + dataset for a seed. Returns (SceneModel, Dataset).

    Every derived stream hangs off one SeedSequence, so equal seeds give
    identical output and different seeds decorrelate everything.
    """
    if seed < 0:
        raise InvalidParameterError("seed must be non-negative")
    streams = np.random.SeedSequence(seed).spawn(len(spec.regions))
    regions = [_quantize_region(_build_region(rs, np.random.Generator(np.random.PCG64(s))))
               for rs, s in zip(spec.regions, streams)]
    model = SceneModel(regions, [r.regime for r in spec.regions])

    times = np.linspace(0.0, 1.0, spec.n_views)
    half = np.deg2rad(spec.orbit_deg) / 2.0
    angles = (np.linspace(-half, half, spec.n_views) if spec.orbit_deg > 0
              else np.zeros(spec.n_views))
    views = []
    for t, a in zip(times, angles):
        view = View(_orbit_camera(spec, a), float(t))
        view.image = _f32(model.render(view))
        views.append(view)
    test_idx = list(range(spec.test_every // 2, spec.n_views, spec.test_every))
    return model, Dataset(views, test_idx)
