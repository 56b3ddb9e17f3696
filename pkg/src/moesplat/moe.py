"""The full mixture model and its two equivalent render paths.

Multi-pass: render each expert separately, then let the router blend.
Single-pass: merge every expert's gaussians into one batch, project and
depth-sort once, and composite all experts in one kernel sweep that also
carries the router's weight planes as extra channels. With independent
per-expert transmittance (the default) the result matches the multi-pass
path exactly; shared transmittance composites everything through one
occlusion budget and is kept as a study variant.

Work counters make the claim checkable: the fused path reports exactly one
projection pass and one depth sort per view, for any number of experts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InvalidParameterError, StateError
from .experts import ExpertModel, gaussians_at
from .instrumentation import COUNTERS
from .nn import conv3x3_forward, relu_forward
from .rasterizer import conic_and_radii
from .rasterizer.backend import fused_forward
from .router import (ROUTER_KINDS, RouterOut, VolumeAwarePixelRouter,
                     VolumeRouter, build_view_context, blend, make_router,
                     softmax_maps)
from .scene import GaussianSet, View, project_gaussians, ray_plane
from .storage import load_bundle, load_expert, save_bundle, save_expert

SCHEMA_VERSION = 1


@dataclass
class MoEModel:
    experts: list
    router: object

    @property
    def router_kind(self) -> str:
        return self.router.kind

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class MergedBatch:
    """All experts' splats for one view, projected and depth-sorted once."""

    height: int
    width: int
    t: float
    n_experts: int
    mean2d: np.ndarray      # (M, 2) sorted
    conic: np.ndarray       # (M, 3)
    radii: np.ndarray       # (M, 2)
    opacity: np.ndarray     # (M,)
    channels: np.ndarray    # (M, C)
    expert_id: np.ndarray   # (M,) int32
    sorted: bool = False


def build_merged_batch(model: MoEModel, view: View) -> MergedBatch:
    """One projection, one sort, covering every expert."""
    sets = [gaussians_at(e, view.time) for e in model.experts]
    merged = GaussianSet.concatenate(sets)
    sizes = [len(s) for s in sets]
    expert_of = np.repeat(np.arange(len(sets), dtype=np.int32), sizes)
    local = np.concatenate([np.arange(n, dtype=np.int64) for n in sizes])

    router = model.router
    opacities = merged.opacities
    if isinstance(router, VolumeRouter):
        gate = np.concatenate([1.0 / (1.0 + np.exp(-g)) for g in router.gate])
        opacities = opacities * gate
        channels = merged.colors
    elif isinstance(router, VolumeAwarePixelRouter):
        w = np.concatenate(router.w)
        wd = np.concatenate(router.w_dir)
        wt = np.concatenate(router.w_time)
        channels = np.concatenate(
            [merged.colors, w[:, None], wd[:, None],
             (view.time * wt)[:, None]], axis=1)
    else:
        channels = merged.colors

    proj = project_gaussians(view.camera, merged)
    rows = proj.index
    depth = proj.depth
    eid = expert_of[rows]
    COUNTERS.bump("depth_sorts")
    order = np.lexsort((local[rows], eid, depth))

    conic, radii = conic_and_radii(proj.cov2d[order]) if len(rows) else (
        np.zeros((0, 3)), np.zeros((0, 2)))
    return MergedBatch(
        view.camera.height, view.camera.width, view.time, len(sets),
        proj.mean2d[order], conic, radii, opacities[rows][order],
        channels[rows][order], eid[order].astype(np.int32), sorted=True)


def render_single_pass(batch: MergedBatch, shared_t: bool = False):
    """(images (K, H, W, C), final_t (K or 1, H*W)) in one kernel sweep."""
    if not batch.sorted:
        raise StateError("merged batch must be depth-sorted before rendering")
    COUNTERS.bump("fused_passes")
    return fused_forward(batch.mean2d, batch.conic, batch.radii, batch.opacity,
                         batch.channels, batch.expert_id, batch.n_experts,
                         batch.height, batch.width, shared_t)


def _gating_from_planes(router: VolumeAwarePixelRouter, planes, ray, t):
    """planes: (K, H, W, 3) splatted weight triplets (time already scaled)."""
    ray_planes = np.moveaxis(ray, 2, 0)
    logits = []
    for k in range(router.n_experts):
        phi_in = np.concatenate([np.moveaxis(planes[k][:, :, 1:], 2, 0), ray_planes])
        h, _ = conv3x3_forward(phi_in, router.phi_w0, router.phi_b0)
        h, _ = relu_forward(h)
        refined, _ = conv3x3_forward(h, router.phi_w1, router.phi_b1)
        logits.append(planes[k][:, :, 0] + refined[0])
    return softmax_maps(np.stack(logits))


def render_moe(model: MoEModel, view: View, single_pass: bool = False,
               shared_t: bool = False) -> RouterOut:
    """Blended mixture render; single_pass toggles the fused path."""
    if shared_t and not single_pass:
        raise InvalidParameterError("shared transmittance requires single_pass")
    if not single_pass:
        ctx = build_view_context(model.experts, view)
        return model.router.forward(ctx)

    batch = build_merged_batch(model, view)
    images, final_t = render_single_pass(batch, shared_t)
    router = model.router

    if isinstance(router, VolumeRouter):
        if shared_t:
            raise InvalidParameterError(
                "volume routing already sums experts; shared_t does not apply")
        alphas = 1.0 - final_t.reshape(router.n_experts, batch.height, batch.width)
        norm = np.maximum(alphas.sum(axis=0), 1.0)
        image = images.sum(axis=0) / norm[:, :, None]
        return RouterOut(image, alphas / norm[None], None, {"final_t": final_t})

    if isinstance(router, VolumeAwarePixelRouter):
        gating = _gating_from_planes(router, images[:, :, :, 3:],
                                     ray_plane(view.camera), view.time)
        color = images[:, :, :, :3]
    else:
        ctx_like = _CoordContext(view)
        planes = router._input_planes(ctx_like)
        h, _ = conv3x3_forward(planes, router.w0, router.b0)
        h, _ = relu_forward(h)
        logits, _ = conv3x3_forward(h, router.w1, router.b1)
        gating = softmax_maps(logits)
        color = images
    return RouterOut(blend(gating, color), gating, None, {"final_t": final_t})


class _CoordContext:
    """Just enough context for PixelRouter plane construction."""

    def __init__(self, view: View):
        self.view = view
        self.ray = ray_plane(view.camera)
        self.t = view.time


# ---------------------------------------------------------------------------
# persistence


def save_moe(out_dir, model: MoEModel) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, e in enumerate(model.experts):
        name = f"expert_{i:02d}.expert"
        save_expert(os.path.join(out_dir, name), e)
        names.append(name)
    save_bundle(os.path.join(out_dir, "router.bin"), "router",
                {"router_kind": model.router_kind},
                model.router.param_arrays())
    with open(os.path.join(out_dir, "model.json"), "w") as f:
        json.dump({"schema_version": SCHEMA_VERSION, "experts": names,
                   "router": "router.bin", "router_kind": model.router_kind},
                  f, indent=1, sort_keys=True)


def load_moe(out_dir) -> MoEModel:
    path = os.path.join(out_dir, "model.json")
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"no model at {out_dir}") from e
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version")
    if doc.get("router_kind") not in ROUTER_KINDS:
        raise DataError(f"{path}: unknown router kind {doc.get('router_kind')!r}")
    experts = [load_expert(os.path.join(out_dir, n)) for n in doc["experts"]]
    kind, meta, arrays = load_bundle(os.path.join(out_dir, doc["router"]))
    if kind != "router" or meta.get("router_kind") != doc["router_kind"]:
        raise DataError(f"{out_dir}: router file does not match model.json")
    router = make_router(doc["router_kind"], experts, np.random.default_rng(0))
    expected = router.param_arrays()
    if set(expected) != set(arrays):
        raise DataError(f"{out_dir}: router parameter names do not match")
    for k, v in arrays.items():
        if v.shape != expected[k].shape:
            raise DataError(f"{out_dir}: router array {k} has wrong shape")
    router.set_param_arrays(arrays)
    return MoEModel(experts, router)
