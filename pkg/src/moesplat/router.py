"""Routers that blend per-expert renders into one image.

Three designs, trained with experts frozen:

  VolumeAwarePixelRouter  each gaussian carries a weight triplet
                          (w, w_dir, t * w_time) that is splatted through the
                          expert's own compositing graph; a small shared conv
                          refines the direction/time planes against the view
                          rays and the result is added to the plain weight
                          plane before a per-pixel softmax over experts.
  PixelRouter             conv over pixel coordinates, time and rays only;
                          knows nothing about scene volume.
  VolumeRouter            per-gaussian opacity gates, no image-space stage;
                          expert renders are summed and normalized by their
                          stacked alpha coverage.

All routers expose param_arrays() plus forward/backward with matching
gradient dicts, so the training loop and optimizer treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .experts import render_expert
from .nn import conv3x3_backward, conv3x3_forward, he_normal, relu_backward, relu_forward
from .rasterizer import (SplatBatch, composite_backward, rasterize, replay,
                         replay_channel_backward)
from .scene import View, ray_plane

ROUTER_KINDS = ("volume_aware", "pixel", "volume")

PHI_HIDDEN = 8
PHI_INPUT_PLANES = 5   # weight-dir, weight-time, ray xyz


@dataclass
class ViewContext:
    """Per-view cache shared by all routers: frozen expert forward passes."""

    view: View
    ray: np.ndarray        # (H, W, 3)
    renders: list          # list[ExpertRender], one per expert

    @property
    def t(self) -> float:
        return self.view.time

    @property
    def images(self) -> list:
        return [r.image for r in self.renders]


def build_view_context(experts: list, view: View) -> ViewContext:
    renders = [render_expert(e, view, expert_id=k) for k, e in enumerate(experts)]
    return ViewContext(view, ray_plane(view.camera), renders)


def blend(gating: np.ndarray, images) -> np.ndarray:
    """sum_k G_k * I_k for gating (K, H, W) and K images (H, W, C)."""
    images = np.asarray(images)
    if gating.shape[0] != images.shape[0]:
        raise InvalidInputError("gating/expert count mismatch")
    return np.einsum("khw,khwc->hwc", gating, images)


def softmax_maps(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the leading (expert) axis, max-subtracted."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _softmax_backward(gating: np.ndarray, d_gating: np.ndarray) -> np.ndarray:
    inner = (gating * d_gating).sum(axis=0, keepdims=True)
    return gating * (d_gating - inner)


def _weight_channels(t: float, w, w_dir, w_time) -> np.ndarray:
    return np.stack([w, w_dir, t * w_time], axis=1)


class VolumeAwarePixelRouter:
    """Splatted per-gaussian weights refined by a shared conv over rays."""

    kind = "volume_aware"

    def __init__(self, expert_sizes, rng: np.random.Generator):
        self.expert_sizes = [int(n) for n in expert_sizes]
        if not self.expert_sizes:
            raise InvalidParameterError("router needs at least one expert")
        self.w = [np.zeros(n) for n in self.expert_sizes]
        self.w_dir = [rng.normal(0.0, 0.01, n) for n in self.expert_sizes]
        self.w_time = [rng.normal(0.0, 0.01, n) for n in self.expert_sizes]
        self.phi_w0 = he_normal(rng, (PHI_HIDDEN, PHI_INPUT_PLANES, 3, 3),
                                fan_in=PHI_INPUT_PLANES * 9)
        self.phi_b0 = np.zeros(PHI_HIDDEN)
        self.phi_w1 = np.zeros((1, PHI_HIDDEN, 3, 3))   # starts as the zero map
        self.phi_b1 = np.zeros(1)

    @property
    def n_experts(self) -> int:
        return len(self.expert_sizes)

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in range(self.n_experts):
            out[f"w.{k}"] = self.w[k]
            out[f"w_dir.{k}"] = self.w_dir[k]
            out[f"w_time.{k}"] = self.w_time[k]
        out["phi.w0"] = self.phi_w0
        out["phi.b0"] = self.phi_b0
        out["phi.w1"] = self.phi_w1
        out["phi.b1"] = self.phi_b1
        return out

    def set_param_arrays(self, arrays: dict) -> None:
        for k in range(self.n_experts):
            self.w[k] = arrays[f"w.{k}"]
            self.w_dir[k] = arrays[f"w_dir.{k}"]
            self.w_time[k] = arrays[f"w_time.{k}"]
        self.phi_w0 = arrays["phi.w0"]
        self.phi_b0 = arrays["phi.b0"]
        self.phi_w1 = arrays["phi.w1"]
        self.phi_b1 = arrays["phi.b1"]

    def _check(self, ctx: ViewContext) -> None:
        if len(ctx.renders) != self.n_experts:
            raise InvalidInputError("context expert count mismatch")
        for k, r in enumerate(ctx.renders):
            if len(r.gaussians) != self.expert_sizes[k]:
                raise InvalidInputError(f"expert {k} size changed since router init")

    def splat_planes(self, ctx: ViewContext, k: int) -> np.ndarray:
        """(H, W, 3) weight planes for expert k through its cached graph."""
        r = ctx.renders[k]
        ch = _weight_channels(ctx.t, self.w[k], self.w_dir[k], self.w_time[k])
        return replay(r.graph, ch[r.proj.index])

    def forward(self, ctx: ViewContext):
        self._check(ctx)
        ray_planes = np.moveaxis(ctx.ray, 2, 0)   # (3, H, W)
        planes, caches, logits = [], [], []
        for k in range(self.n_experts):
            p = self.splat_planes(ctx, k)
            phi_in = np.concatenate([np.moveaxis(p[:, :, 1:], 2, 0), ray_planes])
            h_pre, c1 = conv3x3_forward(phi_in, self.phi_w0, self.phi_b0)
            h, mask = relu_forward(h_pre)
            refined, c2 = conv3x3_forward(h, self.phi_w1, self.phi_b1)
            logits.append(p[:, :, 0] + refined[0])
            planes.append(p)
            caches.append((c1, mask, c2))
        logits = np.stack(logits)
        gating = softmax_maps(logits)
        image = blend(gating, ctx.images)
        return RouterOut(image, gating, logits,
                         {"planes": planes, "conv": caches, "ctx": ctx})

    def backward(self, out: "RouterOut", d_image=None, d_gating=None) -> dict:
        ctx = out.cache["ctx"]
        d_g = np.zeros_like(out.gating)
        if d_image is not None:
            d_g += np.einsum("hwc,khwc->khw", np.asarray(d_image, dtype=np.float64),
                             np.asarray(ctx.images))
        if d_gating is not None:
            d_g += d_gating
        d_logits = _softmax_backward(out.gating, d_g)

        grads = {"phi.w0": np.zeros_like(self.phi_w0),
                 "phi.b0": np.zeros_like(self.phi_b0),
                 "phi.w1": np.zeros_like(self.phi_w1),
                 "phi.b1": np.zeros_like(self.phi_b1)}
        for k in range(self.n_experts):
            c1, mask, c2 = out.cache["conv"][k]
            d_refined = d_logits[k][None]
            dh, dw1, db1 = conv3x3_backward(c2, d_refined)
            dh = relu_backward(mask, dh)
            d_phi_in, dw0, db0 = conv3x3_backward(c1, dh)
            grads["phi.w0"] += dw0
            grads["phi.b0"] += db0
            grads["phi.w1"] += dw1
            grads["phi.b1"] += db1

            d_planes = np.stack([d_logits[k], d_phi_in[0], d_phi_in[1]], axis=2)
            r = ctx.renders[k]
            d_ch = replay_channel_backward(r.graph, d_planes)
            n = self.expert_sizes[k]
            dw = np.zeros(n)
            dwd = np.zeros(n)
            dwt = np.zeros(n)
            rows = r.proj.index
            dw[rows] = d_ch[:, 0]
            dwd[rows] = d_ch[:, 1]
            dwt[rows] = ctx.t * d_ch[:, 2]
            grads[f"w.{k}"] = dw
            grads[f"w_dir.{k}"] = dwd
            grads[f"w_time.{k}"] = dwt
        return grads


class PixelRouter:
    """Gating from pixel position, time and ray direction alone."""

    kind = "pixel"

    def __init__(self, n_experts: int, rng: np.random.Generator):
        if n_experts < 1:
            raise InvalidParameterError("router needs at least one expert")
        self.n_experts = n_experts
        in_planes = 6   # x, y, t, ray xyz
        self.w0 = he_normal(rng, (PHI_HIDDEN, in_planes, 3, 3), fan_in=in_planes * 9)
        self.b0 = np.zeros(PHI_HIDDEN)
        self.w1 = np.zeros((n_experts, PHI_HIDDEN, 3, 3))
        self.b1 = np.zeros(n_experts)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0, "b0": self.b0, "w1": self.w1, "b1": self.b1}

    def set_param_arrays(self, arrays: dict) -> None:
        self.w0, self.b0 = arrays["w0"], arrays["b0"]
        self.w1, self.b1 = arrays["w1"], arrays["b1"]

    @staticmethod
    def _input_planes(ctx: ViewContext) -> np.ndarray:
        cam = ctx.view.camera
        xs = (np.arange(cam.width) + 0.5) / cam.width
        ys = (np.arange(cam.height) + 0.5) / cam.height
        gx, gy = np.meshgrid(xs, ys)
        return np.concatenate([gx[None], gy[None],
                               np.full((1,) + gx.shape, ctx.t),
                               np.moveaxis(ctx.ray, 2, 0)])

    def forward(self, ctx: ViewContext):
        if len(ctx.renders) != self.n_experts:
            raise InvalidInputError("context expert count mismatch")
        planes = self._input_planes(ctx)
        h_pre, c1 = conv3x3_forward(planes, self.w0, self.b0)
        h, mask = relu_forward(h_pre)
        logits, c2 = conv3x3_forward(h, self.w1, self.b1)
        gating = softmax_maps(logits)
        image = blend(gating, ctx.images)
        return RouterOut(image, gating, logits, {"conv": (c1, mask, c2), "ctx": ctx})

    def backward(self, out: "RouterOut", d_image=None, d_gating=None) -> dict:
        ctx = out.cache["ctx"]
        d_g = np.zeros_like(out.gating)
        if d_image is not None:
            d_g += np.einsum("hwc,khwc->khw", np.asarray(d_image, dtype=np.float64),
                             np.asarray(ctx.images))
        if d_gating is not None:
            d_g += d_gating
        d_logits = _softmax_backward(out.gating, d_g)
        c1, mask, c2 = out.cache["conv"]
        dh, dw1, db1 = conv3x3_backward(c2, d_logits)
        dh = relu_backward(mask, dh)
        _, dw0, db0 = conv3x3_backward(c1, dh)
        return {"w0": dw0, "b0": db0, "w1": dw1, "b1": db1}


class VolumeRouter:
    """Per-gaussian opacity gates; mixing happens inside the volume.

    Expert images are rendered with gated opacities, summed, and divided by
    the stacked alpha coverage (clamped at one). The normalizer is treated
    as constant in the backward pass.
    """

    kind = "volume"

    def __init__(self, expert_sizes, rng: np.random.Generator):
        self.expert_sizes = [int(n) for n in expert_sizes]
        if not self.expert_sizes:
            raise InvalidParameterError("router needs at least one expert")
        self.gate = [rng.normal(0.0, 0.01, n) for n in self.expert_sizes]

    @property
    def n_experts(self) -> int:
        return len(self.expert_sizes)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {f"gate.{k}": self.gate[k] for k in range(self.n_experts)}

    def set_param_arrays(self, arrays: dict) -> None:
        self.gate = [arrays[f"gate.{k}"] for k in range(self.n_experts)]

    def forward(self, ctx: ViewContext):
        if len(ctx.renders) != self.n_experts:
            raise InvalidInputError("context expert count mismatch")
        cam = ctx.view.camera
        images, graphs, sigmoids, alphas = [], [], [], []
        for k in range(self.n_experts):
            r = ctx.renders[k]
            s = 1.0 / (1.0 + np.exp(-self.gate[k]))
            gated = r.gaussians.opacities * s
            batch = SplatBatch.from_projection(r.proj, gated, r.gaussians.colors, k)
            img, graph = rasterize(batch, cam.height, cam.width)
            images.append(img)
            graphs.append(graph)
            sigmoids.append(s)
            alphas.append(1.0 - graph.final_t.reshape(cam.height, cam.width))
        alphas = np.stack(alphas)
        norm = np.maximum(alphas.sum(axis=0), 1.0)
        image = np.sum(images, axis=0) / norm[:, :, None]
        coverage = alphas / norm[None]
        return RouterOut(image, coverage, None,
                         {"graphs": graphs, "sigmoids": sigmoids, "norm": norm,
                          "ctx": ctx})

    def backward(self, out: "RouterOut", d_image=None, d_gating=None) -> dict:
        if d_gating is not None:
            raise InvalidParameterError("volume router has no gating parameters")
        ctx = out.cache["ctx"]
        norm = out.cache["norm"]
        d_per = np.asarray(d_image, dtype=np.float64) / norm[:, :, None]
        grads = {}
        for k in range(self.n_experts):
            r = ctx.renders[k]
            g = composite_backward(out.cache["graphs"][k], d_per)
            n = self.expert_sizes[k]
            d_gate = np.zeros(n)
            s = out.cache["sigmoids"][k]
            rows = r.proj.index
            d_gate[rows] = (g.opacity * r.gaussians.opacities[rows]
                            * (s * (1.0 - s))[rows])
            grads[f"gate.{k}"] = d_gate
        return grads


@dataclass
class RouterOut:
    image: np.ndarray          # (H, W, 3)
    gating: np.ndarray         # (K, H, W); coverage shares for VolumeRouter
    logits: np.ndarray | None
    cache: dict


def make_router(kind: str, experts: list, rng: np.random.Generator):
    sizes = [len(e.base) for e in experts]
    if kind == "volume_aware":
        return VolumeAwarePixelRouter(sizes, rng)
    if kind == "pixel":
        return PixelRouter(len(experts), rng)
    if kind == "volume":
        return VolumeRouter(sizes, rng)
    raise InvalidParameterError(f"unknown router kind {kind!r}")
