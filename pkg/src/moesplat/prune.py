"""Gate-aware pruning.

A gaussian matters to the mixture insofar as the router's gating responds
to its weight triplet. Per training view, the gradient of each expert's
aggregated gating plane with respect to that expert's own (w, w_dir, w_time)
triplets gives a per-gaussian sensitivity vector; its norm, averaged over
views, is the importance score. Pruning drops low scores either below a
threshold or by global ratio, then the router is optionally fine-tuned
between progressive rounds.

Reductions over the gating plane:
  sum              d(sum_u G_k(u)) / d triplet, one backward per expert
  mean             same with a 1/(H*W) factor
  pixel_frobenius  sqrt(sum_u sum_p (dG_k(u)/dp_i)^2): needs per-pixel
                   jacobian rows, computed by forward-mode tangents pushed
                   through the linearized conv (exact, but heavier)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .experts import ExpertModel
from .router import VolumeAwarePixelRouter, build_view_context
from .scene import Dataset

REDUCTIONS = ("sum", "mean", "pixel_frobenius")


def importance_scores(experts: list, router, dataset: Dataset,
                      reduction: str = "sum") -> list:
    """Per-expert (N_k,) importance arrays, averaged over training views."""
    if not isinstance(router, VolumeAwarePixelRouter):
        raise InvalidParameterError(
            "importance scores need per-gaussian router weights")
    if reduction not in REDUCTIONS:
        raise InvalidParameterError(f"unknown reduction {reduction!r}")
    views = dataset.train_views()
    if not views:
        raise InvalidInputError("dataset has no training views")

    acc = [np.zeros(n) for n in router.expert_sizes]
    for view in views:
        ctx = build_view_context(experts, view)
        out = router.forward(ctx)
        if reduction == "pixel_frobenius":
            per_view = _frobenius_scores(router, ctx, out)
            for k in range(router.n_experts):
                acc[k] += per_view[k]
            continue
        scale = 1.0 if reduction == "sum" else 1.0 / out.gating[0].size
        for k in range(router.n_experts):
            d_gating = np.zeros_like(out.gating)
            d_gating[k] = scale
            grads = router.backward(out, d_gating=d_gating)
            triplet = np.stack([grads[f"w.{k}"], grads[f"w_dir.{k}"],
                                grads[f"w_time.{k}"]])
            acc[k] += np.linalg.norm(triplet, axis=0)
    return [a / len(views) for a in acc]


def _depthwise3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same 3x3 kernel correlated over every (H, W) slice of (M, H, W)."""
    m, h, w = x.shape
    p = np.zeros((m, h + 2, w + 2))
    p[:, 1:-1, 1:-1] = x
    out = np.zeros_like(x)
    for ki in range(3):
        for kj in range(3):
            out += kernel[ki, kj] * p[:, ki:ki + h, kj:kj + w]
    return out


def _splat_planes_per_gaussian(render, n: int) -> np.ndarray:
    """(N, H, W) alpha*T footprint of each gaussian in a cached render."""
    graph = render.graph
    h, w = graph.height, graph.width
    planes = np.zeros((n, h * w))
    if graph.n_contributors:
        counts = np.diff(graph.pix_offsets)
        pix = np.repeat(np.arange(h * w), counts)
        rows = render.proj.index[graph.order[graph.idx]]
        np.add.at(planes, (rows, pix), graph.alpha * graph.tbefore)
    return planes.reshape(n, h, w)


def _linearized_phi(router, cache, tangent: np.ndarray, plane: int) -> np.ndarray:
    """Push (M, H, W) tangents on one conv input plane through frozen-mask phi."""
    _, mask, _ = cache
    out = np.zeros_like(tangent)
    for c in range(router.phi_w0.shape[0]):
        h_dot = _depthwise3x3(tangent, router.phi_w0[c, plane])
        h_dot *= mask[c][None]
        out += _depthwise3x3(h_dot, router.phi_w1[0, c])
    return out


def _frobenius_scores(router, ctx, out) -> list:
    scores = []
    for k in range(router.n_experts):
        n = router.expert_sizes[k]
        splats = _splat_planes_per_gaussian(ctx.renders[k], n)
        a = (out.gating[k] * (1.0 - out.gating[k]))[None] ** 2
        total = (a * splats ** 2).sum(axis=(1, 2))                      # w
        cache = out.cache["conv"][k]
        for plane, factor in ((0, 1.0), (1, ctx.t)):                   # w_dir, w_time
            dot = _linearized_phi(router, cache, factor * splats, plane)
            total += (a * dot ** 2).sum(axis=(1, 2))
        scores.append(np.sqrt(total))
    return scores


def threshold_masks(scores: list, tau: float) -> list:
    """Keep gaussians whose importance is at least tau (strictly below goes)."""
    if tau < 0:
        raise InvalidParameterError("threshold must be non-negative")
    return [s >= tau for s in scores]


def ratio_masks(scores: list, rho: float) -> list:
    """Prune the globally lowest-scoring fraction rho.

    Candidates are ordered by (score, expert, index) so ties resolve the
    same way every run.
    """
    if not (0.0 <= rho < 1.0):
        raise InvalidParameterError("ratio must lie in [0, 1)")
    flat = np.concatenate(scores)
    expert_of = np.concatenate([np.full(len(s), k) for k, s in enumerate(scores)])
    local = np.concatenate([np.arange(len(s)) for s in scores])
    n_prune = int(np.floor(rho * len(flat)))
    order = np.lexsort((local, expert_of, flat))
    masks = [np.ones(len(s), dtype=bool) for s in scores]
    for j in order[:n_prune]:
        masks[expert_of[j]][local[j]] = False
    return masks


def apply_prune(experts: list, router: VolumeAwarePixelRouter, masks: list):
    """New experts/router with pruned gaussians removed. Inputs untouched."""
    if len(masks) != len(experts):
        raise InvalidInputError("one mask per expert required")
    new_experts = []
    for e, mask in zip(experts, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(e.base),):
            raise InvalidInputError("mask length does not match expert")
        if not mask.any():
            raise InvalidParameterError("pruning would empty an expert")
        motion = {k: (v[mask].copy() if k in _PER_GAUSSIAN_MOTION else v.copy())
                  for k, v in e.motion.items()}
        new_experts.append(ExpertModel(e.kind, e.base.subset(mask), motion))
    new_router = VolumeAwarePixelRouter([len(e.base) for e in new_experts],
                                        np.random.default_rng(0))
    for k, mask in enumerate(masks):
        new_router.w[k] = router.w[k][mask].copy()
        new_router.w_dir[k] = router.w_dir[k][mask].copy()
        new_router.w_time[k] = router.w_time[k][mask].copy()
    new_router.phi_w0 = router.phi_w0.copy()
    new_router.phi_b0 = router.phi_b0.copy()
    new_router.phi_w1 = router.phi_w1.copy()
    new_router.phi_b1 = router.phi_b1.copy()
    return new_experts, new_router


# motion arrays with one leading row per gaussian (MLP weights are shared)
_PER_GAUSSIAN_MOTION = frozenset({"coeffs", "key_means", "latents"})


@dataclass
class PruneRound:
    scores: list
    masks: list
    kept: int
    total: int


def progressive_prune(experts: list, router, dataset: Dataset, cfg,
                      rng: np.random.Generator):
    """Prune in rounds, fine-tuning the router after each round.

    Returns (experts, router, rounds). cfg supplies reduction, the policy
    (threshold tau or ratio rho; exactly one), round count, and fine-tune
    step budget.
    """
    from .training import train_stage2
    if (cfg.prune_threshold is None) == (cfg.prune_ratio is None):
        raise InvalidParameterError("set exactly one of threshold and ratio")
    rounds = []
    for r in range(cfg.prune_rounds):
        scores = importance_scores(experts, router, dataset, cfg.prune_reduction)
        if cfg.prune_threshold is not None:
            masks = threshold_masks(scores, cfg.prune_threshold)
        else:
            # split the total ratio evenly across rounds
            per_round = 1.0 - (1.0 - cfg.prune_ratio) ** (1.0 / cfg.prune_rounds)
            masks = ratio_masks(scores, per_round)
        experts, router = apply_prune(experts, router, masks)
        rounds.append(PruneRound(scores, masks,
                                 sum(int(m.sum()) for m in masks),
                                 sum(len(m) for m in masks)))
        # removing splats also removes their routing weight, which shifts the
        # blend wherever gating was soft; the router finetune re-balances it
        if cfg.prune_finetune_steps > 0:
            train_stage2(experts, router, dataset, cfg, rng,
                         steps=cfg.prune_finetune_steps)
    return experts, router, rounds


def write_prune_report(path, rounds: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "expert", "gaussian", "score", "kept"])
        for r, info in enumerate(rounds):
            for k, (scores, mask) in enumerate(zip(info.scores, info.masks)):
                for i, (s, keep) in enumerate(zip(scores, mask)):
                    w.writerow([r, k, i, f"{s:.8e}", int(keep)])
