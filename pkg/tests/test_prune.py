"""Importance scoring and pruning policies."""

import numpy as np
import pytest

from moesplat.errors import InvalidInputError, InvalidParameterError
from moesplat.experts import init_expert
from moesplat.prune import (apply_prune, importance_scores, progressive_prune,
                            ratio_masks, threshold_masks, write_prune_report)
from moesplat.router import build_view_context, make_router
from moesplat.scene import Camera, Dataset, View

from oracles import max_rel_err


def make_setup(rng, n=5, size=12, n_views=2):
    f = size / (2.0 * np.tan(np.radians(55.0) / 2.0))
    views = []
    for i in range(n_views):
        cam = Camera(width=size, height=size, fx=f, fy=f, cx=size / 2.0,
                     cy=size / 2.0, quat=np.array([1.0, 0, 0, 0]),
                     position=np.array([0.0, 0.0, -4.0]))
        img = np.full((size, size, 3), 0.3)
        views.append(View(cam, i / max(n_views - 1, 1), img))
    ds = Dataset(views)
    experts = []
    for _ in range(2):
        pts = rng.normal(0.0, 0.5, (n, 3)) * np.array([1.0, 1.0, 0.3])
        e = init_expert("polynomial", pts, n, rng, scale_range=(0.15, 0.3))
        experts.append(e)
    router = make_router("volume_aware", experts, rng)
    for arr in router.param_arrays().values():
        arr += rng.normal(0.0, 0.1, arr.shape)
    return experts, router, ds


def gating_fd_scores(experts, router, ds, k, squared_pixels, h=1e-6):
    """FD importance for expert k, averaged over views like the real thing.

    squared_pixels=False reduces each gating plane by summation before the
    triplet norm; True takes the per-pixel Frobenius norm instead.
    """
    params = router.param_arrays()
    n = router.expert_sizes[k]
    views = ds.train_views()
    out = np.zeros(n)
    for v in views:
        grad3 = np.zeros((3, n))
        sq = np.zeros(n)
        for row, name in enumerate((f"w.{k}", f"w_dir.{k}", f"w_time.{k}")):
            arr = params[name]
            for i in range(n):
                keep = arr[i]
                arr[i] = keep + h
                gp = router.forward(build_view_context(experts, v)).gating[k]
                arr[i] = keep - h
                gm = router.forward(build_view_context(experts, v)).gating[k]
                arr[i] = keep
                jac = (gp - gm) / (2.0 * h)
                grad3[row, i] = jac.sum()
                sq[i] += (jac ** 2).sum()
        out += np.sqrt(sq) if squared_pixels else np.linalg.norm(grad3, axis=0)
    return out / len(views)


def test_importance_sum_matches_fd():
    rng = np.random.default_rng(0)
    experts, router, ds = make_setup(rng)
    got = importance_scores(experts, router, ds, "sum")
    for k in range(2):
        ref = gating_fd_scores(experts, router, ds, k, squared_pixels=False)
        assert max_rel_err(got[k], ref, floor=1e-6) < 1e-4, k


def test_importance_mean_is_scaled_sum():
    rng = np.random.default_rng(1)
    experts, router, ds = make_setup(rng)
    s = importance_scores(experts, router, ds, "sum")
    m = importance_scores(experts, router, ds, "mean")
    for a, b in zip(s, m):
        assert np.allclose(b, a / (12 * 12), rtol=1e-12, atol=0)


def test_importance_frobenius_matches_fd_jacobian():
    rng = np.random.default_rng(2)
    experts, router, ds = make_setup(rng, n=4, size=10, n_views=1)
    got = importance_scores(experts, router, ds, "pixel_frobenius")
    for k in range(2):
        ref = gating_fd_scores(experts, router, ds, k, squared_pixels=True)
        assert max_rel_err(got[k], ref, floor=1e-6) < 5e-4, k


def test_importance_validation():
    rng = np.random.default_rng(3)
    experts, router, ds = make_setup(rng, n=3)
    with pytest.raises(InvalidParameterError):
        importance_scores(experts, router, ds, "max")
    pr = make_router("pixel", experts, rng)
    with pytest.raises(InvalidParameterError):
        importance_scores(experts, pr, ds, "sum")
    with pytest.raises(InvalidInputError):
        importance_scores(experts, router, Dataset(ds.views, [0, 1]), "sum")


def test_threshold_masks():
    scores = [np.array([0.1, 0.5, 0.2]), np.array([0.0, 0.3])]
    masks = threshold_masks(scores, 0.2)
    assert masks[0].tolist() == [False, True, True]   # >= tau survives
    assert masks[1].tolist() == [False, True]
    with pytest.raises(InvalidParameterError):
        threshold_masks(scores, -0.1)


def test_ratio_masks_prune_lowest_globally():
    scores = [np.array([0.9, 0.1, 0.5]), np.array([0.2, 0.8])]
    masks = ratio_masks(scores, 0.4)   # floor(0.4 * 5) = 2 pruned
    assert sum(int((~m).sum()) for m in masks) == 2
    assert not masks[0][1]    # 0.1 lowest
    assert not masks[1][0]    # 0.2 next
    assert masks[0][2]

    all_kept = ratio_masks(scores, 0.0)
    assert all(m.all() for m in all_kept)
    with pytest.raises(InvalidParameterError):
        ratio_masks(scores, 1.0)


def test_ratio_masks_tie_break_is_deterministic():
    scores = [np.zeros(4), np.zeros(4)]
    masks = ratio_masks(scores, 0.5)
    # ties resolve by (expert, index): the first four zeros go
    assert masks[0].tolist() == [False, False, False, False]
    assert masks[1].tolist() == [True, True, True, True]


def test_apply_prune_slices_consistently():
    rng = np.random.default_rng(4)
    experts, router, ds = make_setup(rng, n=6)
    masks = [np.array([True, False, True, True, False, True]),
             np.ones(6, dtype=bool)]
    before = experts[0].base.means.copy()
    new_experts, new_router = apply_prune(experts, router, masks)

    assert np.array_equal(experts[0].base.means, before)   # inputs untouched
    assert len(new_experts[0].base) == 4
    assert len(new_experts[1].base) == 6
    assert np.array_equal(new_experts[0].base.means, before[masks[0]])
    assert np.array_equal(new_experts[0].motion["coeffs"],
                          experts[0].motion["coeffs"][masks[0]])
    assert np.array_equal(new_router.w[0], router.w[0][masks[0]])
    assert np.array_equal(new_router.phi_w0, router.phi_w0)
    assert new_router.expert_sizes == [4, 6]
    # pruned model still renders through the full stack
    ctx = build_view_context(new_experts, ds.views[0])
    out = new_router.forward(ctx)
    assert np.allclose(out.gating.sum(axis=0), 1.0)


def test_apply_prune_validation():
    rng = np.random.default_rng(5)
    experts, router, _ = make_setup(rng, n=3)
    with pytest.raises(InvalidInputError):
        apply_prune(experts, router, [np.ones(3, dtype=bool)])
    with pytest.raises(InvalidInputError):
        apply_prune(experts, router, [np.ones(2, dtype=bool),
                                      np.ones(3, dtype=bool)])
    with pytest.raises(InvalidParameterError):
        apply_prune(experts, router, [np.zeros(3, dtype=bool),
                                      np.ones(3, dtype=bool)])


class PruneCfg:
    prune_reduction = "sum"
    prune_threshold = None
    prune_ratio = 0.5
    prune_rounds = 2
    prune_finetune_steps = 3
    stage2_steps = 3
    lambda_ssim = 0.0
    lr_w = 0.05
    lr_w_dir = 0.05
    lr_w_time = 0.05
    lr_phi = 0.01
    lr_gate = 0.05


def test_progressive_prune_hits_target_ratio():
    rng = np.random.default_rng(6)
    experts, router, ds = make_setup(rng, n=10)
    cfg = PruneCfg()
    new_experts, new_router, rounds = progressive_prune(
        experts, router, ds, cfg, rng)
    assert len(rounds) == 2
    kept = sum(len(e.base) for e in new_experts)
    # per-round ratio 1 - sqrt(0.5); flooring each round lands one above the
    # ideal 10: 20 -> 15 -> 11
    assert kept == 11
    assert new_router.expert_sizes == [len(e.base) for e in new_experts]
    assert rounds[-1].kept == kept
    assert rounds[0].total == 20


def test_progressive_prune_policy_validation():
    rng = np.random.default_rng(7)
    experts, router, ds = make_setup(rng, n=4)
    cfg = PruneCfg()
    cfg.prune_threshold = 0.1   # both set now
    with pytest.raises(InvalidParameterError):
        progressive_prune(experts, router, ds, cfg, rng)
    cfg.prune_threshold = None
    cfg.prune_ratio = None
    with pytest.raises(InvalidParameterError):
        progressive_prune(experts, router, ds, cfg, rng)


def test_write_prune_report(tmp_path):
    rng = np.random.default_rng(8)
    experts, router, ds = make_setup(rng, n=4)
    cfg = PruneCfg()
    _, _, rounds = progressive_prune(experts, router, ds, cfg, rng)
    path = tmp_path / "report.csv"
    write_prune_report(path, rounds)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "round,expert,gaussian,score,kept"
    # round 0 scores 8 gaussians, round 1 the 6 survivors
    assert len(lines) == 1 + 8 + 6
