"""Router forward/backward behaviour for the three gating designs."""

import numpy as np
import pytest

from moesplat.errors import InvalidInputError, InvalidParameterError
from moesplat.experts import init_expert
from moesplat.router import (ROUTER_KINDS, PixelRouter, VolumeAwarePixelRouter,
                             VolumeRouter, blend, build_view_context,
                             make_router, softmax_maps)
from moesplat.scene import Camera, View

from oracles import central_diff, max_rel_err


def make_ctx(rng, n_experts=2, n=10, size=20, opacity=None, t=0.3):
    f = size / (2.0 * np.tan(np.radians(55.0) / 2.0))
    cam = Camera(width=size, height=size, fx=f, fy=f, cx=size / 2.0,
                 cy=size / 2.0, quat=np.array([1.0, 0, 0, 0]),
                 position=np.array([0.0, 0.0, -4.0]))
    view = View(cam, t)
    experts = []
    for k in range(n_experts):
        pts = rng.normal(0.0, 0.6, (n, 3)) * np.array([1.0, 1.0, 0.3])
        e = init_expert("polynomial", pts, n, rng, scale_range=(0.15, 0.3))
        e.motion["coeffs"][:, :, 1] = rng.normal(0, 0.2, (n, 3))
        if opacity is not None:
            e.base.opacities[:] = opacity
        experts.append(e)
    return experts, build_view_context(experts, view)


def wake(router, rng):
    for name, arr in router.param_arrays().items():
        arr += rng.normal(0.0, 0.15, arr.shape)


def fd_check(router, ctx, rng, tol=2e-4, skip=()):
    out = router.forward(ctx)
    upstream = rng.normal(size=out.image.shape)
    grads = router.backward(out, d_image=upstream)
    params = router.param_arrays()
    assert set(grads) == set(params)
    for name, arr in params.items():
        if name in skip:
            continue

        def loss(v, name=name):
            keep = params[name].copy()
            params[name][...] = v
            val = float(np.sum(router.forward(ctx).image * upstream))
            params[name][...] = keep
            return val

        fd = central_diff(loss, arr.copy())
        assert max_rel_err(grads[name], fd, floor=1e-4) < tol, name


def test_softmax_maps_normalized_and_stable():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 1, (3, 6, 6))
    logits[0, 0, 0] = 800.0   # would overflow without max subtraction
    g = softmax_maps(logits)
    assert np.all(np.isfinite(g))
    assert np.allclose(g.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(g >= 0)


def test_blend_rejects_count_mismatch():
    with pytest.raises(InvalidInputError):
        blend(np.ones((2, 4, 4)), np.ones((3, 4, 4, 3)))


@pytest.mark.parametrize("kind", ["volume_aware", "pixel"])
def test_softmax_routers_gate_to_one(kind):
    rng = np.random.default_rng(1)
    experts, ctx = make_ctx(rng, n_experts=3)
    router = make_router(kind, experts, rng)
    wake(router, rng)
    out = router.forward(ctx)
    assert out.gating.shape == (3, 20, 20)
    assert np.allclose(out.gating.sum(axis=0), 1.0, atol=1e-12)
    direct = blend(out.gating, ctx.images)
    assert np.array_equal(out.image, direct)


def test_volume_router_coverage_is_not_softmax():
    rng = np.random.default_rng(2)
    experts, ctx = make_ctx(rng, n_experts=2, opacity=0.9, n=16)
    router = make_router("volume", experts, rng)
    out = router.forward(ctx)
    sums = out.gating.sum(axis=0)
    assert np.all(sums <= 1.0 + 1e-12)
    # opaque stacks clip at one, empty background stays near zero
    assert sums.max() > 0.999
    assert sums.min() < 0.5


def test_volume_aware_backward_fd():
    rng = np.random.default_rng(3)
    experts, ctx = make_ctx(rng)
    router = make_router("volume_aware", experts, rng)
    wake(router, rng)
    fd_check(router, ctx, rng)


def test_pixel_backward_fd():
    rng = np.random.default_rng(4)
    experts, ctx = make_ctx(rng)
    router = make_router("pixel", experts, rng)
    wake(router, rng)
    fd_check(router, ctx, rng)


def test_volume_backward_fd_under_full_coverage():
    # the implemented gradient treats the coverage normalizer as constant,
    # which is exact while stacked alpha stays below one
    rng = np.random.default_rng(5)
    experts, ctx = make_ctx(rng, opacity=0.02, n=4)
    router = make_router("volume", experts, rng)
    out = router.forward(ctx)
    assert np.all(out.cache["norm"] == 1.0)
    fd_check(router, ctx, rng)


def test_volume_router_rejects_gating_grad():
    rng = np.random.default_rng(6)
    experts, ctx = make_ctx(rng, opacity=0.02, n=4)
    router = make_router("volume", experts, rng)
    out = router.forward(ctx)
    with pytest.raises(InvalidParameterError):
        router.backward(out, d_gating=np.zeros_like(out.gating))


def test_gating_grad_path_matches_fd():
    rng = np.random.default_rng(7)
    experts, ctx = make_ctx(rng)
    router = make_router("volume_aware", experts, rng)
    wake(router, rng)
    out = router.forward(ctx)
    up_g = rng.normal(size=out.gating.shape)
    grads = router.backward(out, d_gating=up_g)

    params = router.param_arrays()
    name = "w.0"

    def loss(v):
        keep = params[name].copy()
        params[name][...] = v
        val = float(np.sum(router.forward(ctx).gating * up_g))
        params[name][...] = keep
        return val

    fd = central_diff(loss, params[name].copy())
    assert max_rel_err(grads[name], fd, floor=1e-4) < 2e-4


def test_param_roundtrip_preserves_forward():
    rng = np.random.default_rng(8)
    for kind in ROUTER_KINDS:
        experts, ctx = make_ctx(rng)
        router = make_router(kind, experts, rng)
        wake(router, rng)
        ref = router.forward(ctx).image
        router.set_param_arrays({k: v.copy() for k, v in router.param_arrays().items()})
        assert np.array_equal(router.forward(ctx).image, ref)


def test_context_mismatch_rejected():
    rng = np.random.default_rng(9)
    experts, ctx = make_ctx(rng, n_experts=2)
    router = make_router("volume_aware", experts[:1], rng)
    with pytest.raises(InvalidInputError):
        router.forward(ctx)


def test_make_router_unknown_kind():
    rng = np.random.default_rng(10)
    experts, _ = make_ctx(rng, n=4)
    with pytest.raises(InvalidParameterError):
        make_router("mesh", experts, rng)
