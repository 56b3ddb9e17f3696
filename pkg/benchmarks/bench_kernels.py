"""Compare the compiled rasterizer kernels against the numpy fallback.

Runs each backend in a subprocess (the backend is chosen at import time via
MOESPLAT_BACKEND) over the same seeded workloads and prints a side-by-side
table with speedups.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def make_batch(n: int, height: int, width: int, channels: int,
               rng: np.random.Generator):
    from moesplat.rasterizer import SplatBatch

    mean2d = rng.uniform([0, 0], [width, height], (n, 2))
    a = rng.uniform(1.5, 6.0, n)
    c = rng.uniform(1.5, 6.0, n)
    b = rng.uniform(-0.6, 0.6, n) * np.sqrt(a * c)
    return SplatBatch(
        mean2d,
        np.stack([a, b, c], axis=1),
        rng.uniform(1.0, 10.0, n),
        rng.uniform(0.2, 0.9, n),
        rng.uniform(0.0, 1.0, (n, channels)),
    )


def time_op(fn, repeats: int) -> float:
    fn()  # warmup; also first-call caches
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run_worker(repeats: int) -> dict:
    from moesplat.rasterizer import (BACKEND_NAME, composite_backward,
                                     rasterize, replay)
    from moesplat.experts import init_expert
    from moesplat.moe import MoEModel, render_moe
    from moesplat.router import make_router
    from moesplat.scene import Camera, View

    rng = np.random.default_rng(12345)
    results = {"backend": BACKEND_NAME, "ops": {}}

    for name, n, hw in (("forward 64px/600", 600, 64),
                        ("forward 128px/1200", 1200, 128)):
        batch = make_batch(n, hw, hw, 3, rng)
        results["ops"][name] = time_op(lambda: rasterize(batch, hw, hw), repeats)

    batch = make_batch(1200, 128, 128, 3, rng)
    _, graph = rasterize(batch, 128, 128)
    upstream = rng.uniform(-1, 1, (128, 128, 3))
    results["ops"]["backward 128px/1200"] = time_op(
        lambda: composite_backward(graph, upstream), repeats)
    one = rng.uniform(0, 1, (len(batch), 1))
    results["ops"]["replay 128px/1200"] = time_op(
        lambda: replay(graph, one), repeats)

    # end to end: fused two-expert render, 64px
    pts = rng.uniform(-1.0, 1.0, (120, 3)) * [1.5, 1.0, 0.4]
    experts = [init_expert(k, pts, 300, np.random.default_rng(i), n_keys=4)
               for i, k in enumerate(("polynomial", "keyframe"))]
    router = make_router("volume_aware", experts, np.random.default_rng(9))
    model = MoEModel(experts, router)
    f = 64 / (2 * np.tan(np.radians(55) / 2))
    cam = Camera(64, 64, f, f, 32.0, 32.0, (1.0, 0.0, 0.0, 0.0),
                 (0.0, 0.0, -5.0))
    view = View(cam, 0.5)
    results["ops"]["moe fused 64px/600"] = time_op(
        lambda: render_moe(model, view, single_pass=True), repeats)
    return results


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        print(json.dumps(run_worker(args.repeats)))
        return 0

    rows = {}
    for backend in ("compiled", "python"):
        env = dict(os.environ, MOESPLAT_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker",
             "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            print(f"{backend}: worker failed\n{proc.stderr}", file=sys.stderr)
            if backend == "compiled":
                continue  # extension may simply not be built
            return 1
        rows[backend] = json.loads(proc.stdout.strip().splitlines()[-1])

    if not rows:
        print("no backend produced results", file=sys.stderr)
        return 1

    ops = list(next(iter(rows.values()))["ops"])
    width = max(len(op) for op in ops)
    have_both = len(rows) == 2
    print(f"{'op':<{width}}  {'compiled':>10}  {'python':>10}  {'speedup':>8}")
    for op in ops:
        c = rows.get("compiled", {}).get("ops", {}).get(op)
        p = rows.get("python", {}).get("ops", {}).get(op)
        cs = f"{c:8.2f}ms" if c is not None else "       -"
        ps = f"{p:8.2f}ms" if p is not None else "       -"
        sp = f"{p / c:7.1f}x" if have_both else "       -"
        print(f"{op:<{width}}  {cs:>10}  {ps:>10}  {sp:>8}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
