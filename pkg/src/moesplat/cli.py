"""Command-line pipeline.

    moesplat <command> --config cfg.json [--seed N] [--out DIR]
                       [--single-pass] [--stats]

Commands work against one run directory (--out): `synth` populates it with
a dataset and its ground-truth scene, `train` fits experts then the router,
`render`/`eval` consume the trained model, `prune` and `distill` derive
compressed or re-trained variants, `ablate` compares router designs.

Exit codes: 0 success, 2 configuration problems, 3 missing or corrupt data,
4 runtime failures (including a locked run directory).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import filelock
import numpy as np

from .config import RunConfig, load_config, save_config
from .errors import (ConfigError, DataError, InvalidSpecError, MoesplatError)
from .experts import init_expert, render_expert
from .instrumentation import COUNTERS
from .metrics import motion_magnitudes, specialization_scores
from .moe import MoEModel, load_moe, render_moe, save_moe
from .prune import progressive_prune, write_prune_report
from .router import make_router
from .storage import (load_dataset, load_scene_model, save_dataset,
                      save_expert, save_image, save_scene_model,
                      write_manifest)
from .synth import synth_scene
from .training import (TrainLog, distill_expert, evaluate, train_stage1,
                       train_stage2)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def _threads() -> int:
    raw = os.environ.get("MOESPLAT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MOESPLAT_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("MOESPLAT_THREADS must be >= 1")
    return n


def parallel_map(fn, items):
    """Map preserving order; MOESPLAT_THREADS caps the worker pool."""
    n = _threads()
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: str, args) -> int:
    model, dataset = synth_scene(cfg.scene, cfg.seed)
    save_dataset(out, dataset, {"seed": cfg.seed})
    save_scene_model(out, model)
    save_config(os.path.join(out, "config.json"), cfg)
    write_manifest(out)
    print(f"synth: {len(dataset.views)} views "
          f"({len(dataset.test_indices)} test) -> {out}")
    return 0


def _init_experts(cfg: RunConfig, scene_model):
    points = scene_model.gaussians_at(0.0).means
    ex = cfg.experts
    return [init_expert(kind, points, count, _rng(cfg.seed, 100 + k),
                        degree=ex.degree, n_keys=ex.n_keys,
                        latent_dim=ex.latent_dim, jitter_std=ex.jitter_std)
            for k, (kind, count) in enumerate(zip(ex.kinds, ex.counts))]


def _train_experts(cfg: RunConfig, dataset, scene_model, out: str):
    experts = _init_experts(cfg, scene_model)
    for k, expert in enumerate(experts):
        log = train_stage1(expert, dataset, cfg.train, _rng(cfg.seed, 200 + k))
        log.write_csv(os.path.join(out, f"logs/stage1_expert_{k:02d}.csv"))
        print(f"train: expert {k} ({expert.kind}) "
              f"final loss {log.last_loss():.5f}")
    return experts


def cmd_train(cfg: RunConfig, out: str, args) -> int:
    dataset = load_dataset(out)
    scene_model = load_scene_model(out)
    os.makedirs(os.path.join(out, "logs"), exist_ok=True)
    experts = _train_experts(cfg, dataset, scene_model, out)
    router = make_router(cfg.train.router, experts, _rng(cfg.seed, 300))
    log = train_stage2(experts, router, dataset, cfg.train, _rng(cfg.seed, 301))
    log.write_csv(os.path.join(out, "logs/stage2_router.csv"))
    model = MoEModel(experts, router)
    save_moe(os.path.join(out, "model"), model)
    result = evaluate(lambda v: render_moe(model, v).image, dataset)
    with open(os.path.join(out, "train.json"), "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    write_manifest(out)
    print(f"train: router {cfg.train.router}, "
          f"test psnr {result['psnr']:.2f} dB -> {out}/model")
    return 0


def cmd_render(cfg: RunConfig, out: str, args) -> int:
    dataset = load_dataset(out)
    model = load_moe(os.path.join(out, "model"))
    render_dir = os.path.join(out, "renders")
    os.makedirs(render_dir, exist_ok=True)

    def one(i):
        view = dataset.views[i]
        r = render_moe(model, view, single_pass=args.single_pass)
        save_image(os.path.join(render_dir, f"render_{i:03d}"), r.image)
        return i

    done = parallel_map(one, range(len(dataset.views)))
    write_manifest(out)
    print(f"render: {len(done)} views -> {render_dir}"
          + (" (single pass)" if args.single_pass else ""))
    return 0


def cmd_eval(cfg: RunConfig, out: str, args) -> int:
    dataset = load_dataset(out)
    model = load_moe(os.path.join(out, "model"))
    result = evaluate(
        lambda v: render_moe(model, v, single_pass=args.single_pass).image,
        dataset)
    result["single_pass"] = bool(args.single_pass)
    if model.router_kind == "volume_aware":
        weights = [np.abs(w) for w in model.router.w]
        motion = [motion_magnitudes(e) for e in model.experts]
        result["motion_specialization"] = list(
            specialization_scores(weights, motion, normalize=True))
    with open(os.path.join(out, "eval.json"), "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    print(f"eval: psnr {result['psnr']:.2f} dB  ssim {result['ssim']:.4f} "
          f"({result['n_views']} test views)")
    return 0


def cmd_prune(cfg: RunConfig, out: str, args) -> int:
    dataset = load_dataset(out)
    model = load_moe(os.path.join(out, "model"))
    before = sum(len(e.base) for e in model.experts)
    experts, router, rounds = progressive_prune(
        model.experts, model.router, dataset, cfg.train, _rng(cfg.seed, 400))
    pruned = MoEModel(experts, router)
    after = sum(len(e.base) for e in pruned.experts)
    save_moe(os.path.join(out, "model_pruned"), pruned)
    write_prune_report(os.path.join(out, "prune_report.csv"), rounds)
    result = evaluate(lambda v: render_moe(pruned, v).image, dataset)
    result.update({"gaussians_before": before, "gaussians_after": after})
    with open(os.path.join(out, "prune.json"), "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    write_manifest(out)
    print(f"prune: {before} -> {after} gaussians "
          f"({1 - after / before:.1%} removed), test psnr {result['psnr']:.2f} dB")
    return 0


def cmd_distill(cfg: RunConfig, out: str, args) -> int:
    dataset = load_dataset(out)
    scene_model = load_scene_model(out)
    model = load_moe(os.path.join(out, "model"))
    distill_dir = os.path.join(out, "distilled")
    os.makedirs(distill_dir, exist_ok=True)
    os.makedirs(os.path.join(out, "logs"), exist_ok=True)
    points = scene_model.gaussians_at(0.0).means
    summary = {}
    for k, teacher in enumerate(model.experts):
        student = init_expert(teacher.kind, points, cfg.experts.counts[k],
                              _rng(cfg.seed, 500 + k), degree=cfg.experts.degree,
                              n_keys=cfg.experts.n_keys,
                              latent_dim=cfg.experts.latent_dim,
                              jitter_std=cfg.experts.jitter_std)
        log = distill_expert(student, model.experts, model.router, dataset,
                             cfg.train, _rng(cfg.seed, 600 + k), teacher_index=k)
        log.write_csv(os.path.join(out, f"logs/distill_expert_{k:02d}.csv"))
        save_expert(os.path.join(distill_dir, f"expert_{k:02d}.expert"), student)
        result = evaluate(lambda v: render_expert(student, v).image, dataset)
        summary[f"expert_{k}"] = {"kind": teacher.kind, "psnr": result["psnr"],
                                  "ssim": result["ssim"]}
        print(f"distill: expert {k} ({teacher.kind}) "
              f"solo test psnr {result['psnr']:.2f} dB")
    with open(os.path.join(out, "distill.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    write_manifest(out)
    return 0


def cmd_ablate(cfg: RunConfig, out: str, args) -> int:
    dataset = load_dataset(out)
    scene_model = load_scene_model(out)
    os.makedirs(os.path.join(out, "logs"), exist_ok=True)
    experts = _train_experts(cfg, dataset, scene_model, out)
    table = {}
    for kind in ("pixel", "volume", "volume_aware"):
        router = make_router(kind, experts, _rng(cfg.seed, 300))
        log = train_stage2(experts, router, dataset, cfg.train,
                           _rng(cfg.seed, 301))
        log.write_csv(os.path.join(out, f"logs/stage2_{kind}.csv"))
        model = MoEModel(experts, router)
        result = evaluate(lambda v: render_moe(model, v).image, dataset)
        table[kind] = result["psnr"]
        print(f"ablate: {kind:13s} test psnr {result['psnr']:.2f} dB")
    with open(os.path.join(out, "ablation.json"), "w") as f:
        json.dump(table, f, indent=1, sort_keys=True)
    write_manifest(out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "prune": cmd_prune,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesplat",
        description="Mixture-of-experts dynamic gaussian splatting (CPU)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=False, default=None,
                       help="JSON run configuration (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="run",
                       help="run directory (default: ./run)")
        p.add_argument("--single-pass", action="store_true",
                       help="use the fused single-pass renderer where applicable")
        p.add_argument("--stats", action="store_true",
                       help="print work counters before exiting")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads()  # fail fast on a malformed MOESPLAT_THREADS
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.seed = args.seed
        out = args.out
        os.makedirs(out, exist_ok=True)
        lock = filelock.FileLock(os.path.join(out, ".moesplat.lock"))
        try:
            with lock.acquire(timeout=0.5):
                code = COMMANDS[args.command](cfg, out, args)
        except filelock.Timeout:
            print(f"error: run directory {out} is locked by another process",
                  file=sys.stderr)
            return 4
        if args.stats:
            for name, value in sorted(COUNTERS.snapshot().items()):
                print(f"stat {name} {value}")
        return code
    except (ConfigError, InvalidSpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except MoesplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
