"""Run configuration: one JSON document drives every CLI command.

Parsing is strict: unknown keys anywhere are an error (catches typos like
"lr_colour"), as is a schema_version this build does not understand.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .synth import RegionSpec, SceneSpec

SCHEMA_VERSION = 1


@dataclass
class ExpertSetup:
    kinds: list = field(default_factory=lambda: ["polynomial", "keyframe"])
    counts: list = field(default_factory=lambda: [400, 400])
    degree: int = 2
    n_keys: int = 4
    latent_dim: int = 8
    jitter_std: float = 0.05

    def __post_init__(self):
        if len(self.kinds) != len(self.counts):
            raise ConfigError("experts.kinds and experts.counts differ in length")
        if not self.kinds:
            raise ConfigError("need at least one expert")


@dataclass
class TrainSetup:
    stage1_steps: int = 1800
    stage2_steps: int = 900
    distill_steps: int = 1000
    lambda_ssim: float = 0.2
    router: str = "volume_aware"
    distill_lambda: float = 0.5
    # sparsity pull on opacities during expert fitting; redundant gaussians
    # settle at zero contribution and prune away cheaply
    opacity_decay: float = 8e-3
    # expert parameter groups
    lr_colors: float = 0.02
    lr_opacity: float = 0.05
    lr_motion: float = 0.002
    lr_latents: float = 0.01
    # router parameter groups
    lr_w: float = 0.5
    lr_w_dir: float = 0.5
    lr_w_time: float = 0.05
    lr_phi: float = 0.05
    lr_gate: float = 0.5
    # pruning
    prune_reduction: str = "sum"
    prune_threshold: float | None = None
    prune_ratio: float | None = 0.55
    prune_rounds: int = 2
    prune_finetune_steps: int = 200


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 7
    scene: SceneSpec = field(default_factory=SceneSpec)
    experts: ExpertSetup = field(default_factory=ExpertSetup)
    train: TrainSetup = field(default_factory=TrainSetup)


def _build(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in doc:
            continue
        v = doc[f.name]
        sub = f"{path}.{f.name}"
        if f.name == "scene":
            kwargs[f.name] = _build_scene(v, sub)
        elif f.name == "experts":
            kwargs[f.name] = _build(ExpertSetup, v, sub)
        elif f.name == "train":
            kwargs[f.name] = _build(TrainSetup, v, sub)
        else:
            kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"{path}: {e}") from e


def _build_scene(doc: dict, path: str) -> SceneSpec:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    doc = dict(doc)
    regions = doc.pop("regions", None)
    spec = _build(SceneSpec, doc, path)
    if regions is not None:
        built = []
        for i, r in enumerate(regions):
            r = dict(r)
            for key in ("center", "extent", "opacity_range"):
                if key in r:
                    r[key] = tuple(r[key])
            built.append(_build(RegionSpec, r, f"{path}.regions[{i}]"))
        spec.regions = built
    return spec


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid json ({e})") from e
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return _build(RunConfig, doc, "config")


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=1, sort_keys=True)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as f:
        f.write(config_to_json(cfg) + "\n")
