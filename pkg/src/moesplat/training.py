"""Photometric loss, RAdam, and the training stages.

Stage 1 fits each expert to the full scene on its own. Stage 2 freezes the
experts and trains only the router, reusing cached per-view forward passes
(the expert geometry cannot change, so rendering reduces to graph replays).
Distillation retrains one expert against a frozen teacher mixture.

Everything is driven by a single numpy Generator, one uniformly random
training view per step, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, StateError
from .experts import ExpertModel, expert_backward, render_expert
from .metrics import psnr, ssim_and_grad
from .router import ViewContext, build_view_context
from .scene import Dataset

LOSS_LAMBDA_SSIM = 0.2


def photometric_loss(pred: np.ndarray, target: np.ndarray,
                     lambda_ssim: float = LOSS_LAMBDA_SSIM):
    """(1 - l) * L1 + l * (1 - SSIM); returns (loss, d loss / d pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {target.shape}")
    if not (0.0 <= lambda_ssim <= 1.0):
        raise InvalidParameterError("lambda_ssim must lie in [0, 1]")
    diff = pred - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim > 0.0:
        s, ds = ssim_and_grad(pred, target)
        return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s), \
            grad - lambda_ssim * ds
    return l1, grad


class RAdam:
    """Rectified Adam over a dict of named parameter arrays.

    Updates happen in place so aliases held by models stay valid. Learning
    rates are per array, resolved from (prefix, lr) rules at construction.
    """

    def __init__(self, params: dict, lr=0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise InvalidParameterError("optimizer needs parameters")
        self.params = dict(params)
        self.lr = {name: self._resolve(name, lr) for name in self.params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    @staticmethod
    def _resolve(name: str, lr) -> float:
        if np.isscalar(lr):
            return float(lr)
        for prefix, value in lr:
            if name == prefix or name.startswith(prefix):
                return float(value)
        raise InvalidParameterError(f"no learning rate rule matches {name!r}")

    def step(self, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        rho = self.rho_inf - 2.0 * t * b2 ** t / bias2
        if rho > 4.0:
            rect = np.sqrt(((rho - 4.0) * (rho - 2.0) * self.rho_inf)
                           / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho))
        else:
            rect = None
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise InvalidInputError(f"gradient shape mismatch for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            if rect is None:
                p -= self.lr[name] * m_hat      # un-rectified warmup: SGD on m_hat
            else:
                v_hat = np.sqrt(v / bias2)
                p -= self.lr[name] * rect * m_hat / (v_hat + self.eps)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # dicts: step, loss, psnr, note

    def add(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path) -> None:
        if not self.rows:
            return
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)

    def last_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")


def _train_view_pool(dataset: Dataset):
    views = dataset.train_views()
    if not views:
        raise InvalidInputError("dataset has no training views")
    for v in views:
        if v.image is None:
            raise InvalidInputError("training views need images")
    return views


def _clip_expert(expert: ExpertModel, opacity_decay: float = 0.0) -> None:
    np.clip(expert.base.colors, 0.0, 1.0, out=expert.base.colors)
    if opacity_decay:
        # decoupled sparsity pull: gaussians the images do not need slide to
        # zero opacity and become free to prune
        expert.base.opacities -= opacity_decay
    np.clip(expert.base.opacities, 0.0, 1.0, out=expert.base.opacities)


def expert_lr_rules(cfg) -> list:
    return [("colors", cfg.lr_colors), ("opacities", cfg.lr_opacity),
            ("motion.latents", cfg.lr_latents), ("motion.", cfg.lr_motion)]


def router_lr_rules(cfg) -> list:
    return [("w.", cfg.lr_w), ("w_dir.", cfg.lr_w_dir),
            ("w_time.", cfg.lr_w_time), ("phi.", cfg.lr_phi),
            ("gate.", cfg.lr_gate),
            ("w0", cfg.lr_phi), ("b0", cfg.lr_phi),
            ("w1", cfg.lr_phi), ("b1", cfg.lr_phi)]


def train_stage1(expert: ExpertModel, dataset: Dataset, cfg,
                 rng: np.random.Generator, log: TrainLog | None = None) -> TrainLog:
    """Photometric fit of one expert against the raw views."""
    views = _train_view_pool(dataset)
    log = log if log is not None else TrainLog()
    opt = RAdam(expert.param_arrays(), lr=expert_lr_rules(cfg))
    for step in range(cfg.stage1_steps):
        view = views[rng.integers(len(views))]
        render = render_expert(expert, view)
        loss, d_img = photometric_loss(render.image, view.image, cfg.lambda_ssim)
        grads = expert_backward(expert, render, d_img)
        flat = {"colors": grads.colors, "opacities": grads.opacities}
        flat.update({f"motion.{k}": v for k, v in grads.motion.items()})
        opt.step(flat)
        _clip_expert(expert, getattr(cfg, "opacity_decay", 0.0))
        log.add(stage="stage1", step=step, loss=loss,
                psnr=psnr(render.image, view.image))
    return log


class _FrozenExperts:
    """Write-protects expert arrays for a scope; stage 2 must not move them."""

    def __init__(self, experts):
        self.arrays = [a for e in experts for a in e.param_arrays().values()]

    def __enter__(self):
        self.prev = [a.flags.writeable for a in self.arrays]
        for a in self.arrays:
            a.flags.writeable = False
        return self

    def __exit__(self, *exc):
        for a, w in zip(self.arrays, self.prev):
            a.flags.writeable = w
        return False


def build_context_cache(experts, dataset: Dataset) -> dict:
    """One ViewContext per training view; valid while experts stay frozen."""
    views = _train_view_pool(dataset)
    return {id(v): build_view_context(experts, v) for v in views}


def train_stage2(experts: list, router, dataset: Dataset, cfg,
                 rng: np.random.Generator, log: TrainLog | None = None,
                 context_cache: dict | None = None,
                 steps: int | None = None) -> TrainLog:
    """Router-only training over frozen experts."""
    views = _train_view_pool(dataset)
    log = log if log is not None else TrainLog()
    steps = cfg.stage2_steps if steps is None else steps
    opt = RAdam(router.param_arrays(), lr=router_lr_rules(cfg))
    with _FrozenExperts(experts):
        cache = (context_cache if context_cache is not None
                 else build_context_cache(experts, dataset))
        for step in range(steps):
            view = views[rng.integers(len(views))]
            ctx = cache[id(view)]
            out = router.forward(ctx)
            loss, d_img = photometric_loss(out.image, view.image, cfg.lambda_ssim)
            grads = router.backward(out, d_image=d_img)
            opt.step(grads)
            log.add(stage="stage2", step=step, loss=loss,
                    psnr=psnr(out.image, view.image))
    return log


def distill_expert(student: ExpertModel, experts: list, router,
                   dataset: Dataset, cfg, rng: np.random.Generator,
                   teacher_index: int, log: TrainLog | None = None) -> TrainLog:
    """Train `student` to replace experts[teacher_index] under a frozen mixture.

    Per step, with G the teacher's gating plane for the replaced expert:
      lam  * loss(G * student, G * target)            own-region fidelity
    + (1-lam) * loss((1-G) * student, (1-G) * mixture)  elsewhere, match the mix
    """
    if not (0 <= teacher_index < len(experts)):
        raise InvalidParameterError("teacher_index out of range")
    lam = cfg.distill_lambda
    if not (0.0 <= lam <= 1.0):
        raise InvalidParameterError("distill_lambda must lie in [0, 1]")
    views = _train_view_pool(dataset)
    log = log if log is not None else TrainLog()

    # teacher pass per view, frozen throughout
    with _FrozenExperts(experts):
        teacher = {}
        for v in views:
            ctx = build_view_context(experts, v)
            out = router.forward(ctx)
            teacher[id(v)] = (out.gating[teacher_index][:, :, None], out.image)

    opt = RAdam(student.param_arrays(), lr=expert_lr_rules(cfg))
    for step in range(cfg.distill_steps):
        view = views[rng.integers(len(views))]
        gate, mix = teacher[id(view)]
        render = render_expert(student, view)
        l_own, d_own = photometric_loss(gate * render.image, gate * view.image,
                                        cfg.lambda_ssim)
        l_rest, d_rest = photometric_loss((1.0 - gate) * render.image,
                                          (1.0 - gate) * mix, cfg.lambda_ssim)
        loss = lam * l_own + (1.0 - lam) * l_rest
        d_img = lam * gate * d_own + (1.0 - lam) * (1.0 - gate) * d_rest
        grads = expert_backward(student, render, d_img)
        flat = {"colors": grads.colors, "opacities": grads.opacities}
        flat.update({f"motion.{k}": v for k, v in grads.motion.items()})
        opt.step(flat)
        _clip_expert(student, getattr(cfg, "opacity_decay", 0.0))
        log.add(stage="distill", step=step, loss=loss,
                psnr=psnr(render.image, view.image))
    return log


def evaluate(render_fn, dataset: Dataset) -> dict:
    """Mean test-set PSNR/SSIM for any view -> image callable."""
    from .metrics import ssim as ssim_value
    views = dataset.test_views()
    if not views:
        raise InvalidInputError("dataset has no test views")
    ps, ss = [], []
    for v in views:
        if v.image is None:
            raise InvalidInputError("test views need images")
        img = render_fn(v)
        ps.append(psnr(img, v.image))
        ss.append(ssim_value(img, v.image))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
            "n_views": len(views)}
