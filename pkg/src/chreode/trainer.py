"""Multi-delta population training loop.

Each step samples an ordered timepoint pair, independent source and target
minibatches from the train splits, K noise draws per source, and takes one
AdamW step on the composite loss. The optimizer, the global-norm clipping
and the warmup-cosine schedule are written out here rather than taken from
``torch.optim`` so that every arithmetic step is visible and testable.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .autodiff import DTYPE, grad_wrt_params
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigError, DataError, NumericalError
from .losses import LossWeights, SinkhornConfig, composite_loss
from .operator import OperatorConfig, WaddingtonOperator
from .rng import numpy_rng, torch_generator
from .time_codes import median_training_delta

PAIR_MODES = ("all_ordered", "endpoint_only")
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    variant: str = "selected"
    steps: int = 2000
    batch: int = 128
    K: int = 8
    base_lr: float = 3e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    pair_mode: str = "all_ordered"
    drift_on: bool = True
    down_on: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    width: int = 64
    depth: int = 3
    rank: int = 16
    n_periodic: int = 8
    checkpoint_every: int = 100
    eval_every: int = 100
    eval_sources: int = 128

    def __post_init__(self):
        if isinstance(self.weights, dict):
            unknown = set(self.weights) - {"mmd", "w2", "drift", "down"}
            if unknown:
                raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
            try:
                self.weights = LossWeights(**self.weights)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        self.betas = tuple(float(b) for b in self.betas)
        if self.pair_mode not in PAIR_MODES:
            raise ConfigError(f"unknown pair_mode {self.pair_mode!r}; expected one of {PAIR_MODES}")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in (0, 1)")
        if not (self.base_lr > 0 and self.grad_clip > 0):
            raise ConfigError("base_lr and grad_clip must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")
        for name in ("batch", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    def operator_config(self, dim, tau_init):
        return OperatorConfig(
            dim=dim,
            width=self.width,
            depth=self.depth,
            rank=self.rank,
            variant=self.variant,
            n_periodic=self.n_periodic,
            tau_init=tau_init,
            seed=self.seed,
        )


# ------------------------------------------------------------ schedule / optimizer
def ordered_pairs(times):
    return list(combinations(range(len(times)), 2))


def sample_transition(times, mode, rng):
    """Indices ``(i, j)``, ``i < j``: uniform over ordered pairs, or always the endpoints."""
    if len(times) < 2:
        raise DataError("need at least two timepoints to sample a transition")
    if mode == "endpoint_only":
        return 0, len(times) - 1
    if mode != "all_ordered":
        raise ConfigError(f"unknown pair mode {mode!r}")
    pairs = ordered_pairs(times)
    return pairs[rng.integers(len(pairs))]


def warmup_steps(cfg):
    return max(1, int(round(cfg.warmup_frac * cfg.steps)))


def lr_at(step, cfg):
    """Linear ramp from 0 to ``base_lr`` over the warmup, then cosine decay to 0."""
    total = cfg.steps
    if step >= total:
        return 0.0
    warm = warmup_steps(cfg)
    if step < warm:
        return cfg.base_lr * step / warm
    progress = (step - warm) / max(1, total - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, betas=(0.9, 0.95), weight_decay=0.01, eps=ADAM_EPS):
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``params`` and ``grads`` are dicts of tensors with matching shapes;
    gradients are expected to be clipped already.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params, state


# ------------------------------------------------------------ data access
class BatchSampler:
    """Independent source/target minibatches drawn from the train splits only."""

    def __init__(self, ds, batch, rng, record=False):
        self.ds = ds
        self.batch = batch
        self.rng = rng
        self.train_idx = [ds.split_indices(i)[0] for i in range(len(ds.times))]
        self.record = record
        self.seen = [set() for _ in ds.times] if record else None

    def draw(self, i):
        pool = self.train_idx[i]
        if len(pool) == 0:
            raise DataError(f"timepoint {self.ds.times[i]} has no train cells")
        pick = pool[self.rng.choice(len(pool), size=min(self.batch, len(pool)), replace=False)]
        if self.record:
            self.seen[i].update(int(p) for p in pick)
        return torch.as_tensor(self.ds.snapshots[i].cells[pick], dtype=DTYPE)


# ------------------------------------------------------------ history
@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    nan: bool = False
    nan_provenance: Optional[str] = None
    init: dict = field(default_factory=dict)
    tau_init: Optional[float] = None

    def append(self, record):
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError("history steps must increase")
        self.steps.append(record)

    def component(self, name):
        return np.array([r[name] for r in self.steps])

    def median(self, name, first=None, last=None):
        vals = self.component(name)
        if first is not None:
            vals = vals[:first]
        if last is not None:
            vals = vals[-last:]
        return float(np.median(vals))

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.steps)

    def summary(self):
        return {
            "n_steps": len(self.steps),
            "nan": self.nan,
            "nan_provenance": self.nan_provenance,
            "init": self.init,
            "tau_init": self.tau_init,
            "evals": self.evals,
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        (out_dir / "history.jsonl").write_text(self.to_jsonl())
        (out_dir / "history_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ loop
def set_deterministic(enabled=True):
    """Single-threaded, deterministic kernels (bit-reproducible CPU runs)."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _held_out_eval(model, ds, cfg, step):
    # Small, fixed-seed check on the farthest target; never feeds back into training.
    from .evaluation import OperatorPredictor, StandardizationStats, population_w2, predict_population

    stats = StandardizationStats.fit(ds.train(0))
    src = ds.test(0)[: cfg.eval_sources]
    j = len(ds.times) - 1
    pred = predict_population(OperatorPredictor(model), src, ds.times[j] - ds.times[0], cfg.K, seed=cfg.seed)
    return {"step": step, "target_t": ds.times[j], "w2": population_w2(stats.apply(pred), stats.apply(ds.test(j)))}


def _run(model, ds, cfg, history, out_dir=None, record_indices=False, step_callback=None):
    if len(ds.times) < 2:
        raise DataError("training needs at least two timepoints")
    if ds.dim != model.dim:
        raise DataError(f"dataset dimension {ds.dim} does not match model dimension {model.dim}")
    rng = numpy_rng(cfg.seed, "batches")
    noise_gen = torch_generator(cfg.seed, "train_noise")
    sampler = BatchSampler(ds, cfg.batch, rng, record=record_indices)
    params = dict(model.named_parameters())
    state = AdamState()
    out_dir = Path(out_dir) if out_dir is not None else None
    for step in range(1, cfg.steps + 1):
        i, j = sample_transition(ds.times, cfg.pair_mode, rng)
        sources, targets = sampler.draw(i), sampler.draw(j)
        delta = ds.times[j] - ds.times[i]
        noise = torch.randn(sources.shape[0], cfg.K, ds.dim, generator=noise_gen, dtype=DTYPE)
        lr = lr_at(step, cfg)
        try:
            report = composite_loss(
                model,
                sources,
                targets,
                delta,
                noise,
                cfg.weights,
                sinkhorn=SinkhornConfig(),
                drift_on=cfg.drift_on,
                down_on=cfg.down_on,
            )
            bad = report.nonfinite_components()
            if bad:
                raise NumericalError(f"non-finite loss components {bad}", provenance=",".join(bad))
            grads = grad_wrt_params(report.total, params)
        except NumericalError as exc:
            history.nan = True
            history.nan_provenance = exc.provenance
            if out_dir is not None:
                save_checkpoint(model, out_dir / "nan_abort.ckpt", extra={"step": step, "provenance": exc.provenance})
            raise
        grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, state, lr, cfg.betas, cfg.weight_decay)
        record = {"step": step, "lr": lr, "t_source": ds.times[i], "t_target": ds.times[j], "grad_norm": norm}
        record.update(report.to_record())
        record["tau"] = float(model.tau.detach())
        history.append(record)
        if step_callback is not None:
            step_callback(step, model, record)
        if cfg.eval_every and step % cfg.eval_every == 0:
            history.evals.append(_held_out_eval(model, ds, cfg, step))
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / "latest.ckpt", extra={"step": step})
    return sampler


def train(ds, cfg, out_dir=None, record_indices=False, step_callback=None):
    """Train a fresh model; returns ``(model, history)``.

    The gate constant starts at the median elapsed time over all ordered
    timepoint pairs of the dataset; the embedding scale follows from it.
    """
    tau_init = median_training_delta(ds.times)
    model = WaddingtonOperator(cfg.operator_config(ds.dim, tau_init))
    history = TrainHistory(init={"kind": "scratch", "seed": cfg.seed}, tau_init=tau_init)
    sampler = _run(model, ds, cfg, history, out_dir, record_indices, step_callback)
    if record_indices:
        history.init["seen_indices"] = [sorted(s) for s in sampler.seen]
    return model, history


def finetune(init, ds, cfg, out_dir=None, step_callback=None):
    """Continue training from a checkpoint path or a model; returns ``(model, history)``.

    The operator architecture (and its gate scale) come from the
    initialization; ``cfg`` supplies only the optimization settings.
    """
    if isinstance(init, (str, Path)):
        model, meta = load_checkpoint(init)
        if model is None:
            raise ConfigError("cannot fine-tune the parameter-free identity stub")
        provenance = {"kind": "checkpoint", "path": str(init), "config": meta["config"]}
    else:
        model = init
        provenance = {"kind": "model", "config": model.config_dict()}
    if model.dim != ds.dim:
        raise ConfigError(f"checkpoint dimension {model.dim} does not match dataset dimension {ds.dim}")
    if model.variant != cfg.variant:
        raise ConfigError(f"checkpoint variant {model.variant!r} differs from configured {cfg.variant!r}")
    history = TrainHistory(init=provenance, tau_init=model.config.tau_init)
    _run(model, ds, cfg, history, out_dir, step_callback=step_callback)
    return model, history
