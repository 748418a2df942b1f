"""Masked causal-LM training of the projection with AdamW and a warmup + cosine schedule."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from projgen.bridge import Projection, ProjectionParams, assemble_input, collate, module_digest
from projgen.prompts import DEFAULT_TEMPLATE, PromptSample, render_prompt

logger = logging.getLogger(__name__)


class LossError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    weight_decay: float = 0.0
    warmup_frac: float = 0.03
    min_lr: float = 0.0
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    grad_clip: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    bias: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.betas = tuple(self.betas)


def masked_lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over the positions where ``mask`` is True."""
    if not bool(mask.any()):
        raise LossError("loss mask selects no positions")
    logp = torch.log_softmax(logits[mask], dim=-1)
    return -logp.gather(-1, targets[mask][:, None]).mean()


def warmup_steps(total_steps: int, warmup_frac: float) -> int:
    return math.ceil(warmup_frac * total_steps - 1e-9)


def lr_at_step(step: int, total_steps: int, config: TrainConfig) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, config.warmup_frac)
    if step < w:
        return config.lr_peak * (step + 1) / w
    if total_steps == w:
        return config.min_lr
    progress = (step - w) / (total_steps - w)
    return config.min_lr + (config.lr_peak - config.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


class FeatureCache:
    """Encoder outputs keyed by region; the encoder is frozen so features never change."""

    def __init__(self, encoder):
        self.encoder = encoder
        self._store: dict = {}

    def __call__(self, sample: PromptSample) -> torch.Tensor:
        key = (sample.image_id, sample.norm_box)
        if key not in self._store:
            self._store[key] = self.encoder.encode(sample.image_id, sample.norm_box).patches
        return self._store[key]


def sample_inputs(sample: PromptSample, projection, features, lm, label: str | None = None,
                  template: str = DEFAULT_TEMPLATE):
    """Render + assemble one sample; ``projection`` may be a module or a params snapshot."""
    patches = features(sample) if callable(features) else features
    visual = projection(patches) if isinstance(projection, torch.nn.Module) else _project_params(patches, projection)
    rendered = render_prompt(sample, lm.tokenizer, visual.shape[0], label=label, template=template)
    return assemble_input(visual, rendered, lm)


def _project_params(patches, params: ProjectionParams):
    from projgen.bridge import project

    return project(patches, params)


def batch_loss(samples: Sequence[PromptSample], projection, features, lm, template=DEFAULT_TEMPLATE):
    items = [sample_inputs(s, projection, features, lm, template=template) for s in samples]
    embeds, targets, mask = collate(items)
    logits = lm.forward(embeds)
    return masked_lm_loss(logits, targets, mask)


@dataclass
class TrainResult:
    params: ProjectionParams
    log: list[dict]
    backend_digest_before: str
    backend_digest_after: str


def _backend_digest(encoder, lm) -> str:
    parts = []
    for b in (encoder, lm):
        if hasattr(b, "param_digest"):
            parts.append(b.param_digest())
        elif isinstance(b, torch.nn.Module):
            parts.append(module_digest(b))
    return "|".join(parts)


def train_projection(pool: Sequence[PromptSample], encoder, lm, config: TrainConfig = TrainConfig(),
                     log_path=None, checkpoint_path=None, template: str = DEFAULT_TEMPLATE,
                     init: ProjectionParams | None = None) -> TrainResult:
    """One (or ``config.epochs``) seeded passes over ``pool`` updating only the projection."""
    if not pool:
        raise TrainingError("empty training pool")
    pool = sorted(pool, key=lambda s: s.sample_id)
    torch.manual_seed(config.seed)
    before = _backend_digest(encoder, lm)
    dtype = getattr(lm, "dtype", torch.float64)
    if init is not None:
        proj = Projection.from_params(init, dtype=dtype)
    else:
        proj = Projection(encoder.d_v, lm.d_lm, bias=config.bias, seed=config.seed, dtype=dtype)
    opt = torch.optim.AdamW(proj.parameters(), lr=config.lr_peak, betas=config.betas, eps=config.eps,
                            weight_decay=config.weight_decay)
    features = FeatureCache(encoder)
    rng = np.random.default_rng([config.seed, 7])
    steps_per_epoch = math.ceil(len(pool) / config.batch_size)
    total = steps_per_epoch * config.epochs
    log = []
    step = 0
    meta = {"init": "gaussian std=1/sqrt(d_v), bias=0", "optimizer": "AdamW", "betas": list(config.betas),
            "eps": config.eps, "weight_decay": config.weight_decay, "lr_peak": config.lr_peak,
            "schedule": f"linear warmup {config.warmup_frac} + cosine to {config.min_lr}"}
    for _ in range(config.epochs):
        order = rng.permutation(len(pool))
        for b in range(steps_per_epoch):
            batch = [pool[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            t0 = time.perf_counter()
            lr = lr_at_step(step, total, config)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = batch_loss(batch, proj, features, lm, template)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}; batch: {[s.sample_id for s in batch]}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(proj.parameters(), config.grad_clip)
            opt.step()
            log.append({"step": step, "lr": lr, "loss": float(loss.detach()),
                        "wall_ms": round((time.perf_counter() - t0) * 1000, 3)})
            step += 1
            if checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
                proj.to_params(step, **meta).save(Path(checkpoint_path).with_name(f"proj_step{step}"))
    params = proj.to_params(step, **meta)
    after = _backend_digest(encoder, lm)
    if before != after:
        raise TrainingError("frozen backend parameters changed during training")
    if checkpoint_path:
        params.save(checkpoint_path)
    if log_path:
        write_train_log(log, log_path)
    return TrainResult(params, log, before, after)


def write_train_log(log, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "lr", "loss", "wall_ms"])
        w.writeheader()
        for row in log:
            w.writerow(row)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
