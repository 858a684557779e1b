"""Shared training-loop machinery: batching, loss masking, seeded step loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import params as P
from .data import Sample
from .model import Batch, TinyVLM, make_batch


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss at step {step} (value {value})")
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    momentum: float = 0.0
    clip_norm: float | None = 1.0
    lr_schedule: str = "cosine"  # "cosine" (with warmup) or "const"
    warmup_steps: int = 100
    min_lr_frac: float = 0.1
    seed: int = 0


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Piecewise schedule: linear warmup, then cosine decay to min_lr_frac."""
    if cfg.lr_schedule == "const":
        return cfg.lr
    if cfg.lr_schedule != "cosine":
        raise ValueError(f"unknown lr schedule: {cfg.lr_schedule}")
    warm = min(cfg.warmup_steps, cfg.steps)
    if warm > 0 and step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(1, cfg.steps - warm)
    frac = (step - warm) / span
    floor = cfg.lr * cfg.min_lr_frac
    return floor + 0.5 * (cfg.lr - floor) * (1 + np.cos(np.pi * min(frac, 1.0)))


@dataclass
class CurveRow:
    step: int
    total: float
    kl: float
    ce: float


def masked_ce(logits: torch.Tensor, targets: torch.Tensor,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-probability of the gold tokens over supervised rows."""
    vocab_size = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab_size:
        raise ValueError("target id outside vocabulary")
    logp = torch.log_softmax(logits.to(torch.promote_types(logits.dtype, torch.float32)), dim=-1)
    gold = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return -gold.mean()
    mask = mask.to(gold.dtype)
    return -(gold * mask).sum() / mask.sum().clamp_min(1.0)


def batch_indices(n: int, batch_size: int, steps: int,
                  rng: np.random.Generator,
                  probs: np.ndarray | None = None,
                  lengths: np.ndarray | None = None):
    """Yield `steps` index batches: shuffled epochs, or weighted draws if
    per-sample probabilities are given.

    When target lengths are supplied, samples are bucketed by length within
    windows of the shuffled order so batches stay roughly homogeneous (short
    answers are not padded up to transcription length); batch order is
    re-shuffled afterwards.
    """
    if probs is not None:
        for _ in range(steps):
            yield rng.choice(n, size=min(batch_size, n), replace=True, p=probs)
        return
    produced = 0
    while produced < steps:
        order = rng.permutation(n)
        if lengths is not None:
            window = batch_size * 16
            chunks = [order[lo : lo + window] for lo in range(0, n, window)]
            order = np.concatenate(
                [c[np.argsort(lengths[c], kind="stable")] for c in chunks]
            )
        batches = [order[lo : lo + batch_size] for lo in range(0, n, batch_size)]
        for b in rng.permutation(len(batches)):
            if produced >= steps:
                return
            yield batches[int(b)]
            produced += 1


def run_steps(model: TinyVLM, samples: list[Sample], cfg: TrainConfig, loss_fn,
              probs: np.ndarray | None = None, on_step=None) -> list[CurveRow]:
    """Generic seeded loop: loss_fn(model, batch) -> (total, kl, ce) tensors."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    trainable = P.trainable_params(model)
    opt = P.make_optimizer(cfg.optimizer, trainable, cfg.lr,
                           weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    lengths = np.array([len(s.target_ids()) for s in samples])
    curve: list[CurveRow] = []
    for step, idx in enumerate(batch_indices(len(samples), cfg.batch_size,
                                             cfg.steps, rng, probs, lengths)):
        batch = make_batch([samples[i] for i in idx], model.config)
        opt.lr = lr_at(cfg, step)
        total, kl, ce = loss_fn(model, batch)
        if not bool(torch.isfinite(total)):
            raise TrainingDivergedError(step, float(total.detach()))
        opt.zero_grad()
        total.backward()
        if cfg.clip_norm is not None:
            P.clip_grad_norm(trainable, cfg.clip_norm)
        opt.step()
        curve.append(CurveRow(step, float(total.detach()), float(kl.detach()),
                              float(ce.detach())))
        if on_step is not None:
            on_step(step, model)
    return curve


def ce_only_loss(model: TinyVLM, batch: Batch):
    logits = model.forward_batch(batch)
    ce = masked_ce(logits, batch.tgt_out, batch.tgt_mask)
    return ce, torch.zeros(()), ce


def train_teacher(model: TinyVLM, samples: list[Sample],
                  cfg: TrainConfig) -> list[CurveRow]:
    """Cross-entropy training of the full model on the synthetic corpus."""
    return run_steps(model, samples, cfg, ce_only_loss)


def write_curve_csv(path: str | Path, curve: list[CurveRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "total", "kl", "ce"])
        for row in curve:
            writer.writerow([row.step, f"{row.total:.6f}", f"{row.kl:.6f}", f"{row.ce:.6f}"])
