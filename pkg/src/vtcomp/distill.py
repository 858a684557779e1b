"""Re-alignment: distill the frozen teacher into the token-compressed student.

Only the student adaptor and the compressor receive gradients; the loss is
forward KL from the teacher's output distribution plus cross-entropy on the
gold tokens, summed over the full vocabulary at every supervised position.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import TinyVLM
from .training import CurveRow, TrainConfig, masked_ce, run_steps


@dataclass
class DistillConfig(TrainConfig):
    kl_weight: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        if self.kl_weight < 0 or self.ce_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kl_weight == 0 and self.ce_weight == 0:
            raise ValueError("at least one loss weight must be positive")


def kl_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
            mask: torch.Tensor | None = None) -> torch.Tensor:
    """Forward KL(teacher || student) from raw logits, averaged over the
    supervised positions."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"logit shape mismatch: {tuple(teacher_logits.shape)} vs "
            f"{tuple(student_logits.shape)}"
        )
    wide = torch.promote_types(teacher_logits.dtype, torch.float32)
    logp_t = torch.log_softmax(teacher_logits.to(wide), dim=-1)
    logp_s = torch.log_softmax(student_logits.to(wide), dim=-1)
    per_pos = (logp_t.exp() * (logp_t - logp_s)).sum(dim=-1)
    if mask is None:
        return per_pos.mean()
    mask = mask.to(per_pos.dtype)
    return (per_pos * mask).sum() / mask.sum().clamp_min(1.0)


def ce_loss(student_logits: torch.Tensor, targets: torch.Tensor,
            mask: torch.Tensor | None = None) -> torch.Tensor:
    """Hard-label cross-entropy on gold tokens (mean over supervised rows)."""
    return masked_ce(student_logits, targets, mask)


def distill_loss(teacher: TinyVLM, cfg: DistillConfig):
    def loss_fn(student: TinyVLM, batch):
        with torch.no_grad():
            t_logits = teacher.forward_batch(batch)
        s_logits = student.forward_batch(batch)
        kl = kl_loss(t_logits, s_logits, batch.tgt_mask)
        ce = ce_loss(s_logits, batch.tgt_out, batch.tgt_mask)
        total = cfg.kl_weight * kl + cfg.ce_weight * ce
        return total, kl, ce

    return loss_fn


def realign(teacher: TinyVLM, student: TinyVLM, samples, cfg: DistillConfig) -> list[CurveRow]:
    """Train the student's adaptor/compressor against the frozen teacher.

    Returns the per-step loss curve; the student is updated in place and the
    teacher is never touched (its forward runs under no_grad).
    """
    if student.role != "student":
        raise ValueError("realign expects a student model")
    if teacher.role != "teacher":
        raise ValueError("realign expects a teacher model")
    return run_steps(student, samples, cfg, distill_loss(teacher, cfg))
