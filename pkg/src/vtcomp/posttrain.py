"""Post-training: loss-profiled task re-sampling, rejection-sampled reasoning
data, and full-parameter fine-tuning with intermediate checkpoints.

The sampling policy follows the coarse-run loss profile: tasks far below the
median loss are down-weighted, hard non-generation tasks are up-weighted,
generation tasks are never up-weighted. Rejection sampling drives the
teacher at temperature over scratchpad-format instructions and keeps only
candidates whose final answer verifies against ground truth.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import re
import statistics
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import vocab
from .data import Sample
from .model import TinyVLM, make_batch
from .params import trainable_params
from .persist import save_checkpoint
from .training import CurveRow, TrainConfig, ce_only_loss, masked_ce, run_steps


@dataclass
class TaskLossStats:
    task_tag: str
    mean_loss: float
    sample_count: int
    is_generation_task: bool
    weight: float = 0.0
    flag: str = ""  # "easy" | "mid" | "hard", filled by resample_weights


@dataclass
class CotRecord:
    q: Sample
    candidates: list[tuple[str, str]]  # (r_cot, r_ans) per draw
    accepted: list[int]
    gold: str


@dataclass
class SamplingPolicy:
    easy_threshold: float = 0.5   # easy if mean_loss < easy_threshold * median
    hard_threshold: float = 1.5   # hard if mean_loss > hard_threshold * median
    easy_factor: float = 0.5
    hard_factor: float = 2.0


def coarse_profile(model: TinyVLM, samples: list[Sample], subset_fraction: float,
                   train_cfg: TrainConfig | None = None, seed: int = 0) -> list[TaskLossStats]:
    """Briefly train a throwaway copy on a subset, then report per-task mean
    CE loss on each task's held-out remainder.

    The subset is the leading slice of each task in dataset order (the corpus
    is already shuffled), so tasks holding identical data profile to
    identical losses."""
    if not 0 < subset_fraction <= 1:
        raise ValueError("subset_fraction must be in (0, 1]")
    by_task: dict[str, list[Sample]] = {}
    for s in samples:
        by_task.setdefault(s.task_tag, []).append(s)
    train_split: list[Sample] = []
    held_out: dict[str, list[Sample]] = {}
    for task in sorted(by_task):
        rows = by_task[task]
        k = max(1, math.ceil(subset_fraction * len(rows)))
        train_split.extend(rows[:k])
        rest = rows[k:]
        if not rest:
            warnings.warn(f"task {task} has no held-out samples; scoring the subset")
            rest = rows[:k]
        held_out[task] = rest

    probe = copy.deepcopy(model)
    for p in probe.parameters():
        p.requires_grad_(True)
    cfg = train_cfg or TrainConfig(steps=150, lr=1e-3, batch_size=32, seed=seed)
    run_steps(probe, train_split, cfg, ce_only_loss)

    stats = []
    for task in sorted(held_out):
        rows = held_out[task]
        loss_sum = tok_sum = 0.0
        with torch.no_grad():
            for lo in range(0, len(rows), 64):
                batch = make_batch(rows[lo : lo + 64], model.config)
                logits = probe.forward_batch(batch)
                n_tok = float(batch.tgt_mask.sum())
                loss_sum += float(masked_ce(logits, batch.tgt_out, batch.tgt_mask)) * n_tok
                tok_sum += n_tok
        stats.append(
            TaskLossStats(
                task_tag=task,
                mean_loss=loss_sum / tok_sum,
                sample_count=len(by_task[task]),
                is_generation_task=rows[0].is_generation_task,
            )
        )
    return stats


def resample_weights(stats: list[TaskLossStats],
                     policy: SamplingPolicy | None = None) -> dict[str, float]:
    """Median-anchored re-weighting, normalized to a distribution over tasks."""
    if not stats:
        raise ValueError("need at least one task")
    policy = policy or SamplingPolicy()
    median = statistics.median(s.mean_loss for s in stats)
    raw = {}
    for s in stats:
        if s.mean_loss < policy.easy_threshold * median:
            s.flag = "easy"
            factor = policy.easy_factor
        elif s.mean_loss > policy.hard_threshold * median:
            s.flag = "hard"
            # generation tasks are never up-weighted
            factor = 1.0 if s.is_generation_task else policy.hard_factor
        else:
            s.flag = "mid"
            factor = 1.0
        raw[s.task_tag] = factor
    total = sum(raw.values())
    weights = {t: f / total for t, f in raw.items()}
    for s in stats:
        s.weight = weights[s.task_tag]
    return weights


_NUM_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)$")


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def verify_answer(pred: str, gold: str, rel_tol: float = 1e-3) -> bool:
    """Normalized exact match, or numeric match within relative tolerance."""
    p, g = _normalize(pred), _normalize(gold)
    if p == g:
        return True
    if _NUM_RE.match(p) and _NUM_RE.match(g):
        return math.isclose(float(p), float(g), rel_tol=rel_tol, abs_tol=1e-9)
    return False


def split_cot_answer(token_ids: list[int]) -> tuple[str, str] | None:
    """Split generated scratchpad tokens into (reasoning text, answer string).

    The answer is the digit run after the last "=", or the trailing digit
    run when no "=" was emitted; None when no answer can be parsed.
    """
    eq = vocab.keyword_token("=")
    if eq in token_ids:
        cut = len(token_ids) - 1 - token_ids[::-1].index(eq)
        head, tail = token_ids[:cut], token_ids[cut + 1 :]
    else:
        head, tail = [], list(token_ids)
        while head is not None and tail and not (
            vocab.DIGIT_BASE <= tail[-1] < vocab.DIGIT_BASE + 10
        ):
            tail.pop()
        cut = len(tail)
        while cut > 0 and vocab.DIGIT_BASE <= tail[cut - 1] < vocab.DIGIT_BASE + 10:
            cut -= 1
        head, tail = tail[:cut], tail[cut:]
    digits = [t - vocab.DIGIT_BASE for t in tail if vocab.DIGIT_BASE <= t < vocab.DIGIT_BASE + 10]
    if not digits or len(digits) != len(tail):
        return None
    answer = "".join(str(d) for d in digits)
    try:
        reasoning = vocab.decode(head)
    except ValueError:
        return None  # sampled tokens outside the word table: not a parseable trace
    return reasoning, answer


def model_cot_generator(model: TinyVLM, temperature: float = 1.0, seed: int = 0,
                        max_new: int = 24):
    """Candidate generator: temperature-sample a scratchpad continuation for
    the cot variant of the question's instruction."""

    def generate(q: Sample, draw_index: int) -> tuple[str, str] | None:
        cot_q = Sample(
            x_v=q.x_v,
            x_t=q.x_t + " cot",
            y=q.y,
            task_tag=q.task_tag,
            is_generation_task=q.is_generation_task,
        )
        batch = make_batch([cot_q], model.config)
        gen = torch.Generator().manual_seed(
            (seed * 1_000_003 + draw_index) % (2**63 - 1)
        )
        toks = model.decode_batch(batch, max_new=max_new, temperature=temperature,
                                  generator=gen)[0]
        return split_cot_answer(toks)

    return generate


def rejection_sample(q: Sample, generator, k: int,
                     verifier=verify_answer) -> CotRecord | None:
    """Draw k candidates, keep those whose final answer verifies against the
    gold answer; None when nothing survives (the record is dropped)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates: list[tuple[str, str]] = []
    failures = 0
    for i in range(k):
        out = generator(q, i)
        if out is None:
            failures += 1
            continue
        candidates.append(out)
    accepted = [i for i, (_, ans) in enumerate(candidates) if verifier(ans, q.y)]
    if not accepted:
        return None
    record = CotRecord(q=q, candidates=candidates, accepted=accepted, gold=q.y)
    if failures:
        record.q.meta.setdefault("rs_failures", failures)
    return record


def record_to_sample(record: CotRecord) -> Sample:
    """Keep the shortest accepted candidate as one training sample."""
    best = min(record.accepted,
               key=lambda i: (len(record.candidates[i][0]), i))
    r_cot, r_ans = record.candidates[best]
    # the reasoning text excludes the "="; reconstruct the scratchpad target
    spaced_ans = " ".join(r_ans)
    y = f"{r_cot} = {spaced_ans}".strip()
    return Sample(
        x_v=record.q.x_v,
        x_t=record.q.x_t + " cot",
        y=y,
        task_tag=record.q.task_tag + "_rs",
        is_generation_task=False,
        meta={"r_cot": r_cot, "r_ans": r_ans, "gold": record.gold},
    )


def build_rs_dataset(teacher: TinyVLM, samples: list[Sample], k: int = 8,
                     temperature: float = 1.0, rs_mix_ratio: float = 0.5,
                     seed: int = 0) -> tuple[list[Sample], dict]:
    """Rejection-sample reasoning questions into scratchpad training samples.

    The output size is capped at rs_mix_ratio times the number of vanilla
    reasoning samples; returns (samples, stats).
    """
    reasoning = [s for s in samples
                 if not s.is_generation_task and not s.task_tag.endswith("_cot")]
    target = int(rs_mix_ratio * len(reasoning))
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(reasoning))
    out: list[Sample] = []
    attempted = dropped = 0
    for j in order:
        if len(out) >= target:
            break
        q = reasoning[int(j)]
        attempted += 1
        gen = model_cot_generator(teacher, temperature=temperature,
                                  seed=seed * 65_537 + int(j))
        record = rejection_sample(q, gen, k)
        if record is None:
            dropped += 1
            continue
        out.append(record_to_sample(record))
    stats = {"attempted": attempted, "accepted": len(out), "dropped": dropped,
             "target": target}
    return out, stats


def sft_train(student: TinyVLM, mixed: list[Sample], weights: dict[str, float],
              cfg: TrainConfig, epochs: int = 3, n_checkpoints: int = 5,
              out_dir: str | Path | None = None,
              parent_run_id: str = "") -> tuple[list[Path], list[CurveRow]]:
    """Full-parameter fine-tuning with task-weighted sampling.

    Saves n_checkpoints evenly spaced intermediate checkpoints plus the final
    state under out_dir; epochs == 0 is a no-op that saves nothing.
    """
    for p in student.parameters():
        p.requires_grad_(True)
    counts: dict[str, int] = {}
    for s in mixed:
        counts[s.task_tag] = counts.get(s.task_tag, 0) + 1
    missing = sorted(set(counts) - set(weights))
    if missing:
        raise ValueError(f"no sampling weight for tasks: {missing}")
    probs = np.array([weights[s.task_tag] / counts[s.task_tag] for s in mixed])
    probs /= probs.sum()

    total_steps = epochs * math.ceil(len(mixed) / cfg.batch_size)
    cfg = dataclasses.replace(cfg, steps=total_steps)
    paths: list[Path] = []
    save_at = {}
    if out_dir is not None and total_steps > 0:
        out_dir = Path(out_dir)
        save_at = {
            max(1, (k * total_steps) // (n_checkpoints + 1)): k
            for k in range(1, n_checkpoints + 1)
        }

    def on_step(step, model):
        if step + 1 in save_at:
            k = save_at[step + 1]
            path = save_checkpoint(model, out_dir / f"cpt_{k}", step=step + 1,
                                   parent_run_id=parent_run_id)
            paths.append(path)

    curve = []
    if total_steps > 0:
        curve = run_steps(student, mixed, cfg, ce_only_loss, probs=probs,
                          on_step=on_step)
    if out_dir is not None and total_steps > 0:
        paths.append(save_checkpoint(student, Path(out_dir) / "final",
                                     step=total_steps, parent_run_id=parent_run_id))
    return paths, curve
