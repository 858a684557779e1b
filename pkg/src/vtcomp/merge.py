"""Checkpoint fusion: weighted-difference merging with Shapley-value weights.

The merge rule is out = base + sum_i alpha_i * (cpt_i - base), evaluated per
tensor in float64 and cast back to float32, so the alpha=0 and single-alpha=1
cases reproduce base / checkpoint bit-exactly. Shapley values are computed by
exact enumeration of all 2^n coalitions; a coalition's value is the score of
the equal-weight merge of its members (v(empty) = score of base alone).
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .persist import Checkpoint


class MergeShapeError(RuntimeError):
    pass


@dataclass
class ShapleyWeights:
    phi: dict[int, float]
    alpha: dict[int, float]
    coalition_values: dict[frozenset, float] = field(default_factory=dict)


def _check_compatible(base: Checkpoint, cpts: list[Checkpoint]) -> None:
    base_names = base.names()
    for i, cp in enumerate(cpts):
        if cp.names() != base_names:
            extra = sorted(set(cp.names()) ^ set(base_names))
            raise MergeShapeError(
                f"checkpoint {i} name set differs from base, first offender: {extra[0]}"
            )
        for name in base_names:
            if tuple(cp.tensors[name].shape) != tuple(base.tensors[name].shape):
                raise MergeShapeError(
                    f"shape mismatch on tensor {name} in checkpoint {i}"
                )


def merge_eq4(base: Checkpoint, cpts: list[Checkpoint],
              alpha: list[float]) -> Checkpoint:
    """out[t] = base[t] + sum_i alpha_i * (cpt_i[t] - base[t]) per tensor."""
    if len(alpha) != len(cpts):
        raise ValueError("need one alpha per checkpoint")
    _check_compatible(base, cpts)
    out: dict[str, torch.Tensor] = {}
    for name in base.names():
        acc = base.tensors[name].to(torch.float64)
        for a, cp in zip(alpha, cpts):
            if a != 0.0:
                acc = acc + a * (cp.tensors[name].to(torch.float64)
                                 - base.tensors[name].to(torch.float64))
        out[name] = acc.to(torch.float32)
    manifest = dict(base.manifest)
    manifest["merged_from"] = {
        "n_checkpoints": len(cpts),
        "alpha": [float(a) for a in alpha],
    }
    return Checkpoint(manifest=manifest, tensors=out)


def simple_average(base: Checkpoint, cpts: list[Checkpoint]) -> Checkpoint:
    """Equal-weight merge (alpha_i = 1/n each)."""
    if not cpts:
        raise ValueError("simple_average needs at least one checkpoint")
    return merge_eq4(base, cpts, [1.0 / len(cpts)] * len(cpts))


def task_arithmetic(base: Checkpoint, cpts: list[Checkpoint],
                    scale: float = 0.5) -> Checkpoint:
    """base + scale * sum of checkpoint differences."""
    if scale < 0:
        raise ValueError("scale must be non-negative")
    return merge_eq4(base, cpts, [scale] * len(cpts))


def shapley_from_values(values: dict[frozenset, float], n: int) -> list[float]:
    """Exact Shapley values of an n-player game given all coalition values."""
    phi = [0.0] * n
    fact = math.factorial
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for k in range(len(others) + 1):
            weight = fact(k) * fact(n - k - 1) / fact(n)
            for subset in itertools.combinations(others, k):
                s = frozenset(subset)
                phi[i] += weight * (values[s | {i}] - values[s])
    return phi


def coalition_values(base: Checkpoint, cpts: list[Checkpoint], f,
                     cache: dict[frozenset, float] | None = None) -> dict[frozenset, float]:
    """Score every subset S as f(equal-weight merge of S); f(base) for S=empty."""
    values = cache if cache is not None else {}
    n = len(cpts)
    for k in range(n + 1):
        for subset in itertools.combinations(range(n), k):
            s = frozenset(subset)
            if s in values:
                continue
            if not s:
                score = f(base)
            else:
                members = [cpts[i] for i in sorted(s)]
                score = f(merge_eq4(base, members, [1.0 / len(s)] * len(s)))
            if not math.isfinite(score):
                raise ValueError(f"evaluation function returned non-finite score for {sorted(s)}")
            values[s] = float(score)
    return values


def shapley_weights(base: Checkpoint, cpts: list[Checkpoint], f,
                    scale: float = 1.0) -> ShapleyWeights:
    """Exact Shapley attribution over checkpoints, mapped to merge weights.

    Negative Shapley values are clipped to zero before normalizing to the
    global scale; if nothing is positive the weights fall back to uniform.
    """
    n = len(cpts)
    if n > 10:
        raise ValueError("exact enumeration limited to 10 checkpoints (2^n coalitions)")
    values = coalition_values(base, cpts, f)
    phi = shapley_from_values(values, n)
    clipped = [max(p, 0.0) for p in phi]
    total = sum(clipped)
    if total <= 0.0:
        warnings.warn("no checkpoint has positive Shapley value; using uniform weights")
        alpha = [scale / n] * n
    else:
        alpha = [scale * c / total for c in clipped]
    return ShapleyWeights(
        phi={i: phi[i] for i in range(n)},
        alpha={i: alpha[i] for i in range(n)},
        coalition_values=values,
    )


SCHEMES = ("none", "simple", "task_arith", "shapley")


def evaluate_merge_schemes(base: Checkpoint, cpts: list[Checkpoint], f,
                           ta_scale: float = 0.5,
                           shapley_scale: float = 1.0) -> dict:
    """Score the paper's four schemes; "none" is the base (final) checkpoint."""
    weights = shapley_weights(base, cpts, f, scale=shapley_scale)
    alpha = [weights.alpha[i] for i in range(len(cpts))]
    scores = {
        "none": float(f(base)),
        "simple": float(f(simple_average(base, cpts))),
        "task_arith": float(f(task_arithmetic(base, cpts, ta_scale))),
        "shapley": float(f(merge_eq4(base, cpts, alpha))),
    }
    return {"scores": scores, "shapley": weights}


def write_merge_table(path: str | Path, result: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "score"])
        for scheme in SCHEMES:
            writer.writerow([scheme, f"{result['scores'][scheme]:.6f}"])
