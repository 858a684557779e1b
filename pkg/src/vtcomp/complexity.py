"""Analytic decoder-cost model and a single-threaded wall-clock benchmark.

The analytic side counts the dominant decoder terms over the visual tokens:
attention n^2*d and feed-forward n*d^2 per layer, with compression dividing
the attention term by r^2 and the feed-forward term by r. Constant factors
are dropped. Text-token cost is reported separately for honesty; it does
not enter the ratio.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .model import TinyVLM, make_batch


@dataclass
class ComplexityReport:
    L: int
    n: int
    d: int
    r: int
    flops_full: float
    flops_compressed: float
    ratio: float
    attn_full: float
    attn_compressed: float
    ffn_full: float
    ffn_compressed: float
    text_tokens: int = 0
    flops_text: float = 0.0


def analytic_cost(L: int, n: int, d: int, r: int, text_tokens: int = 0) -> ComplexityReport:
    """Visual-token decoder cost before/after compression by ratio r."""
    if min(L, n, d) <= 0 or r < 1:
        raise ValueError("L, n, d must be positive and r >= 1")
    attn_full = float(L * n * n * d)
    ffn_full = float(L * n * d * d)
    attn_comp = attn_full / (r * r)
    ffn_comp = ffn_full / r
    full = attn_full + ffn_full
    comp = attn_comp + ffn_comp
    return ComplexityReport(
        L=L, n=n, d=d, r=r,
        flops_full=full,
        flops_compressed=comp,
        ratio=full / comp,
        attn_full=attn_full,
        attn_compressed=attn_comp,
        ffn_full=ffn_full,
        ffn_compressed=ffn_comp,
        text_tokens=text_tokens,
        flops_text=float(L * (text_tokens * text_tokens * d + text_tokens * d * d)),
    )


@dataclass
class LatencyRow:
    model_tag: str
    ratio: int
    compress_label: str  # "0%", "50%", "75%", ...
    mean_ms: float
    delta: float  # speedup vs the 0% row; 1.0 for the 0% row itself


def ratio_label(r: int) -> str:
    return f"{100 - round(100 / r)}%" if r > 1 else "0%"


def measure_latency(model: TinyVLM, samples, repeats: int = 5,
                    warmup: int = 2) -> float:
    """Mean wall milliseconds per sample for a teacher-forced forward pass.

    Strictly single-threaded so speedups stay interpretable; warm-up
    iterations are excluded from the mean.
    """
    if not samples:
        raise ValueError("empty eval set")
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        batches = [make_batch([s], model.config) for s in samples]
        with torch.no_grad():
            for _ in range(warmup):
                for b in batches:
                    model.forward_batch(b)
            start = time.perf_counter()
            for _ in range(repeats):
                for b in batches:
                    model.forward_batch(b)
            elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(old_threads)
    return elapsed / (repeats * len(samples)) * 1000.0


def write_latency_table(path: str | Path, rows: list[LatencyRow],
                        reports: dict[int, ComplexityReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "model_tag", "compress_ratio", "ratio_r", "time_ms", "delta",
            "flops_full", "flops_compressed", "analytic_ratio", "flops_text",
        ])
        for row in rows:
            rep = reports[row.ratio]
            writer.writerow([
                row.model_tag, row.compress_label, row.ratio,
                f"{row.mean_ms:.3f}", f"{row.delta:.3f}",
                int(rep.flops_full), int(rep.flops_compressed),
                f"{rep.ratio:.4f}", int(rep.flops_text),
            ])
