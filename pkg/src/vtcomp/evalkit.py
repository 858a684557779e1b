"""Evaluation metrics, the attention-rank pruning baseline, and heatmaps.

seq_accuracy is exact match of the greedy-decoded target; token_accuracy is
the teacher-forced per-token match rate (a greedy exact match implies every
forced token matched, so seq <= token per task by construction).
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from .compression import QueryResampler
from .data import Sample
from .model import Batch, TinyVLM, make_batch

EVAL_BATCH = 64


def evaluate(model, samples: list[Sample], batch_size: int = EVAL_BATCH) -> dict:
    """Greedy-decoding metrics per task and overall; deterministic."""
    if not samples:
        raise ValueError("empty eval dataset")
    by_task: dict[str, list[Sample]] = defaultdict(list)
    for s in samples:
        by_task[s.task_tag].append(s)
    result: dict[str, dict] = {}
    tok_hits = tok_total = seq_hits = seq_total = 0
    for task in sorted(by_task):
        rows = by_task[task]
        t_tok_hits = t_tok_total = t_seq_hits = 0
        max_new = max(len(s.target_ids()) for s in rows) + 1
        for lo in range(0, len(rows), batch_size):
            chunk = rows[lo : lo + batch_size]
            batch = make_batch(chunk, model.config)
            with torch.no_grad():
                logits = model.forward_batch(batch)
            pred = logits.argmax(-1)
            ok = (pred == batch.tgt_out) & batch.tgt_mask
            t_tok_hits += int(ok.sum())
            t_tok_total += int(batch.tgt_mask.sum())
            decoded = model.decode_batch(batch, max_new=max_new)
            for s, toks in zip(chunk, decoded):
                t_seq_hits += int(toks == s.target_ids())
        result[task] = {
            "seq_accuracy": t_seq_hits / len(rows),
            "token_accuracy": t_tok_hits / t_tok_total,
            "count": len(rows),
        }
        tok_hits += t_tok_hits
        tok_total += t_tok_total
        seq_hits += t_seq_hits
        seq_total += len(rows)
    result["overall"] = {
        "seq_accuracy": seq_hits / seq_total,
        "token_accuracy": tok_hits / tok_total,
        "count": seq_total,
    }
    return result


def seq_accuracy(model, samples: list[Sample], batch_size: int = EVAL_BATCH) -> float:
    return evaluate(model, samples, batch_size)["overall"]["seq_accuracy"]


def write_metrics_json(path: str | Path, metrics: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, sort_keys=True, indent=1)
        f.write("\n")


class PrunedVLM:
    """Training-free baseline: keep the visual tokens that receive the most
    first-layer attention from the instruction, drop the rest.

    Kept tokens retain their original position ids, so the decoder sees the
    layout it was trained on, just sparser. Duck-types the evaluation surface
    of TinyVLM (config, forward_batch, decode_batch).
    """

    def __init__(self, model: TinyVLM, keep_fraction: float):
        if not 0 < keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")
        if model.role != "teacher":
            raise ValueError("pruning baseline wraps the uncompressed teacher")
        self.model = model
        self.config = model.config
        self.keep_fraction = keep_fraction
        self.role = "teacher"
        self.n_keep = max(1, round(model.config.n_visual * keep_fraction))

    def _pruned_prefix(self, batch: Batch):
        model = self.model
        n = model.config.n_visual
        vis, vis_ids = model.visual_embeds(batch.grids, batch.noise)
        instr_emb = model.decoder.token_emb[batch.instr]
        t = batch.instr.shape[1]
        instr_ids = n + torch.arange(t, dtype=torch.float32)
        if self.n_keep == n:
            embeds = torch.cat([vis, instr_emb], dim=1)
            return embeds, torch.cat([vis_ids, instr_ids])
        full = torch.cat([vis, instr_emb], dim=1)
        full_ids = torch.cat([vis_ids, instr_ids])
        with torch.no_grad():
            _, attns = model.decoder(full, full_ids, need_attn=True)
        # mean attention received by each visual key from instruction queries
        received = attns[0][:, :, n : n + t, :n].mean(dim=(1, 2))  # (B, n)
        keep = received.topk(self.n_keep, dim=-1).indices.sort(dim=-1).values  # (B, k)
        b = vis.shape[0]
        gathered = vis.gather(1, keep.unsqueeze(-1).expand(-1, -1, vis.shape[-1]))
        kept_ids = vis_ids.unsqueeze(0).expand(b, -1).gather(1, keep)
        embeds = torch.cat([gathered, instr_emb], dim=1)
        ids = torch.cat([kept_ids, instr_ids.unsqueeze(0).expand(b, -1)], dim=1)
        return embeds, ids

    def forward_batch(self, batch: Batch, need_attn: bool = False):
        prefix, ids = self._pruned_prefix(batch)
        return self.model.forward_with_prefix(prefix, ids, batch, need_attn=need_attn)

    def decode_batch(self, batch: Batch, max_new: int, temperature: float = 0.0,
                     generator: torch.Generator | None = None):
        prefix, ids = self._pruned_prefix(batch)
        return self.model.decode_with_prefix(prefix, ids, max_new,
                                             temperature=temperature, generator=generator)


def prune_topk_baseline(model: TinyVLM, keep_fraction: float) -> PrunedVLM:
    return PrunedVLM(model, keep_fraction)


def attention_map(model: TinyVLM, sample: Sample, layer: int = 0) -> np.ndarray:
    """Mean attention from the answer rows to each visual token, un-pooled to
    the glyph grid and min-max normalized into [0, 1].

    All-equal maps normalize to all zeros by convention.
    """
    if layer >= model.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    batch = make_batch([sample], model.config)
    with torch.no_grad():
        _, attns = model.forward_batch(batch, need_attn=True)
    attn = attns[layer][0]  # (heads, S, S)
    n = model.config.n_visual
    r = model.compression.ratio if model.compression else 1
    m = -(-n // r)
    p = m + batch.instr.shape[1]
    y_len = int(batch.tgt_mask[0].sum())
    rows = attn[:, p - 1 : p - 1 + y_len, :m]  # answer queries onto visual keys
    token_scores = rows.mean(dim=(0, 1))  # (m,)
    cell_scores = np.zeros(n, dtype=np.float64)
    if isinstance(getattr(model, "compress", None), QueryResampler):
        vis_tokens = model.encode_image(batch.grids, batch.noise)
        from .compression import pad_to_multiple

        padded = pad_to_multiple(vis_tokens, r)
        with torch.no_grad():
            qattn = model.compress.attention(padded)[0]  # (m, padded_n)
        spread = token_scores.unsqueeze(-1) * qattn  # (m, padded_n)
        cell_scores = spread.sum(dim=0).numpy()[:n]
    else:
        for i in range(m):
            lo, hi = i * r, min((i + 1) * r, n)
            cell_scores[lo:hi] = float(token_scores[i])
    lo, hi = cell_scores.min(), cell_scores.max()
    if hi - lo < 1e-12:
        normed = np.zeros_like(cell_scores)
    else:
        normed = (cell_scores - lo) / (hi - lo)
    return normed.reshape(model.config.grid_h, model.config.grid_w)


def write_pgm(path: str | Path, heat: np.ndarray, maxval: int = 255) -> None:
    """Plain (P2) PGM, one row of grey values per grid row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = heat.shape
    quant = np.clip(np.rint(heat * maxval), 0, maxval).astype(int)
    lines = [f"P2", f"{w} {h}", f"{maxval}"]
    lines += [" ".join(str(v) for v in row) for row in quant]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_heat_csv(path: str | Path, heat: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in heat:
            writer.writerow([f"{v:.6f}" for v in row])
