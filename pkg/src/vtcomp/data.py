"""Synthetic OCR-style corpus: glyph grids with instruction/target pairs.

A "picture" is a small grid of digit glyphs plus per-patch Gaussian noise,
so ground truth is exact and every task has a closed-form oracle. Tasks:

  transcribe         read the whole grid row-major        (generation)
  transcribe_region  read a sub-rectangle row-major       (generation)
  count_glyph        count occurrences of one glyph       (reasoning)
  sum_digits         sum the glyph values in one row      (reasoning)

The *_cot variants of the two reasoning tasks carry a worked answer
("5 5 5 = 3"); they teach the model the scratchpad format that rejection
sampling later exploits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vocab

INSTR_LEN = 6  # instructions are right-padded with <pad> to this many tokens

GENERATION_TASKS = ("transcribe", "transcribe_region")
REASONING_TASKS = ("count_glyph", "sum_digits", "count_glyph_cot", "sum_digits_cot")
ALL_TASKS = GENERATION_TASKS + REASONING_TASKS


@dataclass(frozen=True)
class GlyphImage:
    """A glyph-id grid plus the seed/scale of its additive patch noise."""

    grid: tuple[tuple[int, ...], ...]  # grid_h x grid_w, values in [0, alphabet)
    noise_seed: int
    noise_sigma: float

    @property
    def grid_h(self) -> int:
        return len(self.grid)

    @property
    def grid_w(self) -> int:
        return len(self.grid[0])

    def as_array(self) -> np.ndarray:
        return np.asarray(self.grid, dtype=np.int64)


@dataclass
class Sample:
    """One (image, instruction, target) triple."""

    x_v: GlyphImage
    x_t: str
    y: str
    task_tag: str
    is_generation_task: bool
    meta: dict = field(default_factory=dict)

    def instruction_ids(self, pad_to: int = INSTR_LEN) -> list[int]:
        ids = vocab.encode(self.x_t)
        if len(ids) > pad_to:
            raise ValueError(f"instruction longer than {pad_to} tokens: {self.x_t!r}")
        return ids + [vocab.PAD] * (pad_to - len(ids))

    def target_ids(self) -> list[int]:
        return vocab.encode(self.y)


@dataclass
class CorpusSpec:
    alphabet_size: int = 10
    grid_h: int = 8
    grid_w: int = 8
    noise_sigma: float = 0.1
    n_samples: int = 10_000
    task_mix: dict[str, float] = field(
        default_factory=lambda: {
            "transcribe": 0.30,
            "transcribe_region": 0.25,
            "count_glyph": 0.12,
            "sum_digits": 0.12,
            "count_glyph_cot": 0.105,
            "sum_digits_cot": 0.105,
        }
    )
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.alphabet_size <= vocab.MAX_ALPHABET:
            raise ValueError(f"alphabet_size must be in [2, {vocab.MAX_ALPHABET}]")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dims must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        unknown = set(self.task_mix) - set(ALL_TASKS)
        if unknown:
            raise ValueError(f"unknown tasks in mix: {sorted(unknown)}")
        total = sum(self.task_mix.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"task mix must sum to 1 (got {total})")
        if any(f < 0 for f in self.task_mix.values()):
            raise ValueError("task mix fractions must be non-negative")
        # coordinate tokens only exist up to r9/c9
        coord_tasks = [t for t, f in self.task_mix.items() if f > 0
                       and (t == "transcribe_region" or t.startswith("sum_digits"))]
        if coord_tasks and max(self.grid_h, self.grid_w) > vocab.MAX_COORD:
            raise ValueError(
                f"grid dims above {vocab.MAX_COORD} break coordinate tokens "
                f"needed by {sorted(coord_tasks)}"
            )


def transcribe_target(grid: np.ndarray) -> str:
    return " ".join(str(int(v)) for v in grid.reshape(-1))


def region_target(grid: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> str:
    return " ".join(str(int(v)) for v in grid[r0 : r1 + 1, c0 : c1 + 1].reshape(-1))


def count_target(grid: np.ndarray, glyph: int) -> str:
    return str(int((grid == glyph).sum()))


def sum_row_target(grid: np.ndarray, row: int) -> str:
    return str(int(grid[row].sum()))


def count_cot_target(grid: np.ndarray, glyph: int) -> str:
    n = int((grid == glyph).sum())
    marks = " ".join([str(glyph)] * n)
    return f"{marks} = {n}" if n else f"= {n}"


def sum_row_cot_target(grid: np.ndarray, row: int) -> str:
    terms = " ".join(str(int(v)) for v in grid[row])
    return f"{terms} = {int(grid[row].sum())}"


def _make_sample(task: str, grid: np.ndarray, rng: np.random.Generator, spec: CorpusSpec) -> Sample:
    noise_seed = int(rng.integers(0, 2**31 - 1))
    image = GlyphImage(
        grid=tuple(tuple(int(v) for v in row) for row in grid),
        noise_seed=noise_seed,
        noise_sigma=spec.noise_sigma,
    )
    if task == "transcribe":
        x_t, y = "transcribe", transcribe_target(grid)
    elif task == "transcribe_region":
        # mostly pointer-heavy small shapes (cells, in-row runs, row blocks),
        # some full rects
        shape_draw = rng.random()
        if shape_draw < 0.25:
            r0 = r1 = int(rng.integers(0, spec.grid_h))
            c0 = c1 = int(rng.integers(0, spec.grid_w))
        elif shape_draw < 0.60:
            r0 = r1 = int(rng.integers(0, spec.grid_h))
            c0, c1 = sorted(rng.integers(0, spec.grid_w, size=2).tolist())
        elif shape_draw < 0.90:
            r0, r1 = sorted(rng.integers(0, spec.grid_h, size=2).tolist())
            c0, c1 = 0, spec.grid_w - 1
        else:
            r0, r1 = sorted(rng.integers(0, spec.grid_h, size=2).tolist())
            c0, c1 = sorted(rng.integers(0, spec.grid_w, size=2).tolist())
        x_t = f"region r{r0} c{c0} r{r1} c{c1}"
        y = region_target(grid, r0, c0, r1, c1)
    elif task in ("count_glyph", "count_glyph_cot"):
        # plant the queried glyph 0..5 times so the count distribution is
        # small and balanced; remaining cells avoid the glyph
        g = int(rng.integers(0, spec.alphabet_size))
        k = int(rng.integers(0, 6))
        others = [v for v in range(spec.alphabet_size) if v != g]
        grid = rng.choice(others, size=grid.shape)
        cells = rng.choice(grid.size, size=k, replace=False)
        grid.reshape(-1)[cells] = g
        if task == "count_glyph":
            x_t, y = f"count {g}", count_target(grid, g)
        else:
            x_t, y = f"count {g} cot", count_cot_target(grid, g)
    elif task in ("sum_digits", "sum_digits_cot"):
        # the queried row holds only a few nonzero digits; sums stay small
        row = int(rng.integers(0, spec.grid_h))
        j = int(rng.integers(0, 4))
        new_row = np.zeros(spec.grid_w, dtype=grid.dtype)
        cols = rng.choice(spec.grid_w, size=min(j, spec.grid_w), replace=False)
        new_row[cols] = rng.integers(1, min(10, spec.alphabet_size),
                                     size=len(cols))
        grid = grid.copy()
        grid[row] = new_row
        if task == "sum_digits":
            x_t, y = f"sum r{row}", sum_row_target(grid, row)
        else:
            x_t, y = f"sum r{row} cot", sum_row_cot_target(grid, row)
    else:
        raise ValueError(f"unknown task: {task}")
    return Sample(
        x_v=image,
        x_t=x_t,
        y=y,
        task_tag=task,
        is_generation_task=task in GENERATION_TASKS,
        meta={},
    )


def gen_corpus(spec: CorpusSpec) -> list[Sample]:
    """Generate spec.n_samples samples, deterministic in spec.seed."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    tasks = sorted(spec.task_mix)
    fractions = np.array([spec.task_mix[t] for t in tasks], dtype=np.float64)
    fractions /= fractions.sum()
    samples = []
    for _ in range(spec.n_samples):
        task = tasks[int(rng.choice(len(tasks), p=fractions))]
        grid = rng.integers(0, spec.alphabet_size, size=(spec.grid_h, spec.grid_w))
        samples.append(_make_sample(task, grid, rng, spec))
    return samples


def sample_to_dict(s: Sample) -> dict:
    d = {
        "task_tag": s.task_tag,
        "x_v": [list(row) for row in s.x_v.grid],
        "x_t": s.x_t,
        "y": s.y,
        "is_generation_task": s.is_generation_task,
        "meta": dict(s.meta, noise_seed=s.x_v.noise_seed, noise_sigma=s.x_v.noise_sigma),
    }
    return d


def sample_from_dict(d: dict) -> Sample:
    meta = dict(d["meta"])
    image = GlyphImage(
        grid=tuple(tuple(int(v) for v in row) for row in d["x_v"]),
        noise_seed=int(meta.pop("noise_seed")),
        noise_sigma=float(meta.pop("noise_sigma")),
    )
    s = Sample(
        x_v=image,
        x_t=d["x_t"],
        y=d["y"],
        task_tag=d["task_tag"],
        is_generation_task=bool(d["is_generation_task"]),
        meta=meta,
    )
    for key in ("r_cot", "r_ans", "gold"):
        if key in d:
            s.meta[key] = d[key]
    return s


def write_jsonl(samples: list[Sample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            d = sample_to_dict(s)
            # RS-augmented records expose these at top level
            for key in ("r_cot", "r_ans", "gold"):
                if key in d["meta"]:
                    d[key] = d["meta"].pop(key)
            f.write(json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                samples.append(sample_from_dict(json.loads(line)))
    return samples
