"""Run configuration: one INI file drives every pipeline stage.

Sections: [run] (seed), [model], [compression], [data], [teacher],
[distill], [posttrain], [merge], [bench], [paths]. Unknown sections or keys
are rejected. The FCOT_SEED environment variable overrides [run] seed.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .compression import CompressionSpec
from .data import ALL_TASKS, CorpusSpec
from .distill import DistillConfig
from .model import ModelConfig
from .posttrain import SamplingPolicy
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# section -> key -> (parser, default); None default means required
_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"seed": (int, 0)},
    "model": {
        "d_vit": (int, 32),
        "d_llm": (int, 64),
        "n_layers": (int, 4),
        "n_heads": (int, 4),
        "vocab_size": (int, 64),
        "grid_h": (int, 8),
        "grid_w": (int, 8),
        "max_seq": (int, 160),
    },
    "compression": {
        "kind": (str, "conv1d"),
        "ratio": (int, 2),
        "num_queries": (int, 0),  # 0 = derive ceil(n/r) for the resampler
    },
    "data": {
        "alphabet_size": (int, 10),
        "noise_sigma": (float, 0.1),
        "n_train": (int, 10_000),
        "n_val": (int, 1_000),
        "n_test": (int, 1_000),
        "task_mix": (
            str,
            "transcribe:0.30,transcribe_region:0.25,count_glyph:0.12,"
            "sum_digits:0.12,count_glyph_cot:0.105,sum_digits_cot:0.105",
        ),
    },
    "teacher": {
        "phase1_steps": (int, 1500),
        "steps": (int, 2500),
        "batch_size": (int, 32),
        "lr": (float, 3e-3),
        "phase2_lr": (float, 1e-3),
        "weight_decay": (float, 0.01),
        "optimizer": (str, "adamw"),
        "momentum": (float, 0.0),
        "clip_norm": (float, 1.0),
        "warmup_steps": (int, 100),
    },
    "distill": {
        "batch_size": (int, 32),
        "steps": (int, 2000),
        "lr": (float, 3e-3),
        "kl_weight": (float, 1.0),
        "ce_weight": (float, 1.0),
        "weight_decay": (float, 0.0),
        "optimizer": (str, "adamw"),
        "momentum": (float, 0.0),
        "clip_norm": (float, 1.0),
        "warmup_steps": (int, 100),
    },
    "posttrain": {
        "easy_threshold": (float, 0.5),
        "hard_threshold": (float, 1.5),
        "easy_factor": (float, 0.5),
        "hard_factor": (float, 2.0),
        "rs_k": (int, 8),
        "rs_temperature": (float, 1.0),
        "rs_mix_ratio": (float, 0.5),
        "n_checkpoints": (int, 5),
        "epochs": (int, 3),
        "coarse_fraction": (float, 0.05),
        "coarse_steps": (int, 150),
        "batch_size": (int, 32),
        "lr": (float, 3e-4),
        "weight_decay": (float, 0.01),
        "optimizer": (str, "adamw"),
        "clip_norm": (float, 1.0),
        "warmup_steps": (int, 50),
    },
    "merge": {
        "scale": (float, 1.0),
        "ta_scale": (float, 0.5),
        "eval_samples": (int, 192),
    },
    "bench": {
        "repeats": (int, 5),
        "n_samples": (int, 24),
        "warmup": (int, 2),
    },
    "paths": {"workdir": (str, "runs/default")},
}


def _parse_mix(text: str) -> dict[str, float]:
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"bad task_mix entry: {part!r}")
        task, frac = part.split(":", 1)
        task = task.strip()
        if task not in ALL_TASKS:
            raise ConfigError(f"unknown task in mix: {task!r}")
        mix[task] = float(frac)
    if abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ConfigError(f"task_mix must sum to 1, got {sum(mix.values())}")
    return mix


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    compression: CompressionSpec
    data: dict
    teacher: dict
    distill: dict
    posttrain: dict
    merge: dict
    bench: dict
    workdir: Path
    raw: dict = field(default_factory=dict, repr=False)

    # stage-seed offsets; stable, never derived from string hashing
    _OFFSETS = {
        "data_train": 11, "data_val": 12, "data_test": 13,
        "teacher_init": 21, "teacher_phase1": 22, "teacher_phase2": 23,
        "student_init": 31, "realign": 32,
        "rs": 41, "coarse": 42, "sft": 43,
        "merge_eval": 51, "bench": 52, "posttrain_eval": 53,
    }

    def stage_seed(self, stage: str) -> int:
        return (self.seed * 100_003 + self._OFFSETS[stage]) % (2**31 - 1)

    def corpus_spec(self, split: str) -> CorpusSpec:
        n = {"train": self.data["n_train"], "val": self.data["n_val"],
             "test": self.data["n_test"]}[split]
        return CorpusSpec(
            alphabet_size=self.data["alphabet_size"],
            grid_h=self.model.grid_h,
            grid_w=self.model.grid_w,
            noise_sigma=self.data["noise_sigma"],
            n_samples=n,
            task_mix=dict(self.data["task_mix"]),
            seed=self.stage_seed(f"data_{split}"),
        )

    def teacher_train_config(self, phase: int) -> TrainConfig:
        t = self.teacher
        steps = t["phase1_steps"] if phase == 1 else t["steps"]
        lr = t["lr"] if phase == 1 else t["phase2_lr"]
        return TrainConfig(
            batch_size=t["batch_size"], steps=steps, lr=lr,
            weight_decay=t["weight_decay"], optimizer=t["optimizer"],
            momentum=t["momentum"], clip_norm=t["clip_norm"] or None,
            warmup_steps=t["warmup_steps"],
            seed=self.stage_seed(f"teacher_phase{phase}"),
        )

    def distill_config(self) -> DistillConfig:
        d = self.distill
        return DistillConfig(
            batch_size=d["batch_size"], steps=d["steps"], lr=d["lr"],
            kl_weight=d["kl_weight"], ce_weight=d["ce_weight"],
            weight_decay=d["weight_decay"], optimizer=d["optimizer"],
            momentum=d["momentum"], clip_norm=d["clip_norm"] or None,
            warmup_steps=d["warmup_steps"], seed=self.stage_seed("realign"),
        )

    def sft_train_config(self) -> TrainConfig:
        p = self.posttrain
        return TrainConfig(
            batch_size=p["batch_size"], steps=0, lr=p["lr"],
            weight_decay=p["weight_decay"], optimizer=p["optimizer"],
            clip_norm=p["clip_norm"] or None, warmup_steps=p["warmup_steps"],
            seed=self.stage_seed("sft"),
        )

    def sampling_policy(self) -> SamplingPolicy:
        p = self.posttrain
        return SamplingPolicy(
            easy_threshold=p["easy_threshold"], hard_threshold=p["hard_threshold"],
            easy_factor=p["easy_factor"], hard_factor=p["hard_factor"],
        )

    def resolved_text(self) -> str:
        lines = []
        for section in sorted(self.raw):
            lines.append(f"[{section}]")
            for key in sorted(self.raw[section]):
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section: [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            parse, _default = _SCHEMA[section][key]
            try:
                values[section][key] = parse(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from e
    for section, keys in _SCHEMA.items():
        values.setdefault(section, {})
        for key, (_parse, default) in keys.items():
            values[section].setdefault(key, default)

    env_seed = os.environ.get("FCOT_SEED")
    if env_seed is not None:
        try:
            values["run"]["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"bad FCOT_SEED: {env_seed!r}") from e

    try:
        model = ModelConfig(**values["model"])
    except ValueError as e:
        raise ConfigError(str(e)) from e

    comp = values["compression"]
    n = model.n_visual
    num_q = comp["num_queries"] or None
    if comp["kind"] == "query_resampler" and comp["ratio"] > 1 and num_q is None:
        num_q = math.ceil(n / comp["ratio"])
    compression = CompressionSpec(kind=comp["kind"], ratio=comp["ratio"], num_queries=num_q)
    try:
        compression.validate(n)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    data = dict(values["data"])
    data["task_mix"] = _parse_mix(data["task_mix"])

    cfg = RunConfig(
        seed=values["run"]["seed"],
        model=model,
        compression=compression,
        data=data,
        teacher=values["teacher"],
        distill=values["distill"],
        posttrain=values["posttrain"],
        merge=values["merge"],
        bench=values["bench"],
        workdir=Path(values["paths"]["workdir"]),
        raw={s: {k: str(v) for k, v in values[s].items()} for s in values},
    )
    return cfg
