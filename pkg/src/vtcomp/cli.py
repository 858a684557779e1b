"""Operator surface: one executable, one subcommand per pipeline stage.

Every subcommand is deterministic given (config, seed): artifacts are
byte-identical across reruns, timestamps never enter any output file.
Exit codes: 0 success, 2 config error, 3 runtime/numeric error,
4 incomplete input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import complexity as cx
from . import distill as D
from . import evalkit as E
from . import merge as M
from . import posttrain as PT
from . import training as T
from .compression import CompressionSpec
from .config import ConfigError, RunConfig, load_config
from .data import gen_corpus, read_jsonl, write_jsonl
from .model import ContextOverflowError, TinyVLM, build_model, init_student_from_teacher, make_batch
from .persist import (
    Checkpoint,
    IncompleteCheckpointError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_INCOMPLETE = 4


def _log(msg: str) -> None:
    print(msg, flush=True)


def _load_cfg(path: str) -> RunConfig:
    cfg = load_config(path)
    _log("resolved config:")
    for line in cfg.resolved_text().splitlines():
        _log(f"  {line}")
    return cfg


def _data_path(cfg: RunConfig, split: str) -> Path:
    return cfg.workdir / "data" / f"{split}.jsonl"


def _read_split(cfg: RunConfig, split: str):
    path = _data_path(cfg, split)
    if not path.exists():
        raise IncompleteCheckpointError(f"missing dataset {path}; run gen-data first")
    return read_jsonl(path)


def _load_model(path: str) -> TinyVLM:
    return model_from_checkpoint(load_checkpoint(path))


def cmd_gen_data(cfg: RunConfig, args) -> int:
    for split in ("train", "val", "test"):
        spec = cfg.corpus_spec(split)
        samples = gen_corpus(spec)
        path = _data_path(cfg, split)
        write_jsonl(samples, path)
        _log(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    train = _read_split(cfg, "train")
    teacher = build_model(cfg.model, role="teacher", seed=cfg.stage_seed("teacher_init"))
    curve = []
    phase1 = cfg.teacher_train_config(1)
    if phase1.steps > 0:
        gen_only = [s for s in train if s.is_generation_task]
        _log(f"phase 1: {phase1.steps} steps on {len(gen_only)} transcription samples")
        curve += T.train_teacher(teacher, gen_only, phase1)
    phase2 = cfg.teacher_train_config(2)
    if phase2.steps > 0:
        _log(f"phase 2: {phase2.steps} steps on the full mix ({len(train)} samples)")
        offset = len(curve)
        rows = T.train_teacher(teacher, train, phase2)
        curve += [T.CurveRow(offset + r.step, r.total, r.kl, r.ce) for r in rows]
    out = cfg.workdir / "teacher" / "final"
    save_checkpoint(teacher, out, step=len(curve), parent_run_id=f"teacher-seed{cfg.seed}")
    T.write_curve_csv(cfg.workdir / "teacher" / "loss.csv", curve)
    _log(f"teacher checkpoint at {out}")
    return EXIT_OK


def cmd_realign(cfg: RunConfig, args) -> int:
    train = _read_split(cfg, "train")
    teacher = _load_model(args.teacher)
    if teacher.role != "teacher":
        raise ConfigError(f"--teacher checkpoint has role {teacher.role}")
    student = init_student_from_teacher(teacher, cfg.compression,
                                        seed=cfg.stage_seed("student_init"))
    dcfg = cfg.distill_config()
    _log(f"realign: {dcfg.steps} steps, compression {cfg.compression.kind} r={cfg.compression.ratio}")
    curve = D.realign(teacher, student, train, dcfg)
    out = cfg.workdir / "student_realign" / "final"
    save_checkpoint(student, out, step=dcfg.steps, parent_run_id=f"realign-seed{cfg.seed}")
    T.write_curve_csv(cfg.workdir / "student_realign" / "loss.csv", curve)
    _log(f"realigned student at {out}")
    return EXIT_OK


def cmd_posttrain(cfg: RunConfig, args) -> int:
    train = _read_split(cfg, "train")
    student = _load_model(args.student)
    if student.role != "student":
        raise ConfigError(f"--student checkpoint has role {student.role}")
    teacher_dir = args.teacher or str(cfg.workdir / "teacher" / "final")
    teacher = _load_model(teacher_dir)
    p = cfg.posttrain

    rs_samples, rs_stats = PT.build_rs_dataset(
        teacher, train, k=p["rs_k"], temperature=p["rs_temperature"],
        rs_mix_ratio=p["rs_mix_ratio"], seed=cfg.stage_seed("rs"),
    )
    _log(f"rejection sampling: {rs_stats}")
    mixed = train + rs_samples
    out_dir = cfg.workdir / "posttrain"
    write_jsonl(rs_samples, out_dir / "rs_augmented.jsonl")

    coarse_cfg = T.TrainConfig(steps=p["coarse_steps"], lr=p["lr"],
                               batch_size=p["batch_size"],
                               seed=cfg.stage_seed("coarse"))
    stats = PT.coarse_profile(student, mixed, p["coarse_fraction"],
                              train_cfg=coarse_cfg, seed=cfg.stage_seed("coarse"))
    weights = PT.resample_weights(stats, cfg.sampling_policy())
    _log("task weights: " + " ".join(f"{t}={w:.4f}" for t, w in sorted(weights.items())))
    with open(out_dir / "task_weights.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "weights": weights,
                "stats": [
                    {
                        "task_tag": s.task_tag, "mean_loss": round(s.mean_loss, 6),
                        "sample_count": s.sample_count,
                        "is_generation_task": s.is_generation_task,
                        "weight": round(s.weight, 6), "flag": s.flag,
                    }
                    for s in stats
                ],
            },
            f, sort_keys=True, indent=1,
        )
        f.write("\n")

    paths, curve = PT.sft_train(
        student, mixed, weights, cfg.sft_train_config(), epochs=p["epochs"],
        n_checkpoints=p["n_checkpoints"], out_dir=out_dir,
        parent_run_id=f"posttrain-seed{cfg.seed}",
    )
    T.write_curve_csv(out_dir / "loss.csv", curve)
    for path in paths:
        _log(f"checkpoint: {path}")
    return EXIT_OK


def _merge_eval_fn(cfg: RunConfig):
    val = _read_split(cfg, "val")
    rng = np.random.Generator(np.random.PCG64(cfg.stage_seed("merge_eval")))
    k = min(cfg.merge["eval_samples"], len(val))
    subset = [val[i] for i in rng.permutation(len(val))[:k]]
    calls = {"n": 0}

    def f(cp: Checkpoint) -> float:
        calls["n"] += 1
        model = model_from_checkpoint(cp)
        return E.seq_accuracy(model, subset)

    return f, calls


def cmd_merge(cfg: RunConfig, args) -> int:
    base = load_checkpoint(args.base)
    cpts = [load_checkpoint(d) for d in args.cpts]
    f, calls = _merge_eval_fn(cfg)
    scheme = args.scheme
    out_dir = cfg.workdir / "merge"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = {}
    if scheme == "shapley":
        result = M.evaluate_merge_schemes(base, cpts, f,
                                          ta_scale=cfg.merge["ta_scale"],
                                          shapley_scale=cfg.merge["scale"])
        rows = result["scores"]
        weights = result["shapley"]
        _log(f"coalition evaluations: {len(weights.coalition_values)}")
        _log("shapley phi: " + " ".join(f"{i}={weights.phi[i]:.5f}" for i in sorted(weights.phi)))
        alpha = [weights.alpha[i] for i in range(len(cpts))]
        merged = M.merge_eq4(base, cpts, alpha)
        with open(out_dir / "shapley.json", "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "phi": {str(i): weights.phi[i] for i in weights.phi},
                    "alpha": {str(i): weights.alpha[i] for i in weights.alpha},
                    "coalition_values": {
                        ",".join(map(str, sorted(s))): v
                        for s, v in weights.coalition_values.items()
                    },
                },
                fh, sort_keys=True, indent=1,
            )
            fh.write("\n")
    else:
        if scheme == "none":
            merged = Checkpoint(manifest=dict(base.manifest), tensors=dict(base.tensors))
        elif scheme == "avg":
            merged = M.simple_average(base, cpts)
        elif scheme == "task-arith":
            merged = M.task_arithmetic(base, cpts, cfg.merge["ta_scale"])
        else:
            raise ConfigError(f"unknown merge scheme: {scheme}")
        rows = {
            "none": float(f(base)),
            "simple": float(f(M.simple_average(base, cpts))),
            "task_arith": float(f(M.task_arithmetic(base, cpts, cfg.merge["ta_scale"]))),
        }
    out = out_dir / f"merged_{scheme.replace('-', '_')}"
    save_checkpoint(merged, out, parent_run_id=f"merge-{scheme}-seed{cfg.seed}")
    with open(out_dir / "merge_table.csv", "w", encoding="utf-8") as fh:
        fh.write("scheme,score\n")
        for name in ("none", "simple", "task_arith", "shapley"):
            if name in rows:
                fh.write(f"{name},{rows[name]:.6f}\n")
    _log(f"eval calls: {calls['n']}")
    for name, score in rows.items():
        _log(f"score[{name}] = {score:.6f}")
    _log(f"merged checkpoint at {out}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    test = _read_split(cfg, "test")
    model = _load_model(args.model)
    if model.role != "teacher":
        raise ConfigError("bench expects an uncompressed teacher checkpoint")
    rng = np.random.Generator(np.random.PCG64(cfg.stage_seed("bench")))
    k = min(cfg.bench["n_samples"], len(test))
    subset = [test[i] for i in rng.permutation(len(test))[:k]]
    rows = []
    reports = {}
    base_ms = None
    mc = model.config
    for r in (1, 2, 4):
        if r == 1:
            variant = model
        else:
            variant = init_student_from_teacher(
                model, CompressionSpec("conv1d", r), seed=cfg.stage_seed("bench") + r
            )
        ms = cx.measure_latency(variant, subset, repeats=cfg.bench["repeats"],
                                warmup=cfg.bench["warmup"])
        base_ms = ms if r == 1 else base_ms
        rows.append(cx.LatencyRow(
            model_tag=f"toy-{mc.d_llm}d-{mc.n_layers}L",
            ratio=r, compress_label=cx.ratio_label(r),
            mean_ms=ms, delta=base_ms / ms if r > 1 else 1.0,
        ))
        reports[r] = cx.analytic_cost(mc.n_layers, mc.n_visual, mc.d_llm, r,
                                      text_tokens=mc.max_seq - mc.n_visual)
        _log(f"r={r} ({cx.ratio_label(r)}): {ms:.3f} ms/sample, delta {rows[-1].delta:.2f}x")
    cx.write_latency_table(cfg.workdir / "bench" / "latency.csv", rows, reports)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    test = _read_split(cfg, "test")
    model = _load_model(args.model)
    if args.prune_keep is not None:
        model = E.prune_topk_baseline(model, args.prune_keep)
    metrics = E.evaluate(model, test)
    out = cfg.workdir / "eval" / (args.out_name or "metrics.json")
    E.write_metrics_json(out, metrics)
    _log(json.dumps(metrics, sort_keys=True))
    _log(f"metrics at {out}")
    return EXIT_OK


def cmd_attn_viz(cfg: RunConfig, args) -> int:
    test = _read_split(cfg, "test")
    if not 0 <= args.sample < len(test):
        raise ConfigError(f"--sample must be in [0, {len(test)})")
    model = _load_model(args.model)
    heat = E.attention_map(model, test[args.sample], layer=args.layer)
    stem = cfg.workdir / "attn" / f"sample_{args.sample}"
    E.write_pgm(stem.with_suffix(".pgm"), heat)
    E.write_heat_csv(stem.with_suffix(".csv"), heat)
    _log(f"heatmap at {stem.with_suffix('.pgm')} / .csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtcomp",
        description="visual-token compression pipeline: distill, post-train, merge, measure",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("config", help="INI run configuration")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train-teacher", cmd_train_teacher)
    p = add("realign", cmd_realign)
    p.add_argument("--teacher", required=True, help="teacher checkpoint dir")
    p = add("posttrain", cmd_posttrain)
    p.add_argument("--student", required=True, help="realigned student checkpoint dir")
    p.add_argument("--teacher", default=None, help="teacher dir (default: workdir/teacher/final)")
    p = add("merge", cmd_merge)
    p.add_argument("--base", required=True)
    p.add_argument("--cpts", nargs="+", required=True)
    p.add_argument("--scheme", choices=("none", "avg", "task-arith", "shapley"),
                   default="shapley")
    p = add("bench", cmd_bench)
    p.add_argument("--model", required=True)
    p = add("eval", cmd_eval)
    p.add_argument("--model", required=True)
    p.add_argument("--prune-keep", type=float, default=None,
                   help="evaluate the attention-rank pruning baseline at this keep fraction")
    p.add_argument("--out-name", default=None)
    p = add("attn-viz", cmd_attn_viz)
    p.add_argument("--model", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--layer", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_cfg(args.config)
        return args.fn(cfg, args)
    except (ConfigError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IncompleteCheckpointError, FileNotFoundError) as e:
        print(f"error: incomplete-input: {e}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (T.TrainingDivergedError, ContextOverflowError, RuntimeError) as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
