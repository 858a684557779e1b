#!/usr/bin/env python3
"""Drive the full pipeline end to end through the CLI.

Usage:
    python scripts/run_pipeline.py configs/toy.ini [--skip-bench]

Stages: gen-data -> train-teacher -> realign -> posttrain -> merge ->
eval (teacher / realigned / post-trained / merged / pruned baseline) ->
bench -> attn-viz. Every artifact lands under the config's workdir.
"""

import argparse
import sys
import time
from pathlib import Path

from vtcomp.cli import main as vtcomp_main
from vtcomp.config import load_config


def run(args: list[str]) -> None:
    print(f"\n$ vtcomp {' '.join(args)}", flush=True)
    t0 = time.time()
    code = vtcomp_main(args)
    print(f"[{time.time() - t0:.1f}s] exit {code}", flush=True)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("config")
    parser.add_argument("--skip-bench", action="store_true")
    args = parser.parse_args()

    cfg = load_config(args.config)
    work = Path(cfg.workdir)
    teacher = work / "teacher" / "final"
    student = work / "student_realign" / "final"
    post = work / "posttrain"

    run(["gen-data", args.config])
    run(["train-teacher", args.config])
    run(["eval", args.config, "--model", str(teacher), "--out-name", "teacher.json"])
    run(["realign", args.config, "--teacher", str(teacher)])
    run(["eval", args.config, "--model", str(student), "--out-name", "student_realign.json"])
    run(["posttrain", args.config, "--student", str(student)])
    run(["eval", args.config, "--model", str(post / "final"), "--out-name", "student_posttrain.json"])
    cpts = [str(post / f"cpt_{k}") for k in range(1, cfg.posttrain["n_checkpoints"] + 1)]
    run(["merge", args.config, "--base", str(post / "final"), "--cpts", *cpts,
         "--scheme", "shapley"])
    run(["eval", args.config, "--model", str(work / "merge" / "merged_shapley"),
         "--out-name", "student_merged.json"])
    run(["eval", args.config, "--model", str(teacher), "--prune-keep", "0.5",
         "--out-name", "teacher_pruned50.json"])
    if not args.skip_bench:
        run(["bench", args.config, "--model", str(teacher)])
    run(["attn-viz", args.config, "--model", str(post / "final"), "--sample", "0"])
    print("\npipeline complete:", work)


if __name__ == "__main__":
    main()
