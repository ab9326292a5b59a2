"""Command-line driver for the pruning pipeline.

Every subcommand reads and writes plain files, so the stages can be chained
from a shell script. Exit status is 0 on success, 1 on a runtime failure and
2 on a usage error; failures print a one-line JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import model as model_mod
from .bench import COMBINED_COLUMNS, PAPER_TTFT_SPEEDUP_25, ablation_table, combined_rows, evaluate, ttft_bench, write_csv
from .errors import InterlaceError
from .experiment import ExperimentConfig, model_config_for, run_grid
from .planner import STRATEGIES, PruningPlan, make_plan
from .similarity import SimilarityReport, score
from .surgery import SurgeryRecord, apply_plan
from .taskgen import TaskSpec, generate, load_spec, load_splits, save_splits
from .trainer import TrainConfig, finetune, pretrain


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def out_root() -> Path:
    return Path(os.environ.get("INTERLACE_OUT", "interlace_out"))


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(path, **meta) -> None:
    """Run metadata (timings) kept apart from the reproducible output."""
    _write_json(str(path) + ".meta.json", meta)


def _train_config(d: dict) -> TrainConfig:
    return TrainConfig.from_dict(d.get("train", d))


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    spec = TaskSpec.from_dict(_read_json(args.spec))
    save_splits(generate(spec), spec, args.out)


def cmd_pretrain(args):
    cfg = _read_json(args.config)
    data_dir = Path(cfg["data"])
    if not data_dir.is_absolute():
        data_dir = Path(args.config).parent / data_dir
    spec = load_spec(data_dir)
    train = load_splits(data_dir, names=("train",))["train"]
    mcfg = model_config_for(spec, cfg.get("model", {}))
    net = model_mod.init(mcfg)
    _, log = pretrain(net, train, _train_config(cfg))
    model_mod.save(net, args.out)
    log.save(str(args.out) + ".log.jsonl", str(args.out) + ".summary.json")
    _sidecar(args.out, wall_clock=log.wall_clock)


def cmd_calibrate(args):
    net = model_mod.load(args.model)
    calib = load_splits(args.data, names=("calib",))["calib"]
    score(net, calib).save(args.out)


def cmd_plan(args):
    if args.strategy == "random" and args.seed is None:
        raise UsageError("plan: --strategy random requires --seed")
    report = SimilarityReport.load(args.report)
    plan = make_plan(args.strategy, args.ratio, report=report, seed=args.seed)
    plan.save(args.out)
    if args.csv:
        plan.to_csv(args.csv, report)


def _prune(net, plan):
    if net.num_layers == plan.num_layers:
        return apply_plan(net, plan)
    # already pruned: rebuild the record from the plan
    survivors = [l for l in range(1, plan.num_layers + 1) if l not in plan.drop]
    if len(survivors) != net.num_layers:
        return apply_plan(net, plan)  # raises PlanModelMismatch
    record = SurgeryRecord({old: new for new, old in enumerate(survivors, 1)}, plan.drop,
                           [old in plan.tune for old in survivors], plan.strategy)
    return net, record


def cmd_prune(args):
    plan = PruningPlan.load(args.plan)
    pruned, record = _prune(model_mod.load(args.model), plan)
    model_mod.save(pruned, args.out)
    record.save(str(args.out) + ".surgery.json")


def cmd_finetune(args):
    plan = PruningPlan.load(args.plan)
    net, record = _prune(model_mod.load(args.model), plan)
    data = load_splits(args.data, names=("finetune",))["finetune"]
    _, log = finetune(net, record, data, _train_config(_read_json(args.config)))
    model_mod.save(net, args.out)
    record.save(str(args.out) + ".surgery.json")
    log.save(str(args.out) + ".log.jsonl", str(args.out) + ".summary.json")
    _sidecar(args.out, wall_clock=log.wall_clock)


def cmd_eval(args):
    net = model_mod.load(args.model)
    data = load_splits(args.data, names=(args.split,))[args.split]
    rep = evaluate(net, data)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rep.to_json())


def cmd_bench(args):
    net = model_mod.load(args.model)
    ref = model_mod.load(args.ref) if args.ref else None
    rep = ttft_bench(net, args.seq_len, trials=args.trials, warmup=args.warmup, reference=ref)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rep.to_json())


def cmd_ablate(args):
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out) if args.out else out_root() / cfg.out_dir
    t0 = time.perf_counter()

    def progress(cell):
        print(f"seed {cell['seed']} ratio {cell['ratio']} {cell['strategy']}: "
              f"rel perf {cell['relative_performance']:.1f}", flush=True)

    cells = run_grid(cfg, out, resume=not args.no_resume, progress=progress)
    write_csv(out / "combined.csv", combined_rows(cells), COMBINED_COLUMNS)
    _write_json(out / "config.json", cfg.to_dict())
    _sidecar(out / "combined.csv", wall_clock=time.perf_counter() - t0)


def cmd_report(args):
    src = Path(args.inp) if args.inp else out_root()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = [json.loads(p.read_text()) for p in sorted((src / "cells").glob("*.json"))]
    if not cells:
        raise InterlaceError(f"no grid cells under {src / 'cells'}")
    rows = combined_rows(cells)
    write_csv(out / "combined.csv", rows, COMBINED_COLUMNS)

    # layer-wise similarity profiles, one block per seed
    profile = []
    for p in sorted((src / "reports").glob("similarity-seed*.json")):
        rep = SimilarityReport.load(p)
        seed = int(p.stem.split("seed")[-1])
        for l in range(1, rep.num_layers + 1):
            profile.append({"seed": seed, "layer_index": l, "s_layer": rep.s_layer(l),
                            "s_triplet": rep.s_triplet(l) if l <= rep.num_layers - 2 else ""})
    write_csv(out / "similarity_profile.csv", profile, ["seed", "layer_index", "s_layer", "s_triplet"])

    # main results: one row per strategy and ratio with per-seed spread
    main = []
    for r in rows:
        per_seed = [c["relative_performance"] for c in cells
                    if c["strategy"] == r["strategy"] and c["ratio"] == r["ratio"]]
        main.append({**r, "seeds": len(per_seed), "min_relative_performance": min(per_seed),
                     "max_relative_performance": max(per_seed)})
    write_csv(out / "main_results.csv", main,
              ["strategy", "ratio", "seeds", "accuracy", "relative_performance",
               "min_relative_performance", "max_relative_performance"])

    # latency, with the published reference point as a non-binding comparison line
    ttft = [{"strategy": r["strategy"], "ratio": r["ratio"], "ttft_speedup": r["ttft_speedup"]} for r in rows]
    ttft.append({"strategy": "published_reference", "ratio": 0.25, "ttft_speedup": PAPER_TTFT_SPEEDUP_25})
    write_csv(out / "ttft.csv", ttft, ["strategy", "ratio", "ttft_speedup"])

    # ablation grid relative to interlace, one file per ratio
    for ratio in sorted({r["ratio"] for r in rows}):
        at = [{"strategy": r["strategy"], "overall": r["accuracy"]} for r in rows if r["ratio"] == ratio]
        if any(r["strategy"] == "interlace" for r in at):
            write_csv(out / f"ablation_{ratio}.csv", ablation_table(at), ["method", "overall", "avg"])


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="interlace", description="Layer pruning with drop/tune/freeze triplets.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="generate the synthetic task splits")
    s.add_argument("--spec", required=True, help="task spec JSON")
    s.add_argument("--out", required=True, help="output directory for the JSON-lines splits")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("pretrain", help="train a dense model on the train split")
    s.add_argument("--config", required=True,
                   help='JSON with "data" (split directory), "model" and "train" sections')
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("calibrate", help="score layer and triplet similarity")
    s.add_argument("--model", required=True, help="dense checkpoint")
    s.add_argument("--data", required=True, help="split directory holding calib.jsonl")
    s.add_argument("--out", required=True, help="similarity report JSON")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("plan", help="choose layers to drop, tune and freeze")
    s.add_argument("--report", required=True, help="similarity report JSON")
    s.add_argument("--ratio", required=True, type=float, help="fraction of layers to drop")
    s.add_argument("--strategy", required=True, choices=STRATEGIES)
    s.add_argument("--seed", type=int, help="required for --strategy random")
    s.add_argument("--out", required=True, help="plan JSON")
    s.add_argument("--csv", help="optional per-layer assignment CSV")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("prune", help="remove the dropped layers")
    s.add_argument("--model", required=True, help="dense checkpoint")
    s.add_argument("--plan", required=True, help="plan JSON")
    s.add_argument("--out", required=True, help="pruned checkpoint; the surgery record goes next to it")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("finetune", help="recovery fine-tuning of the tuned layers")
    s.add_argument("--model", required=True, help="pruned (or dense, pruned on the fly) checkpoint")
    s.add_argument("--plan", required=True, help="plan JSON")
    s.add_argument("--data", required=True, help="split directory holding finetune.jsonl")
    s.add_argument("--config", required=True, help="train config JSON")
    s.add_argument("--out", required=True, help="fine-tuned checkpoint")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="answer accuracy on a split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="split directory")
    s.add_argument("--split", default="eval", help="split name (default: eval)")
    s.add_argument("--out", required=True, help="eval report JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="prefill latency (time to first token)")
    s.add_argument("--model", required=True)
    s.add_argument("--ref", help="reference checkpoint for the speedup ratio")
    s.add_argument("--seq-len", required=True, type=int)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--out", required=True, help="bench report JSON")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", help="run the strategy x ratio x seed grid")
    s.add_argument("--config", required=True, help="experiment config JSON")
    s.add_argument("--out", help="output directory (default: $INTERLACE_OUT/<out_dir>)")
    s.add_argument("--no-resume", action="store_true", help="recompute finished cells")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="summary tables from an ablate directory")
    s.add_argument("--in", dest="inp", help="ablate output directory (default: $INTERLACE_OUT)")
    s.add_argument("--out", required=True, help="directory for the CSV tables")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (InterlaceError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
