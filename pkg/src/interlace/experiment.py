"""End-to-end pipeline: pretrain, calibrate, plan, prune, fine-tune, evaluate.

A grid *cell* is one (strategy, ratio, seed) triple. For each seed a fresh
task and dense model are generated and pretrained; every strategy of that
seed shares the same dense model and similarity report.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from . import model as model_mod
from .bench import evaluate, relative_performance, ttft_bench
from .model import ModelConfig, TransformerModel
from .planner import STRATEGIES, make_plan
from .similarity import score
from .surgery import apply_plan
from .taskgen import TaskSpec, generate
from .trainer import TrainConfig, finetune, pretrain


@dataclass
class ExperimentConfig:
    task: TaskSpec
    model: ModelConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    strategies: list = field(default_factory=lambda: ["interlace", "consecutive", "random",
                                                      "interlace_oa", "interlace_tn", "dense_ft"])
    ratios: list = field(default_factory=lambda: [0.25])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "interlace_out"
    bench: dict | None = None

    def __post_init__(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        for r in self.ratios:
            if not 0.0 < r < 1.0:
                raise ValueError(f"ratio {r} outside (0, 1)")

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "strategies": list(self.strategies),
            "ratios": list(self.ratios),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "bench": self.bench,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        task = TaskSpec.from_dict(d["task"])
        return cls(
            task=task,
            model=model_config_for(task, d["model"]),
            pretrain=TrainConfig.from_dict(d["pretrain"]),
            finetune=TrainConfig.from_dict(d["finetune"]),
            strategies=d.get("strategies", list(STRATEGIES)),
            ratios=d.get("ratios", [0.25]),
            seeds=d.get("seeds", [0, 1, 2, 3, 4]),
            out_dir=d.get("out_dir", "interlace_out"),
            bench=d.get("bench"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def for_seed(self, seed: int) -> tuple[TaskSpec, ModelConfig, TrainConfig, TrainConfig]:
        task = TaskSpec.from_dict({**self.task.to_dict(), "seed": self.task.seed + seed})
        mcfg = self.model.replace(seed=self.model.seed + seed)
        pre = TrainConfig.from_dict({**self.pretrain.to_dict(), "seed": self.pretrain.seed + seed})
        ft = TrainConfig.from_dict({**self.finetune.to_dict(), "seed": self.finetune.seed + seed})
        return task, mcfg, pre, ft


def model_config_for(task: TaskSpec, fields: dict) -> ModelConfig:
    """Model config whose input sizes default to those of ``task``."""
    base = {"vocab_size": task.vocab_size, "prefix_len": task.prefix_len, "feat_dim": task.feat_dim,
            "max_seq": task.prefix_len + task.seq_len}
    return ModelConfig.from_dict({**base, **fields})


def cell_key(cfg: ExperimentConfig, strategy: str, ratio: float, seed: int) -> str:
    """Fingerprint of everything that determines a cell's result."""
    skip = ("strategies", "ratios", "seeds", "out_dir")
    blob = json.dumps({"cfg": {k: v for k, v in cfg.to_dict().items() if k not in skip},
                       "strategy": strategy, "ratio": ratio, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def prepare_seed(cfg: ExperimentConfig, seed: int, cache_dir: Path | None = None):
    """Generate the task and pretrain (or reload) the dense model for ``seed``."""
    task, mcfg, pre, _ = cfg.for_seed(seed)
    splits = generate(task)
    ckpt = None
    if cache_dir is not None:
        key = hashlib.sha256(json.dumps([task.to_dict(), mcfg.to_dict(), pre.to_dict()], sort_keys=True).encode())
        ckpt = Path(cache_dir) / f"dense-{key.hexdigest()[:16]}.ckpt"
        if ckpt.exists():
            return splits, model_mod.load(ckpt)
    dense = TransformerModel(mcfg)
    pretrain(dense, splits["train"], pre)
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        model_mod.save(dense, ckpt)
    return splits, dense


def run_cell(dense, splits, report, strategy: str, ratio: float, seed: int, ft_cfg: TrainConfig,
             baseline=None, bench: dict | None = None) -> dict:
    """Plan, prune, fine-tune and evaluate one strategy on one dense model."""
    baseline = baseline if baseline is not None else evaluate(dense, splits["eval"])
    plan = make_plan(strategy, ratio, report=report, num_layers=dense.num_layers, seed=seed)
    pruned, record = apply_plan(dense, plan)
    before = evaluate(pruned, splits["eval"])
    pruned, log = finetune(pruned, record, splits["finetune"], ft_cfg)
    after = evaluate(pruned, splits["eval"])
    speedup = None
    if bench:
        seq_len = min(bench.get("seq_len", dense.config.max_seq), dense.config.max_seq)
        speedup = ttft_bench(pruned, seq_len, trials=bench.get("trials", 10), warmup=bench.get("warmup", 5),
                             reference=dense).speedup
    return {
        "strategy": strategy,
        "ratio": ratio,
        "seed": seed,
        "drop": sorted(plan.drop),
        "tune": sorted(plan.tune),
        "baseline_accuracy": baseline.accuracy,
        "pre_finetune_accuracy": before.accuracy,
        "accuracy": after.accuracy,
        "relative_performance": relative_performance(after, baseline),
        "final_loss": log.losses[-1],
        "ttft_speedup": speedup,
        "model_fingerprint": after.model_fingerprint,
    }


def run_grid(cfg: ExperimentConfig, out_dir=None, resume: bool = True, progress=None) -> list[dict]:
    """Run every (seed, ratio, strategy) cell; completed cells on disk are
    skipped by fingerprint."""
    out = Path(out_dir or cfg.out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in cfg.seeds:
        todo = []
        for ratio in cfg.ratios:
            for strategy in cfg.strategies:
                path = cells_dir / f"{strategy}-{ratio}-{seed}-{cell_key(cfg, strategy, ratio, seed)}.json"
                if resume and path.exists():
                    results.append(json.loads(path.read_text()))
                else:
                    todo.append((strategy, ratio, path))
        if not todo:
            continue
        splits, dense = prepare_seed(cfg, seed, cache_dir=out / "dense")
        _, _, _, ft = cfg.for_seed(seed)
        report = score(dense, splits["calib"])
        (out / "reports").mkdir(exist_ok=True)
        report.save(out / "reports" / f"similarity-seed{seed}.json")
        baseline = evaluate(dense, splits["eval"])
        for strategy, ratio, path in todo:
            cell = run_cell(dense, splits, report, strategy, ratio, seed, ft, baseline=baseline, bench=cfg.bench)
            path.write_text(json.dumps(cell, indent=2, sort_keys=True) + "\n")
            results.append(cell)
            if progress:
                progress(cell)
    order = {s: i for i, s in enumerate(cfg.strategies)}
    results.sort(key=lambda c: (c["seed"], c["ratio"], order.get(c["strategy"], 99)))
    return results


def mean_relative_performance(cells: list[dict], strategy: str, ratio: float) -> float:
    return statistics.fmean(c["relative_performance"] for c in cells
                            if c["strategy"] == strategy and c["ratio"] == ratio)
