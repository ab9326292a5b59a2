"""Accuracy evaluation, relative performance and TTFT prefill timing."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ClockResolutionTooCoarse, ZeroBaseline
from .model import fingerprint
from .trainer import token_nll

PAPER_TTFT_SPEEDUP_25 = 1.18


@dataclass
class EvalReport:
    accuracy: float
    mean_loss: float
    samples: int
    answers: int
    model_fingerprint: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


@dataclass
class BenchReport:
    seq_len: int
    trials: int
    warmup: int
    latencies: list
    median: float
    mean: float
    speedup: float | None = None
    reference_median: float | None = None
    reference_latencies: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@torch.no_grad()
def evaluate(model, data, batch_size: int = 256) -> EvalReport:
    """Greedy argmax accuracy over answer positions and mean loss over
    loss-mask positions. ``model`` is any callable ``(prefix, tokens) -> logits``."""
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    correct = answers = loss_tokens = 0
    loss_total = 0.0
    for start in range(0, len(data), batch_size):
        b = data.batch(np.arange(start, min(start + batch_size, len(data))))
        logits = model(b["prefix"], b["tokens"])
        logits = logits[:, logits.shape[1] - b["tokens"].shape[1]:]
        pred = logits.argmax(-1)
        hit = (pred == b["targets"]) & b["answer_mask"]
        correct += int(hit.sum())
        answers += int(b["answer_mask"].sum())
        nll, count = token_nll(logits.to(torch.float64), b["targets"], b["loss_mask"])
        loss_total += float(nll)
        loss_tokens += count
    fp = fingerprint(model) if isinstance(model, nn.Module) else type(model).__name__
    return EvalReport(
        accuracy=correct / answers,
        mean_loss=loss_total / loss_tokens,
        samples=len(data),
        answers=answers,
        model_fingerprint=fp,
    )


def relative_performance(pruned, baseline) -> float:
    """``100 * pruned / baseline`` accuracy, in percent."""
    p = pruned.accuracy if hasattr(pruned, "accuracy") else float(pruned)
    b = baseline.accuracy if hasattr(baseline, "accuracy") else float(baseline)
    if b <= 0:
        raise ZeroBaseline("baseline accuracy is zero")
    return 100.0 * p / b


def _prefill_inputs(model, seq_len: int, seed: int = 0):
    cfg = model.config
    if seq_len > cfg.max_seq:
        raise ValueError(f"seq_len {seq_len} exceeds max_seq {cfg.max_seq}")
    n_v = min(cfg.prefix_len, seq_len - 1)
    gen = torch.Generator().manual_seed(seed)
    prefix = torch.randn(1, n_v, cfg.feat_dim, generator=gen, dtype=torch.float64)
    tokens = torch.randint(0, cfg.vocab_size, (1, seq_len - n_v), generator=gen)
    return prefix, tokens


@torch.no_grad()
def _time_prefill(model, prefix, tokens) -> float:
    t0 = time.perf_counter()
    logits = model(prefix, tokens)
    logits[0, -1].argmax()
    return time.perf_counter() - t0


def _check_resolution(latencies) -> None:
    res = time.get_clock_info("perf_counter").resolution
    if min(latencies) < 100 * res:
        raise ClockResolutionTooCoarse(
            f"fastest trial {min(latencies):.3g}s is under 100x the timer resolution {res:.3g}s"
        )


def ttft_bench(model, seq_len: int, trials: int = 10, warmup: int = 5, reference=None,
               seed: int = 0) -> BenchReport:
    """Median single-prefill latency, optionally against a reference model.

    With a reference, subject and reference trials alternate so that slow
    drifts of the machine hit both equally; speedup is reference median over
    subject median. Warmup trials are discarded.
    """
    if trials < 10:
        raise ValueError("at least 10 timed trials are required")
    torch.set_num_threads(1)
    prefix, tokens = _prefill_inputs(model, seq_len, seed)
    if reference is not None:
        ref_prefix, ref_tokens = _prefill_inputs(reference, seq_len, seed)
    subject, ref = [], []
    for i in range(warmup + trials):
        a = _time_prefill(model, prefix, tokens)
        b = _time_prefill(reference, ref_prefix, ref_tokens) if reference is not None else None
        if i >= warmup:
            subject.append(a)
            if b is not None:
                ref.append(b)
    _check_resolution(subject + ref)
    report = BenchReport(
        seq_len=seq_len,
        trials=trials,
        warmup=warmup,
        latencies=subject,
        median=statistics.median(subject),
        mean=statistics.fmean(subject),
    )
    if reference is not None:
        report.reference_latencies = ref
        report.reference_median = statistics.median(ref)
        report.speedup = report.reference_median / report.median
    return report


# ------------------------------------------------------------------ tables

COMBINED_COLUMNS = ["strategy", "ratio", "accuracy", "relative_performance", "ttft_speedup"]


def combined_rows(cells: list[dict]) -> list[dict]:
    """Average per-seed cells into one row per (strategy, ratio)."""
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c["strategy"], c["ratio"]), []).append(c)
    rows = []
    for (strategy, ratio), cs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        speedups = [c["ttft_speedup"] for c in cs if c.get("ttft_speedup") not in (None, "")]
        rows.append({
            "strategy": strategy,
            "ratio": ratio,
            "accuracy": statistics.fmean(c["accuracy"] for c in cs),
            "relative_performance": statistics.fmean(c["relative_performance"] for c in cs),
            "ttft_speedup": statistics.fmean(speedups) if speedups else "",
        })
    return rows


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def ablation_table(rows: list[dict], reference: str = "interlace", groups=("overall",)) -> list[dict]:
    """Strategy x task-group grid of relative performance against ``reference``.

    ``rows`` hold ``strategy`` plus one accuracy column per group; the
    reference strategy is 100 in every column, and ``avg`` is the mean of
    the group columns.
    """
    ref = next(r for r in rows if r["strategy"] == reference)
    table = []
    for r in rows:
        entry = {"method": r["strategy"]}
        for g in groups:
            entry[g] = relative_performance(r[g], ref[g])
        entry["avg"] = statistics.fmean(entry[g] for g in groups)
        table.append(entry)
    return table
