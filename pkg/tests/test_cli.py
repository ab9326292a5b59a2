import json
import subprocess
import sys

import numpy as np
import pytest

from interlace import model as M
from interlace.cli import main
from interlace.planner import PruningPlan
from interlace.similarity import SimilarityReport

TASK = dict(num_train=400, num_eval=40, seq_len=4, prefix_len=3, feat_dim=8, num_buckets=4,
            num_queries=8, vocab_size=32, seed=1, finetune_fraction=0.1)
MODEL = dict(num_layers=4, hidden_dim=16, num_heads=2, ffn_dim=24, seed=0)


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--spec", write(d / "spec.json", TASK), "--out", d / "data") == 0
    cfg = write(d / "pre.json", {"data": "data", "model": MODEL,
                                 "train": {"lr_peak": 3e-3, "batch_size": 32, "grad_accum": 1}})
    assert run("pretrain", "--config", cfg, "--out", d / "dense.ckpt") == 0
    assert run("calibrate", "--model", d / "dense.ckpt", "--data", d / "data", "--out", d / "report.json") == 0
    assert run("plan", "--report", d / "report.json", "--ratio", 0.25, "--strategy", "interlace",
               "--out", d / "plan.json", "--csv", d / "plan.csv") == 0
    assert run("prune", "--model", d / "dense.ckpt", "--plan", d / "plan.json", "--out", d / "pruned.ckpt") == 0
    ft = write(d / "ft.json", {"lr_peak": 1e-3})
    assert run("finetune", "--model", d / "pruned.ckpt", "--plan", d / "plan.json", "--data", d / "data",
               "--config", ft, "--out", d / "ft.ckpt") == 0
    assert run("eval", "--model", d / "ft.ckpt", "--data", d / "data", "--out", d / "eval.json") == 0
    return d


def test_pipeline_artifacts_validate(pipeline):
    d = pipeline
    assert M.load(d / "dense.ckpt").num_layers == 4
    rep = SimilarityReport.load(d / "report.json")
    plan = PruningPlan.load(d / "plan.json")
    assert plan.k == 1 and plan.report_fingerprint == rep.fingerprint()
    assert M.load(d / "pruned.ckpt").num_layers == 3
    assert M.load(d / "ft.ckpt").num_layers == 3
    surgery = json.loads((d / "ft.ckpt.surgery.json").read_text())
    assert sum(surgery["mask"]) == 1
    ev = json.loads((d / "eval.json").read_text())
    assert 0.0 <= ev["accuracy"] <= 1.0 and ev["samples"] == 40
    assert (d / "dense.ckpt.log.jsonl").read_text().count("\n") > 0


def test_rerun_is_byte_identical(pipeline, tmp_path):
    d = pipeline
    assert run("calibrate", "--model", d / "dense.ckpt", "--data", d / "data", "--out", tmp_path / "r.json") == 0
    assert (tmp_path / "r.json").read_bytes() == (d / "report.json").read_bytes()
    assert run("finetune", "--model", d / "pruned.ckpt", "--plan", d / "plan.json", "--data", d / "data",
               "--config", d / "ft.json", "--out", tmp_path / "ft.ckpt") == 0
    assert (tmp_path / "ft.ckpt").read_bytes() == (d / "ft.ckpt").read_bytes()
    # fine-tuning straight from the dense checkpoint prunes on the fly and lands on the same weights
    assert run("finetune", "--model", d / "dense.ckpt", "--plan", d / "plan.json", "--data", d / "data",
               "--config", d / "ft.json", "--out", tmp_path / "ft2.ckpt") == 0
    assert (tmp_path / "ft2.ckpt").read_bytes() == (d / "ft.ckpt").read_bytes()


def test_plan_k_on_36_layers(tmp_path):
    layer = np.sin(np.linspace(0.2, 3.0, 36)).tolist()
    SimilarityReport(36, layer, [layer[i] + layer[i + 2] for i in range(34)], 1, "x").save(tmp_path / "r.json")
    assert run("plan", "--report", tmp_path / "r.json", "--ratio", 0.25, "--strategy", "interlace",
               "--out", tmp_path / "p.json") == 0
    assert json.loads((tmp_path / "p.json").read_text())["k"] == 9


def test_random_without_seed_is_usage_error(tmp_path, capsys):
    SimilarityReport(8, [0.5] * 8, [0.5] * 6, 1, "x").save(tmp_path / "r.json")
    code = run("plan", "--report", tmp_path / "r.json", "--ratio", 0.25, "--strategy", "random",
               "--out", tmp_path / "p.json")
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "UsageError"
    assert run("plan", "--report", tmp_path / "r.json", "--ratio", 0.25, "--strategy", "random",
               "--seed", 3, "--out", tmp_path / "p.json") == 0


def test_usage_and_runtime_exit_codes(tmp_path, capsys):
    assert run("plan", "--ratio", 0.25) == 2
    assert run("nonsense") == 2
    SimilarityReport(8, [0.5] * 8, [0.5] * 6, 1, "x").save(tmp_path / "r.json")
    assert run("plan", "--report", tmp_path / "r.json", "--ratio", 0.05, "--strategy", "interlace",
               "--out", tmp_path / "p.json") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "InvalidRatio"
    assert run("eval", "--model", tmp_path / "missing.ckpt", "--data", tmp_path, "--out", tmp_path / "e.json") == 1


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "interlace.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen", "pretrain", "calibrate", "plan", "prune", "finetune", "eval", "bench", "ablate", "report"):
        assert cmd in out.stdout


def test_ablate_and_report(tmp_path, monkeypatch):
    exp = {
        "task": TASK,
        "model": MODEL,
        "pretrain": {"lr_peak": 3e-3, "batch_size": 32, "grad_accum": 1},
        "finetune": {"lr_peak": 1e-3},
        "strategies": ["interlace", "random", "dense_ft"],
        "ratios": [0.25],
        "seeds": [0, 1],
        "out_dir": "grid",
    }
    monkeypatch.setenv("INTERLACE_OUT", str(tmp_path / "root"))
    cfg = write(tmp_path / "exp.json", exp)
    assert run("ablate", "--config", cfg) == 0
    grid = tmp_path / "root" / "grid"
    lines = (grid / "combined.csv").read_text().splitlines()
    assert lines[0] == "strategy,ratio,accuracy,relative_performance,ttft_speedup"
    assert any(l.startswith("dense_ft,") for l in lines)
    cells = sorted((grid / "cells").glob("*.json"))
    assert len(cells) == 6
    stamp = [c.stat().st_mtime_ns for c in cells]
    assert run("ablate", "--config", cfg) == 0  # resumes: nothing recomputed
    assert [c.stat().st_mtime_ns for c in cells] == stamp
    assert run("report", "--in", grid, "--out", tmp_path / "tables") == 0
    names = {p.name for p in (tmp_path / "tables").iterdir()}
    assert {"combined.csv", "similarity_profile.csv", "main_results.csv", "ttft.csv", "ablation_0.25.csv"} <= names
    prof = (tmp_path / "tables" / "similarity_profile.csv").read_text().splitlines()
    assert len(prof) == 1 + 2 * 4
