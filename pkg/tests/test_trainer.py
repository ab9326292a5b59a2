import math

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from interlace import model as M
from interlace.errors import AllMasked, NonFiniteLoss
from interlace.model import TransformerModel
from interlace.planner import plan_random
from interlace.surgery import apply_plan
from interlace.trainer import (
    TrainConfig,
    clip_grad_norm,
    finetune,
    lr_at,
    next_token_loss,
    pretrain,
    warmup_steps,
)


def test_uniform_logits_loss_is_log_vocab():
    loss = next_token_loss(torch.zeros(6, 50, dtype=torch.float64), np.arange(6), np.ones(6, bool))
    assert float(loss) == pytest.approx(math.log(50), abs=1e-12)


def test_confident_logits_loss_near_zero():
    targets = np.array([3, 1, 4])
    logits = torch.full((3, 7), -50.0, dtype=torch.float64)
    logits[np.arange(3), targets] = 50.0
    assert float(next_token_loss(logits, targets, np.ones(3, bool))) < 1e-40


def test_loss_matches_naive_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 7)) * 3
    targets = rng.integers(0, 7, 5)
    mask = np.array([True, False, True, True, False])
    terms = []
    for t in range(5):
        if mask[t]:
            z = math.fsum(math.exp(v) for v in logits[t])
            terms.append(-math.log(math.exp(logits[t, targets[t]]) / z))
    expected = math.fsum(terms) / len(terms)
    got = float(next_token_loss(torch.from_numpy(logits), targets, mask))
    assert abs(got - expected) <= 1e-12


def test_all_masked():
    with pytest.raises(AllMasked):
        next_token_loss(torch.zeros(3, 5, dtype=torch.float64), np.zeros(3, int), np.zeros(3, bool))


@pytest.mark.parametrize("total", [1, 10, 32, 33, 100, 3125])
def test_schedule_closed_form(total):
    cfg = TrainConfig(lr_peak=1e-5)
    w = math.ceil(0.03 * total)
    assert warmup_steps(total, 0.03) == w
    assert abs(lr_at(w, total, cfg) - 1e-5) <= 1e-15
    if total > w:
        assert lr_at(total, total, cfg) == 0.0
    for s in range(1, total + 1):
        lr = lr_at(s, total, cfg)
        assert 0.0 <= lr <= 1e-5 + 1e-20
        if s <= w:
            assert abs(lr - 1e-5 * s / w) <= 1e-20


def test_warmup_matches_exact_ceiling():
    from fractions import Fraction
    for total in range(0, 3000):
        assert warmup_steps(total, 0.03) == math.ceil(Fraction("0.03") * total)


def test_clip_grad_norm_exact():
    torch.manual_seed(0)
    params = [torch.zeros(3, 4, dtype=torch.float64, requires_grad=True) for _ in range(3)]
    for p in params:
        p.grad = torch.randn_like(p) * 5
    pre = clip_grad_norm(params, 1.0)
    assert pre > 1.0
    post = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in params))
    assert abs(post - 1.0) <= 1e-9
    # below the threshold nothing changes
    before = [p.grad.clone() for p in params]
    clip_grad_norm(params, 10.0)
    assert all(torch.equal(a, p.grad) for a, p in zip(before, params))


def _pruned(spec, seed=1):
    m = TransformerModel(tiny_model_config(spec, seed=seed))
    return apply_plan(m, plan_random(m.num_layers, 0.34, seed=seed))


def _snapshot(m):
    return {k: v.clone() for k, v in m.state_dict().items()}


def test_freeze_integrity(tiny_spec, tiny_splits):
    pruned, record = _pruned(tiny_spec)
    before = _snapshot(pruned)
    finetune(pruned, record, tiny_splits["finetune"], TrainConfig(lr_peak=1e-3))
    changed = {k for k, v in pruned.state_dict().items() if not torch.equal(v, before[k])}
    tuned = {i for i, t in enumerate(record.mask) if t}
    for k in before:
        is_tuned = k.startswith("layers.") and int(k.split(".")[1]) in tuned
        if not is_tuned:
            assert k not in changed, k
    assert changed, "tuned layers should move"


def test_accumulation_equivalence(tiny_spec, tiny_splits):
    data = tiny_splits["train"].subset(range(64))
    a, rec = _pruned(tiny_spec)
    b, _ = _pruned(tiny_spec)
    finetune(a, rec, data, TrainConfig(lr_peak=1e-3, batch_size=8, grad_accum=2))
    finetune(b, rec, data, TrainConfig(lr_peak=1e-3, batch_size=16, grad_accum=1))
    for k, v in a.state_dict().items():
        assert (v - b.state_dict()[k]).abs().max() <= 1e-10, k


def test_clipping_applied_inside_training(tiny_spec, tiny_splits, monkeypatch):
    seen = []
    real_step = torch.optim.AdamW.step

    def spy(self, *args, **kw):
        grads = [p.grad for g in self.param_groups for p in g["params"] if p.grad is not None]
        seen.append(math.sqrt(sum(float(g.pow(2).sum()) for g in grads)))
        return real_step(self, *args, **kw)

    monkeypatch.setattr(torch.optim.AdamW, "step", spy)
    pruned, record = _pruned(tiny_spec)
    _, log = finetune(pruned, record, tiny_splits["finetune"], TrainConfig(lr_peak=1e-3, grad_clip_norm=0.05))
    assert len(seen) == len(log.steps)
    clipped = 0
    for s, norm in zip(log.steps, seen):
        if s["grad_norm_preclip"] > 0.05:
            clipped += 1
            assert abs(norm - 0.05) <= 1e-9
        else:
            assert abs(norm - s["grad_norm_preclip"]) <= 1e-9
    assert clipped


def test_log_lr_trace_matches_schedule(tiny_spec, tiny_splits):
    pruned, record = _pruned(tiny_spec)
    cfg = TrainConfig(lr_peak=3e-4)
    data = tiny_splits["train"].subset(range(320))
    _, log = finetune(pruned, record, data, cfg)
    total = math.ceil(len(data) / cfg.effective_batch)
    assert len(log.steps) == total
    for s in log.steps:
        assert abs(s["lr"] - lr_at(s["step"], total, cfg)) <= 1e-12
    assert log.steps[-1]["lr"] == 0.0


def test_determinism_bitwise(tiny_spec, tiny_splits, tmp_path):
    paths = []
    for run in range(2):
        pruned, record = _pruned(tiny_spec)
        finetune(pruned, record, tiny_splits["finetune"], TrainConfig(lr_peak=1e-3, seed=4))
        paths.append(tmp_path / f"{run}.ckpt")
        M.save(pruned, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_non_finite_loss_reports_step(tiny_spec, tiny_splits):
    pruned, record = _pruned(tiny_spec)
    with torch.no_grad():
        pruned.lm_head.weight.fill_(float("inf"))
    with pytest.raises(NonFiniteLoss) as info:
        finetune(pruned, record, tiny_splits["finetune"], TrainConfig())
    assert info.value.step == 1


def test_pretraining_loss_falls(tiny_spec, tiny_splits):
    m = TransformerModel(tiny_model_config(tiny_spec))
    _, log = pretrain(m, tiny_splits["train"].subset(range(1024)),
                      TrainConfig(lr_peak=1e-3, batch_size=32, grad_accum=1))
    losses = log.losses
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    assert last < first
    assert all(not p.requires_grad for p in m.parameters())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip_norm=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})
    cfg = TrainConfig(lr_peak=2e-5, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
