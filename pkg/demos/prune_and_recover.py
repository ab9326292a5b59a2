"""
Prune 25% of a model and recover with a 1% fine-tuning set
==========================================================

The full loop on one seed: pretrain, calibrate on 10% of the fine-tuning
subset, plan with each strategy, cut the layers, fine-tune only the tuned
layers for one epoch, and compare accuracy against the dense model.
"""

from interlace.bench import evaluate, relative_performance
from interlace.experiment import model_config_for
from interlace.model import init
from interlace.planner import make_plan
from interlace.similarity import score
from interlace.surgery import apply_plan
from interlace.taskgen import TaskSpec, generate
from interlace.trainer import TrainConfig, finetune, pretrain

spec = TaskSpec(num_train=50_000, num_eval=1_000)
splits = generate(spec)
print(f"finetune subset: {len(splits['finetune'])} samples, calibration: {len(splits['calib'])}")

dense = init(model_config_for(spec, {"num_layers": 12, "hidden_dim": 128, "num_heads": 4, "ffn_dim": 256}))
pretrain(dense, splits["train"], TrainConfig(lr_peak=1e-3, batch_size=64, grad_accum=1, epochs=2))
base = evaluate(dense, splits["eval"])
print(f"dense accuracy {base.accuracy:.3f}")

report = score(dense, splits["calib"])
ft_cfg = TrainConfig(lr_peak=1e-4)
for strategy in ("interlace", "consecutive", "random", "dense_ft"):
    plan = make_plan(strategy, 0.25, report=report, seed=0)
    pruned, record = apply_plan(dense, plan)
    before = evaluate(pruned, splits["eval"]).accuracy
    finetune(pruned, record, splits["finetune"], ft_cfg)
    after = evaluate(pruned, splits["eval"])
    print(f"{strategy:<12} drop {sorted(plan.drop)} tune {sorted(plan.tune)}: "
          f"{before:.3f} -> {after.accuracy:.3f} ({relative_performance(after, base):.1f}% of dense)")
