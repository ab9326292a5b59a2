"""
Layer and triplet redundancy of a freshly trained model
========================================================

Train a small dense model on the synthetic retrieval task, then stream a
calibration set through it and print how much each layer (and each run of
three layers) changes the hidden state.
"""

from interlace.experiment import model_config_for
from interlace.model import init
from interlace.similarity import score
from interlace.taskgen import TaskSpec, generate
from interlace.trainer import TrainConfig, pretrain

spec = TaskSpec(num_train=20_000, num_eval=500)
splits = generate(spec)

# a narrow 8-layer model is enough to see the profile take shape
net = init(model_config_for(spec, {"num_layers": 8, "hidden_dim": 64, "num_heads": 4, "ffn_dim": 128}))
pretrain(net, splits["train"], TrainConfig(lr_peak=1e-3, batch_size=64, grad_accum=1))

report = score(net, splits["calib"])
print(f"{report.tokens_seen} calibration tokens")
print("layer  S_layer  S_triplet")
for l in range(1, report.num_layers + 1):
    trip = f"{report.s_triplet(l):.4f}" if l <= report.num_layers - 2 else "  -"
    print(f"{l:5d}  {report.s_layer(l):.4f}   {trip}")
