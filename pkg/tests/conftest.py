import numpy as np
import pytest
import torch

from interlace.model import ModelConfig, TransformerModel
from interlace.taskgen import TaskSpec, generate


def small_config(**kw) -> ModelConfig:
    base = dict(num_layers=4, hidden_dim=32, num_heads=4, ffn_dim=48, vocab_size=50,
                max_seq=16, prefix_len=3, feat_dim=8, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, batch: int = 2, text_len: int = 5, seed: int = 0):
    rng = np.random.default_rng(seed)
    prefix = torch.from_numpy(rng.standard_normal((batch, cfg.prefix_len, cfg.feat_dim)))
    tokens = torch.from_numpy(rng.integers(0, cfg.vocab_size, size=(batch, text_len)))
    return prefix, tokens


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def model(cfg):
    return TransformerModel(cfg)


@pytest.fixture(scope="session")
def tiny_spec():
    return TaskSpec(num_train=2000, num_eval=200, seq_len=4, prefix_len=3, feat_dim=8,
                    num_buckets=4, num_queries=8, vocab_size=32, seed=3)


@pytest.fixture(scope="session")
def tiny_splits(tiny_spec):
    return generate(tiny_spec)


def tiny_model_config(spec: TaskSpec, **kw) -> ModelConfig:
    base = dict(num_layers=6, hidden_dim=32, num_heads=4, ffn_dim=48, vocab_size=spec.vocab_size,
                max_seq=spec.prefix_len + spec.seq_len, prefix_len=spec.prefix_len,
                feat_dim=spec.feat_dim, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
