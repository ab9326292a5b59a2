"""Synthetic prefix-keyed retrieval task.

Every sample carries ``prefix_len`` feature rows followed by a text of
query/answer pairs::

    BOS q1 a1 q2 a2 ... qm am

Each prefix row is a noisy, randomly rescaled copy of one of ``num_digits``
prototype vectors and so encodes a digit. The hidden *bucket* is the sum of
the row digits modulo ``num_buckets`` and ``a = table[bucket, q]``.

Decoding a row means picking the prototype with the highest cosine, so the
answer is an exact function of (prefix features, query token) and the rule
can be inverted in closed form (see :class:`RuleOracle`). A model has to
classify every row, combine the rows and then look up the table, which
takes several layers; that depth is what makes layer removal measurable.

Samples are pure functions of ``(seed, split, index)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .errors import SpecTooSmall

BOS = 0
_SPLIT_IDS = {"train": 1, "eval": 2}


@dataclass
class TaskSpec:
    vocab_size: int = 64
    seq_len: int = 6
    prefix_len: int = 4
    feat_dim: int = 16
    num_train: int = 100_000
    num_eval: int = 2_000
    finetune_fraction: float = 0.01
    calib_fraction: float = 0.10
    seed: int = 0
    num_buckets: int = 8
    num_queries: int = 16
    num_digits: int = 4
    noise: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("finetune_fraction", "calib_fraction"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise SpecTooSmall(f"{name} must lie in (0, 1], got {value}")
        if self.seq_len < 2 or self.seq_len % 2:
            raise SpecTooSmall(f"seq_len must be an even number >= 2, got {self.seq_len}")
        if self.num_train * self.finetune_fraction < 1 or self.num_eval < 1:
            raise SpecTooSmall("spec yields an empty fine-tuning or eval split")
        if self.prefix_len < 1 or self.num_buckets < 1 or self.num_digits < 2:
            raise SpecTooSmall("the task needs a prefix row, a bucket and at least two digits")
        if 1 + self.num_queries + 1 > self.vocab_size:
            raise SpecTooSmall(f"vocab_size {self.vocab_size} cannot hold BOS, {self.num_queries} queries and answers")

    @property
    def num_pairs(self) -> int:
        return self.seq_len // 2

    @property
    def answer_tokens(self) -> range:
        return range(1 + self.num_queries, self.vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Sample:
    prefix_feats: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    answer_mask: np.ndarray
    bucket: int

    def fingerprint(self) -> str:
        return _sample_hash(self.prefix_feats, self.tokens, self.targets)


def _sample_hash(prefix, tokens, targets) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(prefix, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(tokens, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(targets, dtype="<i8").tobytes())
    return h.hexdigest()


class TaskData:
    """Column-stored set of samples with stable per-sample provenance."""

    def __init__(self, prefix, tokens, targets, loss_mask, answer_mask, buckets, indices, split: str):
        self.prefix = np.asarray(prefix, dtype=np.float64)
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.loss_mask = np.asarray(loss_mask, dtype=bool)
        self.answer_mask = np.asarray(answer_mask, dtype=bool)
        self.buckets = np.asarray(buckets, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.split = split

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.prefix[i], self.tokens[i], self.targets[i], self.loss_mask[i],
                      self.answer_mask[i], int(self.buckets[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, rows) -> "TaskData":
        rows = np.asarray(rows, dtype=np.int64)
        return TaskData(self.prefix[rows], self.tokens[rows], self.targets[rows], self.loss_mask[rows],
                        self.answer_mask[rows], self.buckets[rows], self.indices[rows], self.split)

    def batch(self, rows) -> dict:
        """Torch tensors for the given rows, ready for a forward pass."""
        rows = np.asarray(rows, dtype=np.int64)
        return {
            "prefix": torch.from_numpy(self.prefix[rows]),
            "tokens": torch.from_numpy(self.tokens[rows]),
            "targets": torch.from_numpy(self.targets[rows]),
            "loss_mask": torch.from_numpy(self.loss_mask[rows]),
            "answer_mask": torch.from_numpy(self.answer_mask[rows]),
        }

    def sample_fingerprints(self) -> list[str]:
        return [_sample_hash(p, t, y) for p, t, y in zip(self.prefix, self.tokens, self.targets)]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for f in self.sample_fingerprints():
            h.update(f.encode())
        return h.hexdigest()

    # JSON-lines cache ---------------------------------------------------

    def to_jsonl(self, path, header: dict | None = None) -> None:
        with open(path, "w") as fh:
            head = {"split": self.split, "size": len(self), "fingerprint": self.fingerprint(), **(header or {})}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for i in range(len(self)):
                rec = {
                    "index": int(self.indices[i]),
                    "bucket": int(self.buckets[i]),
                    "prefix_feats": self.prefix[i].tolist(),
                    "tokens": self.tokens[i].tolist(),
                    "targets": self.targets[i].tolist(),
                    "loss_mask": self.loss_mask[i].astype(int).tolist(),
                    "answer_mask": self.answer_mask[i].astype(int).tolist(),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TaskData":
        with open(path) as fh:
            head = json.loads(fh.readline())
            recs = [json.loads(line) for line in fh if line.strip()]
        data = cls(
            [r["prefix_feats"] for r in recs], [r["tokens"] for r in recs], [r["targets"] for r in recs],
            [r["loss_mask"] for r in recs], [r["answer_mask"] for r in recs], [r["bucket"] for r in recs],
            [r["index"] for r in recs], head["split"],
        )
        if data.fingerprint() != head["fingerprint"]:
            raise ValueError(f"{path}: sample content does not match the header fingerprint")
        return data


class TaskRule:
    """The hidden generation rule: digit prototypes and the answer table."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        protos = rng.standard_normal((spec.num_digits, spec.feat_dim))
        self.prototypes = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        answers = np.asarray(spec.answer_tokens)
        self.table = rng.choice(answers, size=(spec.num_buckets, spec.num_queries))

    def decode_digits(self, prefix_feats: np.ndarray) -> np.ndarray:
        """Nearest prototype (by cosine) to each prefix row."""
        rows = np.asarray(prefix_feats)
        rows = rows / np.linalg.norm(rows, axis=-1, keepdims=True)
        return np.argmax(rows @ self.prototypes.T, axis=-1)

    def decode_bucket(self, prefix_feats: np.ndarray) -> np.ndarray:
        return self.decode_digits(prefix_feats).sum(axis=-1) % self.spec.num_buckets

    def answer(self, bucket, query_token):
        return self.table[bucket, np.asarray(query_token) - 1]

    def sample(self, split: str, index: int):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], index])
        digits = rng.integers(spec.num_digits, size=spec.prefix_len)
        scale = rng.uniform(0.5, 1.5, size=(spec.prefix_len, 1))
        noise = rng.standard_normal((spec.prefix_len, spec.feat_dim)) * spec.noise / math.sqrt(spec.feat_dim)
        prefix = self.prototypes[digits] * scale + noise
        bucket = int(self.decode_bucket(prefix))
        queries = rng.integers(1, 1 + spec.num_queries, size=spec.num_pairs)
        text = [BOS]
        for q in queries:
            text += [int(q), int(self.answer(bucket, q))]
        text = np.asarray(text, dtype=np.int64)
        tokens, targets = text[:-1], text[1:]
        loss_mask = np.ones(len(tokens), dtype=bool)
        answer_mask = np.zeros(len(tokens), dtype=bool)
        answer_mask[1::2] = True
        return prefix, tokens, targets, loss_mask, answer_mask, bucket


def _build(rule: TaskRule, split: str, indices) -> TaskData:
    cols = list(zip(*(rule.sample(split, int(i)) for i in indices)))
    return TaskData(*cols, indices=list(indices), split=split)


def regenerate(spec: TaskSpec, split: str, index: int) -> Sample:
    """Rebuild one sample from ``(seed, split, index)``."""
    return _build(TaskRule(spec), split, [index])[0]


def subsample(data: TaskData, fraction: float, seed: int) -> TaskData:
    """Seeded uniform subsample of ``ceil(fraction * n)`` rows, in canonical order."""
    n = len(data)
    k = math.ceil(fraction * n - 1e-9)
    if k >= n:
        return data.subset(np.arange(n))
    rows = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return data.subset(rows)


def generate(spec: TaskSpec) -> dict[str, TaskData]:
    """Build the train / finetune / calib / eval splits of a task."""
    from .similarity import select_calibration

    rule = TaskRule(spec)
    train = _build(rule, "train", range(spec.num_train))
    evaluation = _build(rule, "eval", range(spec.num_eval))
    finetune = subsample(train, spec.finetune_fraction, seed=spec.seed + 1)
    finetune.split = "finetune"
    calib = select_calibration(finetune, spec.calib_fraction, seed=spec.seed + 2)
    calib.split = "calib"
    return {"train": train, "finetune": finetune, "calib": calib, "eval": evaluation}


class RuleOracle:
    """Closed-form inversion of the generation rule, shaped like a model.

    ``forward`` returns logits that put all mass on the rule's answer at
    every answer position, so it can be scored by ``bench.evaluate``.
    """

    def __init__(self, spec: TaskSpec):
        self.rule = TaskRule(spec)
        self.spec = spec

    def __call__(self, prefix_feats, tokens):
        return self.forward(prefix_feats, tokens)

    def forward(self, prefix_feats, tokens):
        prefix = np.asarray(prefix_feats)
        tokens = np.asarray(tokens)
        b, t = tokens.shape
        n_v = prefix.shape[1]
        logits = np.zeros((b, n_v + t, self.spec.vocab_size))
        buckets = self.rule.decode_bucket(prefix)
        for pos in range(t):
            q = tokens[:, pos]
            is_query = (q >= 1) & (q <= self.spec.num_queries)
            ans = self.rule.answer(buckets, np.where(is_query, q, 1))
            logits[np.arange(b), n_v + pos, np.where(is_query, ans, BOS)] = 1.0
        return torch.from_numpy(logits)


def describe(spec: TaskSpec, splits: dict[str, TaskData] | None = None) -> dict:
    """Task card: rule family, split sizes and content fingerprints."""
    splits = splits if splits is not None else generate(spec)
    return {
        "rule": "answer = table[bucket, query]; bucket = sum of per-row nearest-prototype digits mod num_buckets",
        "spec": spec.to_dict(),
        "splits": {name: {"size": len(d), "fingerprint": d.fingerprint()} for name, d in splits.items()},
    }


def save_splits(splits: dict[str, TaskData], spec: TaskSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    card = describe(spec, splits)
    (out / "task.json").write_text(json.dumps(card, indent=2, sort_keys=True) + "\n")
    for name, data in splits.items():
        data.to_jsonl(out / f"{name}.jsonl", header={"spec": spec.to_dict()})


def load_splits(data_dir, names=("train", "finetune", "calib", "eval")) -> dict[str, TaskData]:
    d = Path(data_dir)
    return {n: TaskData.from_jsonl(d / f"{n}.jsonl") for n in names if (d / f"{n}.jsonl").exists()}


def load_spec(data_dir) -> TaskSpec:
    card = json.loads((Path(data_dir) / "task.json").read_text())
    return TaskSpec.from_dict(card["spec"])
