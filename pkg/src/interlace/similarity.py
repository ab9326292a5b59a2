"""Layer and triplet redundancy scores from hidden-state cosine similarity."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import EmptyCalibration, EmptyResult, ZeroNormVector
from .model import forward_with_taps
from .numkernel import token_cosines


@dataclass
class SimilarityReport:
    num_layers: int
    layer_scores: list[float]
    triplet_scores: list[float]
    tokens_seen: int
    calib_fingerprint: str

    def __post_init__(self):
        if len(self.layer_scores) != self.num_layers:
            raise ValueError("layer_scores must hold one score per layer")
        if len(self.triplet_scores) != max(self.num_layers - 2, 0):
            raise ValueError("triplet_scores must hold L-2 scores")
        if self.tokens_seen < 1:
            raise ValueError("tokens_seen must be positive")

    def s_layer(self, layer: int) -> float:
        """Score of 1-based ``layer``."""
        return self.layer_scores[layer - 1]

    def s_triplet(self, i: int) -> float:
        """Score of the triplet starting at 1-based layer ``i``."""
        return self.triplet_scores[i - 1]

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimilarityReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SimilarityReport":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_index", "s_layer", "s_triplet"])
            for layer in range(1, self.num_layers + 1):
                trip = repr(self.s_triplet(layer)) if layer <= self.num_layers - 2 else ""
                w.writerow([layer, repr(self.s_layer(layer)), trip])


class KahanSum:
    """Elementwise compensated running sum over a fixed-size vector."""

    def __init__(self, n: int):
        self.total = np.zeros(n)
        self.comp = np.zeros(n)

    def add(self, values: np.ndarray) -> None:
        y = values - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t


def _calib_pairs(calib):
    if hasattr(calib, "prefix") and hasattr(calib, "tokens"):
        return [(calib.prefix[i], calib.tokens[i]) for i in range(len(calib))]
    return list(calib)


def calibration_fingerprint(calib) -> str:
    if hasattr(calib, "fingerprint"):
        return calib.fingerprint()
    h = hashlib.sha256()
    for prefix, tokens in calib:
        if prefix is not None:
            h.update(np.ascontiguousarray(prefix, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(tokens, dtype="<i8").tobytes())
    return h.hexdigest()


@torch.no_grad()
def score(model, calib) -> SimilarityReport:
    """Stream calibration samples through ``model`` and average token cosines.

    ``calib`` is a ``TaskData`` or a sequence of ``(prefix_feats, tokens)``
    pairs. Every position of every sample (prefix rows included) is one
    token of the average. Samples are visited in the given order and each
    sample's per-token cosines are folded into a compensated sum, so no
    more than one trace is alive at a time.
    """
    pairs = _calib_pairs(calib)
    if not pairs:
        raise EmptyCalibration("calibration set is empty")
    L = model.num_layers
    layer_acc, trip_acc = KahanSum(L), KahanSum(max(L - 2, 0))
    n_tokens = 0
    for k, (prefix, tokens) in enumerate(pairs):
        _, trace = forward_with_taps(model, prefix, tokens)
        states = torch.stack(trace.states)  # (L+1, S, d)
        try:
            layer_cos = token_cosines(states[:-1], states[1:])  # (L, S)
            trip_cos = token_cosines(states[:-3], states[3:])  # (L-2, S)
        except ZeroNormVector as exc:
            raise ZeroNormVector(f"calibration sample {k}: {exc}") from exc
        for j in range(states.shape[1]):
            layer_acc.add(layer_cos[:, j].numpy())
            trip_acc.add(trip_cos[:, j].numpy())
        n_tokens += states.shape[1]
    layer = np.clip(layer_acc.total / n_tokens, -1.0, 1.0)
    trip = np.clip(trip_acc.total / n_tokens, -1.0, 1.0)
    return SimilarityReport(
        num_layers=L,
        layer_scores=[float(x) for x in layer],
        triplet_scores=[float(x) for x in trip],
        tokens_seen=n_tokens,
        calib_fingerprint=calibration_fingerprint(calib),
    )


def select_calibration(finetune_set, fraction: float, seed: int = 0):
    """Seeded uniform subsample of ``ceil(fraction * n)`` samples."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(finetune_set)
    if n == 0:
        raise EmptyResult("cannot draw a calibration subset from an empty set")
    k = math.ceil(fraction * n - 1e-9)
    if k >= n:
        rows = np.arange(n)
    else:
        rows = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    if hasattr(finetune_set, "subset"):
        return finetune_set.subset(rows)
    return [finetune_set[int(i)] for i in rows]
