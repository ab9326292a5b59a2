"""Drop / tune / freeze planning: Interlace selection and its ablations.

All layer indices are 1-based. Every planner returns a :class:`PruningPlan`
whose three sets partition ``{1..L}``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientLayers, InsufficientTriplets, InvalidRatio, WindowOutOfRange

PLAN_VERSION = 1
STRATEGIES = ("interlace", "consecutive", "random", "interlace_oa", "interlace_tn", "dense_ft")


@dataclass(frozen=True)
class TripletAssignment:
    index: int
    dropped: int
    tuned: int
    frozen: int

    @property
    def layers(self) -> tuple[int, int, int]:
        return (self.index, self.index + 1, self.index + 2)


@dataclass
class PruningPlan:
    strategy: str
    num_layers: int
    ratio: float
    k: int
    drop: frozenset
    tune: frozenset
    freeze: frozenset
    triplets: list = field(default_factory=list)
    seed: int | None = None
    report_fingerprint: str | None = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.drop = frozenset(self.drop)
        self.tune = frozenset(self.tune)
        self.freeze = frozenset(self.freeze)
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        everything = set(range(1, self.num_layers + 1))
        if self.drop & self.tune or self.drop & self.freeze or self.tune & self.freeze:
            raise ValueError("drop, tune and freeze sets overlap")
        if self.drop | self.tune | self.freeze != everything:
            raise ValueError(f"drop/tune/freeze do not cover layers 1..{self.num_layers}")
        if len(self.drop) != self.k:
            raise ValueError(f"plan drops {len(self.drop)} layers but k={self.k}")

    def role(self, layer: int) -> str:
        if layer in self.drop:
            return "drop"
        return "tune" if layer in self.tune else "freeze"

    def to_dict(self) -> dict:
        d = {
            "version": PLAN_VERSION,
            "strategy": self.strategy,
            "num_layers": self.num_layers,
            "ratio": self.ratio,
            "k": self.k,
            "drop": sorted(self.drop),
            "tune": sorted(self.tune),
            "freeze": sorted(self.freeze),
            "triplets": [
                {"index": t.index, "dropped": t.dropped, "tuned": t.tuned, "frozen": t.frozen}
                for t in self.triplets
            ],
            "report_fingerprint": self.report_fingerprint,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        if self.notes:
            d["notes"] = list(self.notes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        if d.get("version") != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {d.get('version')!r}")
        return cls(
            strategy=d["strategy"],
            num_layers=d["num_layers"],
            ratio=d["ratio"],
            k=d["k"],
            drop=d["drop"],
            tune=d["tune"],
            freeze=d["freeze"],
            triplets=[TripletAssignment(**t) for t in d["triplets"]],
            seed=d.get("seed"),
            report_fingerprint=d.get("report_fingerprint"),
            notes=d.get("notes", []),
        )

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PruningPlan":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def assignment_rows(self, report=None) -> list[dict]:
        owner = {}
        for t in self.triplets:
            for layer in t.layers:
                owner[layer] = t.index
        rows = []
        for layer in range(1, self.num_layers + 1):
            rows.append({
                "layer": layer,
                "role": self.role(layer),
                "s_layer": "" if report is None else repr(report.s_layer(layer)),
                "owning_triplet": owner.get(layer, ""),
            })
        return rows

    def to_csv(self, path, report=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["layer", "role", "s_layer", "owning_triplet"])
            w.writeheader()
            w.writerows(self.assignment_rows(report))


def budget(num_layers: int, ratio: float) -> int:
    """K = floor(ratio * L), rejecting ratios outside (0, 1) or K < 1."""
    if not 0.0 < ratio < 1.0:
        raise InvalidRatio(f"ratio must lie in (0, 1), got {ratio}")
    k = math.floor(ratio * num_layers + 1e-9)
    if k < 1:
        raise InvalidRatio(f"ratio {ratio} removes no layer of {num_layers}")
    return k


def rank_triplets(triplet_scores) -> list[int]:
    """1-based triplet indices by descending score, ties to the lower index."""
    return sorted(range(1, len(triplet_scores) + 1), key=lambda i: (-triplet_scores[i - 1], i))


def _select_triplets(report, ratio: float, assign):
    L = report.num_layers
    if L < 3:
        raise InsufficientTriplets(f"a {L}-layer model has no triplet")
    k = budget(L, ratio)
    drop, tune, freeze, assigned, chosen = set(), set(), set(), set(), []
    for i in rank_triplets(report.triplet_scores):
        if len(drop) >= k:
            break
        members = {i, i + 1, i + 2}
        if members & assigned:
            continue
        dropped, tuned = assign(report, i)
        freeze.add(i + 2)
        drop.add(dropped)
        tune.add(tuned)
        assigned |= members
        chosen.append(TripletAssignment(i, dropped, tuned, i + 2))
    if len(drop) < k:
        raise InsufficientTriplets(f"placed {len(drop)} of {k} drops before running out of disjoint triplets")
    freeze |= set(range(1, L + 1)) - assigned
    return drop, tune, freeze, chosen, k


def _by_layer_score(report, i):
    if report.s_layer(i) > report.s_layer(i + 1):
        return i, i + 1
    return i + 1, i


def _by_position(report, i):
    return i, i + 1


def plan_interlace(report, ratio: float) -> PruningPlan:
    """Greedy disjoint-triplet selection; drop the more redundant of the
    first two layers, tune the other, freeze the third."""
    drop, tune, freeze, chosen, k = _select_triplets(report, ratio, _by_layer_score)
    return PruningPlan("interlace", report.num_layers, ratio, k, drop, tune, freeze, chosen,
                       report_fingerprint=report.fingerprint())


def plan_interlace_oa(report, ratio: float) -> PruningPlan:
    """Same triplet selection, roles fixed by position (drop, tune, freeze)."""
    drop, tune, freeze, chosen, k = _select_triplets(report, ratio, _by_position)
    return PruningPlan("interlace_oa", report.num_layers, ratio, k, drop, tune, freeze, chosen,
                       report_fingerprint=report.fingerprint())


def plan_consecutive(report, ratio: float) -> PruningPlan:
    """Drop the contiguous K-window with the largest summed layer score and
    tune the K layers right after it."""
    L = report.num_layers
    k = budget(L, ratio)
    scores = report.layer_scores
    windows = {s: math.fsum(scores[s - 1:s - 1 + k]) for s in range(1, L - k + 2)}
    best = max(windows, key=lambda s: (windows[s], -s))
    notes = []
    if best + 2 * k - 1 > L:
        admissible = [s for s in windows if s + 2 * k - 1 <= L]
        if not admissible:
            raise WindowOutOfRange(f"no {k}-layer window of {L} layers admits {k} successors")
        fallback = max(admissible, key=lambda s: (windows[s], -s))
        notes.append(
            f"best window starts at layer {best} but leaves fewer than {k} successors; "
            f"using the best admissible window starting at layer {fallback}"
        )
        best = fallback
    drop = set(range(best, best + k))
    tune = set(range(best + k, best + 2 * k))
    freeze = set(range(1, L + 1)) - drop - tune
    return PruningPlan("consecutive", L, ratio, k, drop, tune, freeze, notes=notes,
                       report_fingerprint=report.fingerprint())


def plan_random(num_layers: int, ratio: float, seed: int) -> PruningPlan:
    """K random drops, then K random tuned layers from the remainder."""
    k = budget(num_layers, ratio)
    if 2 * k > num_layers:
        raise InsufficientLayers(f"cannot pick {k} drop and {k} tune layers from {num_layers}")
    rng = np.random.default_rng(seed)
    layers = np.arange(1, num_layers + 1)
    drop = rng.choice(layers, size=k, replace=False)
    rest = np.setdiff1d(layers, drop)
    tune = rng.choice(rest, size=k, replace=False)
    drop, tune = {int(x) for x in drop}, {int(x) for x in tune}
    freeze = set(range(1, num_layers + 1)) - drop - tune
    return PruningPlan("random", num_layers, ratio, k, drop, tune, freeze, seed=seed)


def plan_interlace_tn(report, ratio: float) -> PruningPlan:
    """Drop layers in descending layer score, tuning each one's successor."""
    L = report.num_layers
    k = budget(L, ratio)
    order = sorted(range(1, L + 1), key=lambda layer: (-report.s_layer(layer), layer))
    drop, tune = set(), set()
    for layer in order:
        if len(drop) >= k:
            break
        if layer == L or layer in drop | tune or layer + 1 in drop | tune:
            continue
        drop.add(layer)
        tune.add(layer + 1)
    if len(drop) < k:
        raise InsufficientTriplets(f"placed {len(drop)} of {k} drops; no eligible layer left")
    freeze = set(range(1, L + 1)) - drop - tune
    return PruningPlan("interlace_tn", L, ratio, k, drop, tune, freeze,
                       report_fingerprint=report.fingerprint())


def plan_dense_ft(num_layers: int, ratio: float) -> PruningPlan:
    """No pruning; tune the last floor(ratio * L) layers."""
    if not 0.0 < ratio <= 1.0:
        raise InvalidRatio(f"ratio must lie in (0, 1], got {ratio}")
    n_tune = math.floor(ratio * num_layers + 1e-9)
    if n_tune < 1:
        raise InvalidRatio(f"ratio {ratio} tunes no layer of {num_layers}")
    tune = set(range(num_layers - n_tune + 1, num_layers + 1))
    freeze = set(range(1, num_layers + 1)) - tune
    return PruningPlan("dense_ft", num_layers, ratio, 0, set(), tune, freeze)


def make_plan(strategy: str, ratio: float, report=None, num_layers: int | None = None,
              seed: int | None = None) -> PruningPlan:
    """Dispatch by strategy name."""
    if strategy in ("interlace", "interlace_oa", "interlace_tn", "consecutive"):
        if report is None:
            raise ValueError(f"strategy {strategy!r} needs a similarity report")
        fn = {"interlace": plan_interlace, "interlace_oa": plan_interlace_oa,
              "interlace_tn": plan_interlace_tn, "consecutive": plan_consecutive}[strategy]
        return fn(report, ratio)
    L = num_layers if num_layers is not None else report.num_layers
    if strategy == "random":
        if seed is None:
            raise ValueError("strategy 'random' needs a seed")
        plan = plan_random(L, ratio, seed)
    elif strategy == "dense_ft":
        plan = plan_dense_ft(L, ratio)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    if report is not None:
        plan.report_fingerprint = report.fingerprint()
    return plan
