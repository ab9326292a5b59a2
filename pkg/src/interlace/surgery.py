"""Build a pruned model from a plan and derive its trainability mask."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import torch.nn as nn

from .errors import PlanModelMismatch
from .model import TransformerModel
from .planner import PruningPlan

NON_LAYER_COMPONENTS = ("tok_emb", "pos_emb", "prefix_proj", "final_norm", "lm_head")


@dataclass
class SurgeryRecord:
    old_to_new: dict
    dropped: frozenset
    mask: list
    strategy: str = ""
    non_layer_trainables: bool = False

    def __post_init__(self):
        self.old_to_new = {int(k): int(v) for k, v in self.old_to_new.items()}
        self.dropped = frozenset(self.dropped)
        olds = sorted(self.old_to_new)
        news = [self.old_to_new[o] for o in olds]
        if news != list(range(1, len(olds) + 1)):
            raise ValueError("old_to_new must map survivors onto 1..L' in order")
        if len(self.mask) != len(olds):
            raise ValueError("mask must hold one flag per surviving layer")

    @property
    def num_layers(self) -> int:
        return len(self.mask)

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy,
            "old_to_new": {str(k): v for k, v in sorted(self.old_to_new.items())},
            "dropped": sorted(self.dropped),
            "mask": [bool(m) for m in self.mask],
            "non_layer_trainables": self.non_layer_trainables,
        }, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SurgeryRecord":
        d = json.loads(text)
        return cls(d["old_to_new"], d["dropped"], d["mask"], d.get("strategy", ""),
                   d.get("non_layer_trainables", False))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SurgeryRecord":
        with open(path) as fh:
            return cls.from_json(fh.read())


def apply_plan(model: TransformerModel, plan: PruningPlan) -> tuple[TransformerModel, SurgeryRecord]:
    """Deep-copy ``model`` without the dropped layers, renumbering survivors."""
    if plan.num_layers != model.num_layers:
        raise PlanModelMismatch(f"plan is for {plan.num_layers} layers, model has {model.num_layers}")
    plan.validate()
    survivors = [old for old in range(1, model.num_layers + 1) if old not in plan.drop]
    old_to_new = {old: new for new, old in enumerate(survivors, start=1)}

    pruned = copy.deepcopy(model)
    pruned.layers = nn.ModuleList(pruned.layers[old - 1] for old in survivors)
    pruned.config = model.config.replace(num_layers=len(survivors))
    record = SurgeryRecord(
        old_to_new=old_to_new,
        dropped=plan.drop,
        mask=[old in plan.tune for old in survivors],
        strategy=plan.strategy,
    )
    return pruned, record


def trainable_mask(record: SurgeryRecord, model: TransformerModel) -> dict[str, bool]:
    """Map each parameter name to whether fine-tuning may update it."""
    if model.num_layers != record.num_layers:
        raise PlanModelMismatch(f"record describes {record.num_layers} layers, model has {model.num_layers}")
    mask = {}
    for name, _ in model.named_parameters():
        if name.startswith("layers."):
            mask[name] = bool(record.mask[int(name.split(".")[1])])
        else:
            mask[name] = record.non_layer_trainables
    return mask


def apply_mask(model: TransformerModel, mask: dict[str, bool]) -> list:
    """Set ``requires_grad`` from ``mask``; return the trainable parameters."""
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad_(mask[name])
        p.grad = None
        if mask[name]:
            trainable.append(p)
    return trainable


def full_record(model: TransformerModel) -> SurgeryRecord:
    """A record that marks everything trainable (used for pretraining)."""
    L = model.num_layers
    return SurgeryRecord({i: i for i in range(1, L + 1)}, (), [True] * L, "pretrain", True)
