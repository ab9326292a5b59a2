"""Recovery fine-tuning: masked next-token cross-entropy with AdamW,
linear warmup, cosine decay and global-norm clipping."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AllMasked, NonFiniteLoss
from .numkernel import backward
from .surgery import SurgeryRecord, apply_mask, full_record, trainable_mask

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class TrainConfig:
    lr_peak: float = 1e-5
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    batch_size: int = 16
    grad_accum: int = 2
    epochs: int = 1
    seed: int = 0
    betas: tuple = BETAS
    eps: float = EPS

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ValueError("batch_size, grad_accum and epochs must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s, sort_keys=True) + "\n" for s in self.steps)

    def summary(self) -> dict:
        losses = self.losses
        return {
            "steps": len(self.steps),
            "first_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None,
            "checkpoint": self.checkpoint,
        }

    def save(self, jsonl_path, summary_path=None) -> None:
        with open(jsonl_path, "w") as fh:
            fh.write(self.to_jsonl())
        if summary_path is not None:
            with open(summary_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2, sort_keys=True)
                fh.write("\n")


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps - 1e-9)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based optimizer ``step`` of ``total_steps``.

    Linear ramp from 0 reaching ``lr_peak`` at step ``ceil(warmup_ratio*S)``,
    then cosine decay reaching 0 at step ``S``.
    """
    w = warmup_steps(total_steps, cfg.warmup_ratio)
    if step <= w:
        return cfg.lr_peak * step / w
    if total_steps == w:
        return cfg.lr_peak
    progress = (step - w) / (total_steps - w)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def token_nll(logits, targets, loss_mask):
    """Summed negative log-likelihood over mask-true positions and their count.

    ``logits`` cover the text positions only (prefix rows already cut).
    """
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = loss_mask.to(picked.dtype)
    return -(picked * mask).sum(), int(loss_mask.sum())


def next_token_loss(logits, targets, loss_mask):
    """Mean of ``-log p(y_t | y_<t, X)`` over positions where ``loss_mask`` holds."""
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    loss_mask = torch.as_tensor(np.asarray(loss_mask), dtype=torch.bool)
    total, count = token_nll(logits, targets, loss_mask)
    if count == 0:
        raise AllMasked("no position contributes to the loss")
    return total / count


def text_logits(model, prefix, tokens):
    """Model logits restricted to the text positions."""
    logits = model(prefix, tokens)
    return logits[:, logits.shape[1] - tokens.shape[1]:]


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place to global L2 norm ``max_norm``; return the
    pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(math.fsum(float(g.pow(2).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def batch_order(n: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, epoch]).permutation(n)


def train(model, data, cfg: TrainConfig, record: SurgeryRecord | None = None,
          log_every: int | None = None) -> tuple[object, TrainLog]:
    """Optimize ``model`` in place on ``data``; only parameters the record's
    mask marks trainable are updated."""
    record = record if record is not None else full_record(model)
    mask = trainable_mask(record, model)
    params = apply_mask(model, mask)
    n = len(data)
    if n == 0:
        raise ValueError("training data is empty")
    per_epoch = math.ceil(n / cfg.effective_batch)
    total = per_epoch * cfg.epochs
    log = TrainLog()
    t0 = time.perf_counter()
    opt = None
    if params:
        opt = torch.optim.AdamW(params, lr=0.0, betas=cfg.betas, eps=cfg.eps,
                                weight_decay=cfg.weight_decay, foreach=False)
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = batch_order(n, cfg, epoch)
        for start in range(0, n, cfg.effective_batch):
            step += 1
            rows = order[start:start + cfg.effective_batch]
            lr = lr_at(step, total, cfg)
            n_tokens = int(data.loss_mask[rows].sum())
            if n_tokens == 0:
                raise AllMasked(f"optimizer step {step} has no loss tokens")
            loss_sum = 0.0
            for m in range(0, len(rows), cfg.batch_size):
                b = data.batch(rows[m:m + cfg.batch_size])
                logits = text_logits(model, b["prefix"], b["tokens"])
                nll, _ = token_nll(logits, b["targets"], b["loss_mask"])
                loss = nll / n_tokens
                loss_sum += float(loss.detach())
                if params:
                    backward(loss)
            if not math.isfinite(loss_sum):
                raise NonFiniteLoss(step, loss_sum)
            grad_norm = clip_grad_norm(params, cfg.grad_clip_norm) if params else 0.0
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.step()
                opt.zero_grad(set_to_none=True)
            log.steps.append({"step": step, "lr": lr, "loss": loss_sum,
                              "grad_norm_preclip": grad_norm, "tokens": n_tokens})
            if log_every and step % log_every == 0:
                print(f"step {step}/{total} lr {lr:.3g} loss {loss_sum:.4f}", flush=True)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    log.wall_clock = time.perf_counter() - t0
    return model, log


def finetune(model, record: SurgeryRecord, data, cfg: TrainConfig, **kw):
    """Recovery fine-tuning of the layers ``record`` marks trainable."""
    return train(model, data, cfg, record=record, **kw)


def pretrain(model, data, cfg: TrainConfig, **kw):
    """Train every parameter of ``model`` (embeddings and head included)."""
    return train(model, data, cfg, record=full_record(model), **kw)
