"""Decoder-only transformer with a synthetic visual prefix and per-layer taps.

Layers are numbered 1..L in the public API (``states[l]`` is the output of
layer ``l``) and stored 0-based in ``model.layers``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    ChecksumMismatch,
    InvalidConfig,
    SequenceTooLong,
    TokenOutOfRange,
    VersionMismatch,
)
from .numkernel import DTYPE, check_finite

CHECKPOINT_MAGIC = b"INTRLACE"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq: int
    prefix_len: int = 0
    feat_dim: int = 16
    seed: int = 0
    identity_init: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq", "feat_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.prefix_len, int) or self.prefix_len < 0:
            raise InvalidConfig(f"prefix_len must be a nonnegative integer, got {self.prefix_len!r}")
        if self.hidden_dim % self.num_heads:
            raise InvalidConfig(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.max_seq < self.prefix_len + 1:
            raise InvalidConfig(f"max_seq {self.max_seq} leaves no room for text after a prefix of {self.prefix_len}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **changes})


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class DecoderBlock(nn.Module):
    """Pre-norm block: causal multi-head attention then a SwiGLU FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.num_heads = cfg.num_heads
        self.attn_norm = RMSNorm(d)
        self.q_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.k_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.v_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.o_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.ffn_norm = RMSNorm(d)
        self.gate_proj = nn.Linear(d, cfg.ffn_dim, bias=False, dtype=DTYPE)
        self.up_proj = nn.Linear(d, cfg.ffn_dim, bias=False, dtype=DTYPE)
        self.down_proj = nn.Linear(cfg.ffn_dim, d, bias=False, dtype=DTYPE)

    def attention(self, x):
        b, s, d = x.shape
        h = self.num_heads
        q = self.q_proj(x).view(b, s, h, d // h).transpose(1, 2)
        k = self.k_proj(x).view(b, s, h, d // h).transpose(1, 2)
        v = self.v_proj(x).view(b, s, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        future = torch.ones(s, s, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.o_proj(out.transpose(1, 2).reshape(b, s, d))

    def ffn(self, x):
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))

    def forward(self, x):
        x = x + self.attention(self.attn_norm(x))
        return x + self.ffn(self.ffn_norm(x))


@dataclass
class HiddenTrace:
    """``states[0]`` is X_0 and ``states[l]`` the output of layer ``l``."""

    states: list

    @property
    def num_layers(self) -> int:
        return len(self.states) - 1


class TransformerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.hidden_dim
        self.tok_emb = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.pos_emb = nn.Embedding(config.max_seq, d, dtype=DTYPE)
        self.prefix_proj = nn.Linear(config.feat_dim, d, dtype=DTYPE)
        self.layers = nn.ModuleList(DecoderBlock(config) for _ in range(config.num_layers))
        self.final_norm = RMSNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=False, dtype=DTYPE)
        self.reset_parameters()

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @torch.no_grad()
    def reset_parameters(self) -> None:
        cfg = self.config
        gen = torch.Generator().manual_seed(cfg.seed)
        out_std = INIT_STD / math.sqrt(2 * cfg.num_layers)
        for name, p in self.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif name == "prefix_proj.bias":
                p.zero_()
            elif name.endswith(("o_proj.weight", "down_proj.weight")):
                if cfg.identity_init:
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * out_std)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * INIT_STD)

    def _check_inputs(self, prefix_feats, tokens):
        cfg = self.config
        if tokens.dim() != 2:
            raise ValueError(f"tokens must be (batch, len), got shape {tuple(tokens.shape)}")
        n_v = 0 if prefix_feats is None else prefix_feats.shape[1]
        if n_v + tokens.shape[1] > cfg.max_seq:
            raise SequenceTooLong(f"sequence of {n_v + tokens.shape[1]} positions exceeds max_seq {cfg.max_seq}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")

    def embed_text(self, tokens, offset: int = 0):
        pos = torch.arange(offset, offset + tokens.shape[-1])
        return self.tok_emb(tokens) + self.pos_emb(pos)

    def embed(self, prefix_feats, tokens):
        """Build X_0 = [projected prefix; text embeddings] plus positions."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if prefix_feats is not None:
            prefix_feats = torch.as_tensor(prefix_feats, dtype=DTYPE)
            if prefix_feats.shape[1] == 0:
                prefix_feats = None
        self._check_inputs(prefix_feats, tokens)
        if prefix_feats is None:
            return self.embed_text(tokens)
        n_v = prefix_feats.shape[1]
        prefix = self.prefix_proj(prefix_feats) + self.pos_emb(torch.arange(n_v))
        return torch.cat([prefix, self.embed_text(tokens, offset=n_v)], dim=1)

    def head(self, x):
        return self.lm_head(self.final_norm(x))

    def forward(self, prefix_feats, tokens):
        """Logits for every position of the concatenated sequence."""
        x = self.embed(prefix_feats, tokens)
        for layer in self.layers:
            x = layer(x)
        return self.head(x)


def _batched(prefix_feats, tokens):
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    single = tokens.dim() == 1
    if single:
        tokens = tokens[None]
        if prefix_feats is not None:
            prefix_feats = torch.as_tensor(np.asarray(prefix_feats), dtype=DTYPE)[None]
    return prefix_feats, tokens, single


def init(config: ModelConfig) -> TransformerModel:
    return TransformerModel(config)


def forward_with_taps(model: TransformerModel, prefix_feats, tokens):
    """Run the model and record the hidden state at every layer boundary.

    Accepts a single sample (``tokens`` of shape ``(T,)``) or a batch.
    Returns ``(logits, HiddenTrace)``; logits cover all positions, prefix
    included.
    """
    prefix_feats, tokens, single = _batched(prefix_feats, tokens)
    x = model.embed(prefix_feats, tokens)
    states = [x]
    for i, layer in enumerate(model.layers):
        x = layer(x)
        check_finite(x, f"output of layer {i + 1}")
        states.append(x)
    logits = model.head(x)
    if single:
        logits = logits[0]
        states = [s[0] for s in states]
    return logits, HiddenTrace(states)


# ---------------------------------------------------------------- checkpoints


def _payload(model: nn.Module) -> tuple[list[dict], bytes]:
    manifest, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        raw = t.detach().cpu().numpy().astype("<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def fingerprint(model: nn.Module) -> str:
    """sha256 of the checkpoint payload (names and shapes excluded)."""
    return hashlib.sha256(_payload(model)[1]).hexdigest()


def write_checkpoint(path, header: dict, payload: bytes) -> None:
    header = {**header, "format_version": CHECKPOINT_VERSION, "payload_sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def save(model: TransformerModel, path) -> None:
    manifest, payload = _payload(model)
    header = {"config": model.config.to_dict(), "num_layers": model.num_layers, "tensors": manifest}
    write_checkpoint(path, header, payload)


def read_checkpoint(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    if len(data) < fixed or not data.startswith(CHECKPOINT_MAGIC):
        raise ChecksumMismatch(f"{path}: not an interlace checkpoint or truncated preamble")
    version, hlen = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < fixed + hlen:
        raise ChecksumMismatch(f"{path}: header truncated")
    try:
        header = json.loads(data[fixed:fixed + hlen])
    except ValueError as exc:
        raise ChecksumMismatch(f"{path}: unreadable header") from exc
    payload = data[fixed + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ChecksumMismatch(f"{path}: payload checksum mismatch ({len(payload)} payload bytes)")
    return header, payload


def load(path) -> TransformerModel:
    header, payload = read_checkpoint(path)
    manifest = header["tensors"]
    layer_ids = {int(t["name"].split(".")[1]) for t in manifest if t["name"].startswith("layers.")}
    cfg_layers = header["config"]["num_layers"]
    if not (header["num_layers"] == cfg_layers == len(layer_ids)):
        raise VersionMismatch(
            f"{path}: header declares {header['num_layers']} layers (config {cfg_layers}) "
            f"but the payload holds {len(layer_ids)}"
        )
    model = TransformerModel(ModelConfig.from_dict(header["config"]))
    expected = model.state_dict()
    if [t["name"] for t in manifest] != list(expected):
        raise VersionMismatch(f"{path}: tensor manifest does not match the model layout")
    state = {}
    for t in manifest:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float64))
    model.load_state_dict(state)
    return model
