"""Dense float64 tensors, cosine kernels, reverse-mode gradients and a
finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects pinned to float64; torch's
autograd provides the reverse-mode engine. The cosine kernels and the
finite-difference checker are written here because they carry the
package's numerical contracts (norm floor, clamping, symmetry).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import GraphDetached, NonFiniteValue, ZeroNormVector

DTYPE = torch.float64
NORM_FLOOR = 1e-12


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Build a float64 tensor, refusing non-finite payloads."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    check_finite(t, "tensor data")
    t.requires_grad_(requires_grad)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).nonzero()[0].tolist()
        raise NonFiniteValue(f"{what} holds a non-finite value at index {bad}")
    return t


def cosine(u, v) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    u = torch.as_tensor(u, dtype=DTYPE).reshape(-1)
    v = torch.as_tensor(v, dtype=DTYPE).reshape(-1)
    if u.numel() != v.numel() or u.numel() == 0:
        raise ValueError(f"cosine needs equal non-empty lengths, got {u.numel()} and {v.numel()}")
    return float(token_cosines(u[None], v[None])[0])


def token_cosines(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity between two ``(..., d)`` arrays.

    Returns an array of shape ``a.shape[:-1]``. The products ``a*b`` and
    ``|a|*|b|`` commute exactly in floating point, so the result is
    bitwise symmetric in its arguments.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    low = (na < NORM_FLOOR) | (nb < NORM_FLOOR)
    if low.any():
        where = low.nonzero()[0].tolist()
        raise ZeroNormVector(f"hidden state norm below {NORM_FLOOR:g} at position {where}")
    dot = (a * b).sum(dim=-1)
    return (dot / (na * nb)).clamp(-1.0, 1.0)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise GraphDetached("loss has no recorded computation graph")
    loss.backward()


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    coords_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` is a zero-argument closure computing a scalar from ``params``.
    With ``coords_per_tensor`` set, only that many random coordinates of each
    tensor are probed; otherwise every coordinate is.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.detach().clone() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            n = flat.numel()
            if coords_per_tensor is None or coords_per_tensor >= n:
                idx = range(n)
            else:
                idx = rng.choice(n, size=coords_per_tensor, replace=False).tolist()
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(f())
                flat[i] = orig - step
                lo = float(f())
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NonFiniteValue(f"probe at coordinate {i} evaluated to a non-finite value")
                fd = (hi - lo) / (2.0 * step)
                ad = float(g.view(-1)[i])
                err = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
