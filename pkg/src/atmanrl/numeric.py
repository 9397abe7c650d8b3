"""Float64 tensor primitives on top of torch autograd.

Every tensor in the package is a float64 ``torch.Tensor``; this module adds the
contract checks the rest of the code relies on (shape errors that name both
operands, degenerate softmax rows, finite values) and a small AdamW.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class ContractError(ValueError):
    pass


class DimensionError(ContractError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class DegenerateRowError(ArithmeticError):
    def __init__(self, row: tuple[int, ...]):
        super().__init__(f"softmax row {row} is masked everywhere")
        self.row = row


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    check_finite(t)
    return t.requires_grad_(requires_grad)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {tuple(a.shape)} and {tuple(b.shape)} do not align")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise DimensionError(
            f"matmul batch dims of {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None
    return a @ b


def softmax_rows(h: torch.Tensor, additive_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row softmax of ``h + additive_mask``; mask entries may be ``-inf``."""
    scores = h if additive_mask is None else h + additive_mask
    dead = torch.isneginf(scores).all(dim=-1)
    if dead.any():
        idx = torch.nonzero(dead)[0]
        raise DegenerateRowError(tuple(int(i) for i in idx))
    return torch.softmax(scores, dim=-1)


def cross_entropy(logits: torch.Tensor, target_ids: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of ``target_ids`` under row-wise ``logits``."""
    targets = torch.as_tensor(target_ids, dtype=torch.long)
    if logits.dim() != 2 or logits.shape[0] != targets.numel():
        raise DimensionError(
            f"logits {tuple(logits.shape)} need one row per target ({targets.numel()})"
        )
    vocab = logits.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target ids {targets.tolist()} outside vocabulary of size {vocab}")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(1, targets[:, None]).mean()


def backward(scalar_loss: torch.Tensor) -> None:
    if scalar_loss.numel() != 1:
        raise ContractError(f"backward needs a scalar, got shape {tuple(scalar_loss.shape)}")
    scalar_loss.backward()


def digest(tensors: Mapping[str, torch.Tensor] | torch.nn.Module) -> str:
    """SHA-256 over names, shapes and float64 payloads, in name order."""
    if isinstance(tensors, torch.nn.Module):
        tensors = dict(tensors.named_parameters())
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.numpy().astype("<f8").tobytes())
    return h.hexdigest()


# -- AdamW --------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], state: AdamWState, lr: float,
               beta1: float, beta2: float, weight_decay: float, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        p.mul_(1.0 - lr * weight_decay)
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


class AdamW:
    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
                 lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8):
        if not lr >= 0 or not math.isfinite(lr):
            raise ContractError(f"learning rate must be finite and >= 0, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, self.state, self.lr, self.betas[0], self.betas[1],
                   self.weight_decay, self.eps)
