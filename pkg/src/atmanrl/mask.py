"""Per-sample optimization of the additive attention mask and the saliency reward.

The mask starts at ``init_c`` on every causal entry of a CoT column, which suppresses
attention to the chain of thought. AdamW then re-enables whatever the gold answer
needs. Entries are clamped at ``upper_clamp`` and scaled by ``scale`` before they
reach the attention scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .model import Decoder, pad_batch, teacher_forced
from .numeric import DTYPE, AdamWState, ContractError, NonFiniteError, adamw_step
from .tasks import SegmentedSequence


@dataclass
class AtManMask:
    raw: torch.Tensor          # (S,S), trainable
    region: torch.Tensor       # (S,S) bool: lower triangle restricted to CoT columns
    cot_columns: tuple[int, ...]
    init_c: float = -0.4
    scale: float = 10.0
    upper_clamp: float = 0.0

    def effective(self) -> torch.Tensor:
        clamped = torch.where(self.raw < self.upper_clamp, self.raw,
                              torch.full_like(self.raw, self.upper_clamp))
        return self.scale * clamped * self.region

    @property
    def size(self) -> int:
        return self.raw.shape[-1]


@dataclass(frozen=True)
class MaskOptConfig:
    steps: int = 200
    lr: float = 1e-3
    beta1: float = 0.6
    beta2: float = 0.9999
    weight_decay: float = 0.05
    eps: float = 1e-8
    init_c: float = -0.4
    scale: float = 10.0
    upper_clamp: float = 0.0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if not self.eps > 0:
            raise ContractError(f"eps must be > 0, got {self.eps}")
        if not self.init_c < 0:
            raise ContractError(f"init_c must be < 0, got {self.init_c}")


@dataclass
class MaskTrainResult:
    mask: AtManMask
    loss_trace: list[float]
    reward: float
    token_scores: list[float]


def init_mask(seq: SegmentedSequence, c: float = -0.4, scale: float = 10.0,
              upper_clamp: float = 0.0) -> AtManMask:
    if len(seq.cot) == 0:
        raise ContractError("empty CoT span: the AtMan mask has no domain")
    if not c < 0:
        raise ContractError(f"mask initialization must be negative, got {c}")
    S = len(seq)
    cols = torch.zeros(S, dtype=torch.bool)
    cols[seq.cot.start:seq.cot.stop] = True
    region = torch.ones(S, S, dtype=torch.bool).tril() & cols[None, :]
    raw = torch.where(region, torch.tensor(c, dtype=DTYPE), torch.tensor(0.0, dtype=DTYPE))
    return AtManMask(raw.requires_grad_(True), region, tuple(seq.cot), c, scale, upper_clamp)


def _column_means(mask: AtManMask) -> torch.Tensor:
    if not mask.cot_columns:
        raise ContractError("empty CoT span: the AtMan mask has no domain")
    with torch.no_grad():
        normed = mask.effective() / (mask.scale * mask.init_c)
        cols = list(mask.cot_columns)
        sub = normed[:, cols]
        count = mask.region[:, cols].sum(dim=0)
        return sub.sum(dim=0) / count


def saliency_reward(mask: AtManMask) -> float:
    """Mean normalized mask value over each CoT column's causal rows, then over columns.

    1 for an untouched mask, 0 once every trainable entry reaches zero.
    """
    return float(_column_means(mask).mean())


def token_saliency_scores(mask: AtManMask) -> list[float]:
    """1 - per-column normalized mean, one score per CoT token; higher = more re-enabled."""
    return (1.0 - _column_means(mask)).tolist()


def optimize_mask(model: Decoder, seq: SegmentedSequence, gold_answer: Sequence[int],
                  cfg: MaskOptConfig = MaskOptConfig()) -> MaskTrainResult:
    return optimize_masks(model, [seq], [gold_answer], cfg)[0]


def optimize_masks(model: Decoder, seqs: Sequence[SegmentedSequence],
                   gold_answers: Sequence[Sequence[int]],
                   cfg: MaskOptConfig = MaskOptConfig()) -> list[MaskTrainResult]:
    """Optimize one mask per sequence, batched.

    The summed per-sample losses give each mask exactly its own gradient, and AdamW
    is elementwise, so the batch is equivalent to independent runs. Model parameters
    are left untouched: their ``requires_grad`` flags are restored on exit.
    """
    if len(seqs) != len(gold_answers):
        raise ContractError("one gold answer per sequence")
    tfs = [teacher_forced(s, g) for s, g in zip(seqs, gold_answers)]
    B = len(tfs)
    S = max(len(t) for t in tfs)
    raw = torch.zeros(B, S, S, dtype=DTYPE)
    region = torch.zeros(B, S, S, dtype=torch.bool)
    for b, tf in enumerate(tfs):
        m = init_mask(tf, cfg.init_c, cfg.scale, cfg.upper_clamp)
        n = len(tf)
        raw[b, :n, :n] = m.raw.detach()
        region[b, :n, :n] = m.region
    raw.requires_grad_(True)
    batched = AtManMask(raw, region, (), cfg.init_c, cfg.scale, cfg.upper_clamp)

    ids = pad_batch([t.ids for t in tfs])
    pos_b, pos_t, tgt = [], [], []
    for b, tf in enumerate(tfs):
        for p in range(tf.answer.start, tf.answer.stop):
            pos_b.append(b)
            pos_t.append(p - 1)
            tgt.append(tf.ids[p])
    pos_b_t = torch.as_tensor(pos_b)
    pos_t_t = torch.as_tensor(pos_t)
    tgt_t = torch.as_tensor(tgt)
    n_ans = torch.bincount(pos_b_t, minlength=B).to(DTYPE)

    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    state = AdamWState()
    traces: list[list[float]] = [[] for _ in range(B)]
    try:
        for step in range(cfg.steps + 1):
            logits = model(ids, batched.effective())
            logp = torch.log_softmax(logits[pos_b_t, pos_t_t], dim=-1)
            nll = -logp.gather(1, tgt_t[:, None])[:, 0]
            per_sample = torch.zeros(B, dtype=DTYPE).index_add(0, pos_b_t, nll) / n_ans
            if not torch.isfinite(per_sample).all():
                raise NonFiniteError(f"mask loss became non-finite at step {step}")
            for b, v in enumerate(per_sample.tolist()):
                traces[b].append(v)
            if step == cfg.steps:
                break
            raw.grad = None
            per_sample.sum().backward()
            adamw_step({"mask": raw}, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay,
                       cfg.eps)
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
    raw.grad = None

    results = []
    for b, tf in enumerate(tfs):
        n = len(tf)
        m = AtManMask(raw.detach()[b, :n, :n].clone(), region[b, :n, :n].clone(),
                      tuple(tf.cot), cfg.init_c, cfg.scale, cfg.upper_clamp)
        results.append(MaskTrainResult(m, traces[b], saliency_reward(m),
                                       token_saliency_scores(m)))
    return results
