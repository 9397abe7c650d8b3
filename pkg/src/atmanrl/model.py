"""Decoder-only transformer whose attention takes an additive pre-softmax mask.

One mask matrix is shared by every layer and head. Causal masking is additive
``-inf`` above the diagonal, so rows always keep at least the diagonal entry.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .numeric import (DTYPE, AdamW, ContractError, DimensionError, check_finite,
                      matmul, softmax_rows)
from .tasks import VOCAB, SegmentedSequence, Vocabulary, segment


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(VOCAB)
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    max_seq: int = 256

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_seq"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc = nn.Linear(d, 4 * d, dtype=DTYPE)
        self.out = nn.Linear(4 * d, d, dtype=DTYPE)

    def forward(self, x, bias, attn_log=None):
        x = x + attention_with_mask(self.ln1(x), self, bias, attn_log)
        return x + self.out(nn.functional.gelu(self.fc(self.ln2(x))))


def attention_with_mask(x: torch.Tensor, layer: Block, bias: torch.Tensor,
                        attn_log: list | None = None) -> torch.Tensor:
    """softmax(QK^T/sqrt(d) + bias) V per head.

    ``bias`` is the causal mask plus the AtMan mask, shaped (S,S) or (B,1,S,S).
    """
    B, S, D = x.shape
    h = layer.n_heads
    q, k, v = layer.qkv(x).split(D, dim=-1)
    q, k, v = (t.view(B, S, h, D // h).transpose(1, 2) for t in (q, k, v))
    scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(D // h)
    weights = softmax_rows(scores, bias)
    if attn_log is not None:
        attn_log.append(weights)
    out = matmul(weights, v).transpose(1, 2).reshape(B, S, D)
    return layer.proj(out)


_CAUSAL: dict[int, torch.Tensor] = {}


def causal_bias(S: int) -> torch.Tensor:
    if S not in _CAUSAL:
        m = torch.full((S, S), -math.inf, dtype=DTYPE).triu(1)
        _CAUSAL[S] = m
    return _CAUSAL[S]


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False, dtype=DTYPE)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.02)
            # residual projections scaled by depth
            for blk in self.blocks:
                for lin in (blk.proj, blk.out):
                    lin.weight.mul_(1.0 / math.sqrt(2 * self.cfg.n_layers))

    def forward(self, tokens, atman_mask: torch.Tensor | None = None,
                attn_log: list | None = None) -> torch.Tensor:
        """Next-token logits, (S,V) for a 1-D token list or (B,S,V) for a batch.

        ``atman_mask`` is the *effective* additive mask, (S,S) or (B,S,S).
        """
        ids = torch.as_tensor(tokens, dtype=torch.long)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids[None]
        B, S = ids.shape
        if S > self.cfg.max_seq:
            raise ContractError(f"sequence length {S} exceeds max_seq {self.cfg.max_seq}")
        bias = causal_bias(S)
        if atman_mask is not None:
            if atman_mask.shape[-2:] != (S, S) or atman_mask.dim() not in (2, 3):
                raise DimensionError(
                    f"AtMan mask shape {tuple(atman_mask.shape)} does not match ({S}, {S})"
                )
            if atman_mask.dim() == 3:
                if atman_mask.shape[0] != B:
                    raise DimensionError(f"AtMan mask batch {atman_mask.shape[0]} != {B}")
                bias = (bias + atman_mask)[:, None]
            else:
                bias = bias + atman_mask
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(S))
        for blk in self.blocks:
            x = blk(x, bias, attn_log)
        logits = self.unembed(self.ln_f(x))
        return logits[0] if squeeze else logits


# -- teacher forcing -----------------------------------------------------------------

def teacher_forced(seq: SegmentedSequence, gold_answer: Sequence[int],
                   vocab: Vocabulary = VOCAB) -> SegmentedSequence:
    """prompt + CoT + delimiter + gold answer, the layout the mask loss scores."""
    if len(seq.cot) == 0:
        raise ContractError("empty CoT span: the AtMan mask has no domain")
    if len(gold_answer) == 0:
        raise ContractError("gold answer must be non-empty")
    ids = list(seq.prompt_ids) + list(seq.cot_ids) + [vocab.delimiter_id] + list(gold_answer)
    return segment(ids, prompt_len=len(seq.prompt), vocab=vocab)


def answer_log_probs(model: Decoder, seq: SegmentedSequence, gold_answer: Sequence[int],
                     atman_mask: torch.Tensor | None = None) -> torch.Tensor:
    """log P(y_n | prompt, CoT, y_<n, mask) for every gold answer token."""
    tf = teacher_forced(seq, gold_answer)
    logits = model(list(tf.ids), atman_mask)
    pos = torch.arange(tf.answer.start - 1, tf.answer.stop - 1)
    logp = torch.log_softmax(logits[pos], dim=-1)
    return logp.gather(1, torch.as_tensor(list(gold_answer))[:, None])[:, 0]


def pad_batch(id_lists: Sequence[Sequence[int]], pad_id: int = VOCAB.pad_id) -> torch.Tensor:
    S = max(len(x) for x in id_lists)
    out = torch.full((len(id_lists), S), pad_id, dtype=torch.long)
    for i, x in enumerate(id_lists):
        out[i, :len(x)] = torch.as_tensor(list(x), dtype=torch.long)
    return out


# -- sampling ---------------------------------------------------------------------

@dataclass(frozen=True)
class Rollout:
    """One sampled completion with its frozen sampling-policy log-probs."""

    query_id: str
    tokens: tuple[int, ...]
    prompt_len: int
    old_logprobs: tuple[float, ...]  # one per generated token, EOS included
    truncated: bool
    segments: SegmentedSequence = field(compare=False, repr=False)

    @property
    def generated(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len:]

    @property
    def cot_ids(self) -> tuple[int, ...]:
        return self.segments.cot_ids

    @property
    def answer(self) -> str | None:
        if self.segments.delimiter is None:
            return None
        return VOCAB.detokenize(self.segments.answer_ids)

    def logprob_digest(self) -> str:
        return hashlib.sha256(np.asarray(self.old_logprobs, dtype="<f8").tobytes()).hexdigest()


def make_rollout(query_id: str, tokens: Sequence[int], prompt_len: int,
                 old_logprobs: Sequence[float], vocab: Vocabulary = VOCAB) -> Rollout:
    tokens = tuple(int(t) for t in tokens)
    if len(old_logprobs) != len(tokens) - prompt_len:
        raise ContractError("old log-probs must cover every generated token")
    seg = segment(tokens, prompt_len, vocab)
    truncated = seg.delimiter is None or vocab.eos_id not in tokens[prompt_len:]
    return Rollout(query_id, tokens, prompt_len, tuple(float(x) for x in old_logprobs),
                   truncated, seg)


@torch.no_grad()
def sample_group(model: Decoder, prompt: Sequence[int], n: int, max_new: int,
                 temperature: float, seed: int, query_id: str = "",
                 vocab: Vocabulary = VOCAB) -> list[Rollout]:
    """Sample ``n`` completions of ``prompt`` in one batch.

    ``temperature == 0`` is greedy decoding. Generation stops at EOS or after
    ``max_new`` tokens, capped so the sequence fits in ``max_seq``.
    """
    if temperature < 0:
        raise ContractError(f"temperature must be >= 0, got {temperature}")
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")
    P = len(prompt)
    max_new = min(max_new, model.cfg.max_seq - P)
    if max_new < 1:
        raise ContractError(f"prompt of length {P} leaves no room under max_seq")
    gen = torch.Generator().manual_seed(seed)
    ids = torch.as_tensor(list(prompt), dtype=torch.long).repeat(n, 1)
    done = torch.zeros(n, dtype=torch.bool)
    lps = []
    for _ in range(max_new):
        logits = model(ids)[:, -1, :]
        if temperature == 0:
            logp = torch.log_softmax(logits, dim=-1)
            tok = logp.argmax(dim=-1)
        else:
            logp = torch.log_softmax(logits / temperature, dim=-1)
            tok = torch.multinomial(logp.exp(), 1, generator=gen)[:, 0]
        tok = torch.where(done, torch.full_like(tok, vocab.pad_id), tok)
        lps.append(logp.gather(1, tok[:, None])[:, 0])
        ids = torch.cat([ids, tok[:, None]], dim=1)
        done |= tok == vocab.eos_id
        if done.all():
            break
    lp = torch.stack(lps, dim=1)
    out = []
    for i in range(n):
        gen_ids = ids[i, P:].tolist()
        if vocab.eos_id in gen_ids:
            gen_ids = gen_ids[:gen_ids.index(vocab.eos_id) + 1]
        out.append(make_rollout(query_id, list(prompt) + gen_ids, P,
                                lp[i, :len(gen_ids)].tolist(), vocab))
    return out


def sample_rollout(model: Decoder, prompt: Sequence[int], max_new: int, temperature: float,
                   rng_seed: int, query_id: str = "") -> Rollout:
    return sample_group(model, prompt, 1, max_new, temperature, rng_seed, query_id)[0]


def generated_log_probs(model: Decoder, rollouts: Sequence[Rollout],
                        temperature: float = 1.0) -> list[torch.Tensor]:
    """Current-policy log-probs of each rollout's generated tokens (differentiable)."""
    batch = pad_batch([r.tokens for r in rollouts])
    logits = model(batch)
    if temperature not in (0, 1):
        logits = logits / temperature
    logp = torch.log_softmax(logits, dim=-1)
    out = []
    for i, r in enumerate(rollouts):
        pos = torch.arange(r.prompt_len - 1, len(r.tokens) - 1)
        tgt = torch.as_tensor(r.generated, dtype=torch.long)
        out.append(logp[i, pos].gather(1, tgt[:, None])[:, 0])
    return out


# -- supervised warm start -------------------------------------------------------------

def fit_supervised(model: Decoder, sequences: Sequence[Sequence[int]],
                   loss_starts: Sequence[int], steps: int, lr: float = 3e-3,
                   batch_size: int = 32, seed: int = 0, weight_decay: float = 0.0,
                   log_every: int = 0) -> list[float]:
    """Next-token cross-entropy on each sequence from ``loss_starts[i]`` onward.

    Learning rate decays linearly to 10% of ``lr`` over ``steps``.
    """
    rng = random.Random(seed)
    opt = AdamW(model.named_parameters(), lr=lr, betas=(0.9, 0.98), weight_decay=weight_decay)
    order: list[int] = []
    losses = []
    for step in range(steps):
        if len(order) < batch_size:
            perm = list(range(len(sequences)))
            rng.shuffle(perm)
            order += perm
        idx, order = order[:batch_size], order[batch_size:]
        batch = pad_batch([sequences[i] for i in idx])
        S = batch.shape[1]
        weight = torch.zeros(len(idx), S - 1, dtype=DTYPE)
        for row, i in enumerate(idx):
            weight[row, max(loss_starts[i] - 1, 0):len(sequences[i]) - 1] = 1.0
        logits = model(batch[:, :-1])
        logp = torch.log_softmax(logits, dim=-1).gather(2, batch[:, 1:, None])[..., 0]
        loss = -(logp * weight).sum() / weight.sum()
        check_finite(loss.detach(), f"supervised loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.lr = lr * (1.0 - 0.9 * step / max(steps - 1, 1))
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"sft step {step} loss {losses[-1]:.4f}", flush=True)
    opt.zero_grad()
    return losses


# -- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = b"ATMNCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: Decoder, path: str | Path) -> None:
    entries, payload, offset = [], [], 0
    for name, p in model.state_dict().items():
        data = p.detach().cpu().contiguous().numpy().astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset,
                        "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = json.dumps({"format_version": CKPT_VERSION, "dtype": "float64",
                         "byteorder": "little", "config": asdict(model.cfg),
                         "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header)
        for data in payload:
            f.write(data)


def load_checkpoint(path: str | Path) -> Decoder:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    if header["format_version"] != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported format version {header['format_version']}")
    model = Decoder(ModelConfig(**header["config"]))
    base = 16 + hlen
    state = {}
    for e in header["params"]:
        raw = blob[base + e["offset"]:base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float64))
    model.load_state_dict(state)
    return model
