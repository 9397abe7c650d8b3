"""Group-relative policy optimization with outcome + saliency rewards."""

from __future__ import annotations

import csv
import hashlib
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .mask import MaskOptConfig, MaskTrainResult, optimize_masks
from .model import (Decoder, Rollout, generated_log_probs, sample_group,
                    save_checkpoint)
from .numeric import AdamW, ContractError, NonFiniteError
from .tasks import TaskInstance, answers_match

__all__ = [
    "RLConfig", "RewardRecord", "Rollout", "outcome_reward", "group_rewards",
    "grpo_loss", "train", "LOG_COLUMNS",
]

LOG_COLUMNS = ("batch", "epoch", "mean_outcome", "mean_saliency", "mean_cot_len",
               "pass@1", "wallclock_s")


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 8
    max_new: int = 1024
    epochs: int = 8
    lr: float = 1e-6
    clip_eps: float = 0.2
    grad_passes: int = 2
    minibatch: int = 2          # rollouts per optimizer step
    queries_per_batch: int = 8
    saliency_weight: float = 1.0
    temperature: float = 1.0
    ratio_mode: str = "mean"    # "mean": length-normalized log-ratio; "sequence": summed
    std_normalize: bool = False
    kl_coef: float = 0.0
    mask_target: str = "gold"   # "gold" or "emitted"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.group_size < 2:
            raise ContractError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ContractError("clip_eps must lie in (0, 1)")
        if self.ratio_mode not in ("mean", "sequence"):
            raise ContractError(f"unknown ratio_mode {self.ratio_mode!r}")
        if self.mask_target not in ("gold", "emitted"):
            raise ContractError(f"unknown mask_target {self.mask_target!r}")
        for name in ("max_new", "epochs", "grad_passes", "minibatch", "queries_per_batch"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")


@dataclass(frozen=True)
class RewardRecord:
    outcome: float
    saliency: float
    saliency_weight: float
    total: float
    group_baseline: float
    advantage: float


def outcome_reward(rollout: Rollout, gold: str) -> float:
    return 0.0 if answers_match(rollout.answer, gold) else -1.0


def group_rewards(rollouts: Sequence[Rollout], gold: str,
                  mask_results: Sequence[MaskTrainResult | float | None] | None,
                  weight: float = 1.0, std_normalize: bool = False) -> list[RewardRecord]:
    """Outcome + weighted saliency, centered on the group mean.

    ``mask_results`` entries may be MaskTrainResult, a bare saliency float, or None
    (no saliency computed, counts as 0). Passing None for the whole list means no
    rollout has a saliency value.
    """
    if len(rollouts) < 2:
        raise ContractError("a group needs at least two rollouts")
    if mask_results is None:
        mask_results = [None] * len(rollouts)
    if len(mask_results) != len(rollouts):
        raise ContractError(f"{len(mask_results)} mask results for {len(rollouts)} rollouts")
    outcomes = [outcome_reward(r, gold) for r in rollouts]
    sal = [m.reward if isinstance(m, MaskTrainResult) else (0.0 if m is None else float(m))
           for m in mask_results]
    totals = [o + weight * s for o, s in zip(outcomes, sal)]
    baseline = math.fsum(totals) / len(totals)
    adv = [t - baseline for t in totals]
    if std_normalize:
        std = math.sqrt(math.fsum(a * a for a in adv) / len(adv))
        adv = [a / (std + 1e-8) for a in adv]
    return [RewardRecord(o, s, weight, t, baseline, a)
            for o, s, t, a in zip(outcomes, sal, totals, adv)]


def grpo_loss(policy: Decoder, rollouts: Sequence[Rollout], records: Sequence[RewardRecord],
              clip_eps: float = 0.2, ratio_mode: str = "mean", temperature: float = 1.0,
              ref_policy: Decoder | None = None, kl_coef: float = 0.0) -> torch.Tensor:
    """Clipped surrogate -(1/N) sum min(r A, clip(r, 1-eps, 1+eps) A)."""
    if len(rollouts) != len(records):
        raise ContractError("one reward record per rollout")
    new = generated_log_probs(policy, rollouts, temperature)
    terms = []
    for r, rec, lp in zip(rollouts, records, new):
        diff = lp - torch.as_tensor(r.old_logprobs, dtype=lp.dtype)
        log_ratio = diff.mean() if ratio_mode == "mean" else diff.sum()
        ratio = torch.exp(log_ratio)
        if not torch.isfinite(ratio):
            raise NonFiniteError(f"non-finite likelihood ratio for rollout {r.query_id!r}")
        A = rec.advantage
        terms.append(torch.minimum(ratio * A, ratio.clamp(1 - clip_eps, 1 + clip_eps) * A))
    loss = -torch.stack(terms).mean()
    if kl_coef and ref_policy is not None:
        with torch.no_grad():
            ref = generated_log_probs(ref_policy, rollouts, temperature)
        # k3 estimator of KL(pi || ref), token-averaged per rollout
        kls = [(torch.exp(q - p) - (q - p) - 1).mean() for p, q in zip(new, ref)]
        loss = loss + kl_coef * torch.stack(kls).mean()
    return loss


# -- training loop --------------------------------------------------------------------

def derive_seed(*parts) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


@dataclass
class GroupResult:
    rollouts: list[Rollout]
    saliency: list[float | None]


def collect_group(model: Decoder, task: TaskInstance, query_id: str, rl: RLConfig,
                  mask_cfg: MaskOptConfig, seed: int) -> GroupResult:
    """Sample one rollout group and, when the saliency weight is non-zero, train masks."""
    prompt = task.prompt_ids()
    rollouts = sample_group(model, prompt, rl.group_size, rl.max_new, rl.temperature,
                            seed, query_id)
    saliency: list[float | None] = [None] * len(rollouts)
    if rl.saliency_weight != 0:
        idx = [i for i, r in enumerate(rollouts) if len(r.segments.cot)]
        gold = task.answer_ids()
        targets = []
        for i in idx:
            emitted = rollouts[i].segments.answer_ids
            use_emitted = rl.mask_target == "emitted" and len(emitted) > 0
            targets.append(list(emitted) if use_emitted else gold)
        if idx:
            res = optimize_masks(model, [rollouts[i].segments for i in idx], targets, mask_cfg)
            for i, m in zip(idx, res):
                saliency[i] = m.reward
        # empty CoT: no mask domain, saliency recorded as 0
        saliency = [0.0 if s is None else s for s in saliency]
    return GroupResult(rollouts, saliency)


_WORKER_MODEL: Decoder | None = None


def _worker_init() -> None:
    torch.set_num_threads(1)


def _worker_collect(args):
    cfg, state, task, qid, rl, mask_cfg, seed = args
    global _WORKER_MODEL
    if _WORKER_MODEL is None or _WORKER_MODEL.cfg != cfg:
        _WORKER_MODEL = Decoder(cfg)
    _WORKER_MODEL.load_state_dict(state)
    return collect_group(_WORKER_MODEL, task, qid, rl, mask_cfg, seed)


@contextmanager
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _mean(xs):
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else float("nan")


def train(model: Decoder, tasks: Sequence[TaskInstance], rl: RLConfig,
          mask_cfg: MaskOptConfig = MaskOptConfig(), seed: int = 0,
          out_dir: str | Path | None = None, workers: int = 1,
          on_log: Callable[[dict], None] | None = None,
          record_wallclock: bool = True) -> list[dict]:
    """GRPO over ``tasks`` for ``rl.epochs`` epochs, updating ``model`` in place.

    Each batch samples a rollout group per query, trains one mask per rollout when
    the saliency weight is non-zero, then runs ``rl.grad_passes`` shuffled passes of
    ``rl.minibatch``-rollout AdamW steps. Results do not depend on ``workers``:
    every group's seed is derived from (seed, epoch, query) and groups are
    reduced in query order.
    """
    if not tasks:
        raise ContractError("task corpus is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        with open(log_path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)
    opt = AdamW(model.named_parameters(), lr=rl.lr, betas=(0.9, 0.999),
                weight_decay=rl.weight_decay)
    ref = None
    if rl.kl_coef:
        ref = Decoder(model.cfg)
        ref.load_state_dict(model.state_dict())
    pool = ProcessPoolExecutor(workers, initializer=_worker_init) if workers > 1 else None
    rows: list[dict] = []
    t0 = time.perf_counter()
    batch_idx = 0
    try:
        with _single_thread():
            for epoch in range(rl.epochs):
                order = list(range(len(tasks)))
                random.Random(derive_seed(seed, "order", epoch)).shuffle(order)
                for start in range(0, len(order), rl.queries_per_batch):
                    chunk = order[start:start + rl.queries_per_batch]
                    seeds = [derive_seed(seed, "group", epoch, q) for q in chunk]
                    if pool is None:
                        groups = [collect_group(model, tasks[q], str(q), rl, mask_cfg, s)
                                  for q, s in zip(chunk, seeds)]
                    else:
                        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                        jobs = [(model.cfg, state, tasks[q], str(q), rl, mask_cfg, s)
                                for q, s in zip(chunk, seeds)]
                        groups = list(pool.map(_worker_collect, jobs))
                    rows.append(_update(model, opt, ref, tasks, chunk, groups, rl, seed,
                                        epoch, batch_idx, t0, record_wallclock))
                    if out is not None:
                        with open(log_path, "a", newline="") as f:
                            csv.writer(f).writerow([rows[-1][c] for c in LOG_COLUMNS])
                    if on_log is not None:
                        on_log(rows[-1])
                    batch_idx += 1
                if out is not None:
                    save_checkpoint(model, out / "checkpoints" / f"epoch_{epoch:03d}.ckpt")
    except NonFiniteError:
        if out is not None:
            save_checkpoint(model, out / "crash_state.ckpt")
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def _update(model, opt, ref, tasks, chunk, groups, rl, seed, epoch, batch_idx, t0,
            record_wallclock):
    flat: list[tuple[Rollout, RewardRecord]] = []
    outcomes, saliencies, cot_lens, first_correct = [], [], [], []
    for q, g in zip(chunk, groups):
        gold = tasks[q].gold_answer
        sal = g.saliency if rl.saliency_weight != 0 else None
        recs = group_rewards(g.rollouts, gold, sal, rl.saliency_weight, rl.std_normalize)
        flat += list(zip(g.rollouts, recs))
        outcomes += [r.outcome for r in recs]
        if sal is not None:
            saliencies += [r.saliency for r in recs]
        cot_lens += [len(r.segments.cot) for r in g.rollouts]
        first_correct.append(recs[0].outcome == 0.0)
    frozen = [r.logprob_digest() for r, _ in flat]
    rng = random.Random(derive_seed(seed, "minibatch", batch_idx))
    for _ in range(rl.grad_passes):
        if [r.logprob_digest() for r, _ in flat] != frozen:
            raise ContractError("old log-probs changed between gradient passes")
        perm = list(range(len(flat)))
        rng.shuffle(perm)
        for s in range(0, len(perm), rl.minibatch):
            mb = [flat[i] for i in perm[s:s + rl.minibatch]]
            loss = grpo_loss(model, [r for r, _ in mb], [rec for _, rec in mb], rl.clip_eps,
                             rl.ratio_mode, rl.temperature, ref, rl.kl_coef)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite GRPO loss in batch {batch_idx}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    opt.zero_grad()
    return {
        "batch": batch_idx,
        "epoch": epoch,
        "mean_outcome": _mean(outcomes),
        "mean_saliency": _mean(saliencies),
        "mean_cot_len": _mean(cot_lens),
        "pass@1": _mean(first_correct),
        "wallclock_s": round(time.perf_counter() - t0, 3) if record_wallclock else 0.0,
    }
