"""pass@k, CoT length/composition, saliency localization and run reports."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .grpo import derive_seed
from .mask import MaskOptConfig, optimize_masks
from .model import Decoder, sample_group
from .numeric import ContractError
from .tasks import VOCAB, TaskInstance, Vocabulary, answers_match

EVAL_COLUMNS = ("query_id", "rollout_id", "correct", "cot_len", "pct_numbers",
                "pct_filler", "pct_symbols", "saliency_reward")

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "runs", "deltas"],
    "properties": {
        "schema_version": {"const": 1},
        "runs": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["saliency_weight", "batches", "final", "curve", "eval"],
                "properties": {
                    "saliency_weight": {"type": ["number", "null"]},
                    "batches": {"type": "integer"},
                    "final": {"type": ["object", "null"]},
                    "curve": {"type": "array", "items": {"type": "object"}},
                    "eval": {"type": ["object", "null"]},
                },
            },
        },
        "deltas": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": ["number", "null"]},
            },
        },
    },
}


def _correct(item, gold: str) -> bool:
    if isinstance(item, (bool, np.bool_)):
        return bool(item)
    return answers_match(item.answer, gold)


def pass_at_k(rollout_groups: Sequence[Sequence], golds: Sequence[str], k: int) -> float:
    """Fraction of queries with a correct answer among their first ``k`` rollouts.

    Group entries may be rollouts (checked against the gold answer) or booleans.
    """
    if len(rollout_groups) != len(golds):
        raise ContractError("one gold answer per rollout group")
    if not rollout_groups:
        raise ContractError("no rollout groups")
    hits = 0
    for group, gold in zip(rollout_groups, golds):
        if len(group) < k:
            raise ContractError(f"group of size {len(group)} is smaller than k={k}")
        hits += any(_correct(item, gold) for item in group[:k])
    return hits / len(rollout_groups)


def _cot(item) -> Sequence[int]:
    return item.cot_ids if hasattr(item, "cot_ids") else item


def composition_stats(rollouts: Iterable, vocab: Vocabulary = VOCAB) -> dict[str, float]:
    """Mean CoT length and pooled class percentages over all CoT tokens.

    Accepts rollouts, segmented sequences, or bare CoT id lists.
    """
    lengths, counts = [], {"number": 0, "filler": 0, "symbol": 0}
    total = 0
    for item in rollouts:
        cot = _cot(item)
        lengths.append(len(cot))
        for t in cot:
            cls = vocab.token_class(t)
            if cls in counts:
                counts[cls] += 1
        total += len(cot)

    def pct(n):
        return 100.0 * n / total if total else 0.0

    return {
        "mean_cot_tokens": float(np.mean(lengths)) if lengths else 0.0,
        "pct_numbers": pct(counts["number"]),
        "pct_filler": pct(counts["filler"]),
        "pct_symbols": pct(counts["symbol"]),
    }


def saliency_localization(scores: Sequence[float], truth: Iterable[int]) -> dict[str, float]:
    """Ranking AUC (ties count one half) and precision at |truth|."""
    s = np.asarray(scores, dtype=np.float64)
    truth = set(int(i) for i in truth)
    if not truth or len(truth) >= len(s):
        raise ContractError("AUC undefined: truth must be a non-empty proper subset")
    if min(truth) < 0 or max(truth) >= len(s):
        raise ContractError("truth positions outside the score list")
    member = np.zeros(len(s), dtype=bool)
    member[list(truth)] = True
    pos, neg = s[member], s[~member]
    diff = pos[:, None] - neg[None, :]
    auc = float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)
    k = len(truth)
    top = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
    return {"auc": auc, "precision_at_k": sum(member[top]) / k}


@torch.no_grad()
def teacher_forced_answer_accuracy(model: Decoder, tasks: Sequence[TaskInstance]) -> float:
    """Fraction of instances whose argmax answer tokens match gold under the gold CoT."""
    hits = 0
    for t in tasks:
        ids = t.full_ids()
        n = len(t.answer_ids())
        start = len(ids) - 1 - n
        pred = model(ids)[start - 1:start - 1 + n].argmax(dim=-1).tolist()
        hits += pred == t.answer_ids()
    return hits / len(tasks)


def relative_change(baseline: float, treated: float) -> float | None:
    if baseline == 0:
        return None
    return 100.0 * (treated - baseline) / baseline


def delta_table(baseline: Mapping[str, float], treated: Mapping[str, float]) -> dict:
    """Percentage change of every metric the two runs share."""
    return {k: relative_change(baseline[k], treated[k]) for k in baseline if k in treated}


# -- checkpoint evaluation ----------------------------------------------------------------

def _class_pcts(cot, vocab=VOCAB):
    if not cot:
        return ("", "", "")
    s = composition_stats([cot], vocab)
    return (s["pct_numbers"], s["pct_filler"], s["pct_symbols"])


def evaluate(model: Decoder, tasks: Sequence[TaskInstance], k: int = 4,
             temperature: float = 1.0, seed: int = 0, max_new: int = 1024,
             mask_cfg: MaskOptConfig | None = None) -> tuple[list[dict], dict]:
    """Sample ``k`` rollouts per query; per-rollout rows and a summary.

    With ``mask_cfg`` every rollout with a non-empty CoT also gets a saliency reward.
    """
    rows, groups, golds, all_rollouts, rewards = [], [], [], [], []
    for q, task in enumerate(tasks):
        rs = sample_group(model, task.prompt_ids(), k, max_new, temperature,
                          derive_seed(seed, "eval", q), str(q))
        sal: list[float | str] = [""] * k
        if mask_cfg is not None:
            idx = [i for i, r in enumerate(rs) if len(r.segments.cot)]
            if idx:
                res = optimize_masks(model, [rs[i].segments for i in idx],
                                     [task.answer_ids()] * len(idx), mask_cfg)
                for i, m in zip(idx, res):
                    sal[i] = m.reward
                    rewards.append(m.reward)
        for i, r in enumerate(rs):
            pn, pf, ps = _class_pcts(r.cot_ids)
            rows.append({"query_id": q, "rollout_id": i,
                         "correct": int(answers_match(r.answer, task.gold_answer)),
                         "cot_len": len(r.cot_ids), "pct_numbers": pn, "pct_filler": pf,
                         "pct_symbols": ps, "saliency_reward": sal[i]})
        groups.append(rs)
        golds.append(task.gold_answer)
        all_rollouts += rs
    summary = {"n_queries": len(tasks), "k": k, f"pass@{k}": pass_at_k(groups, golds, k),
               "pass@1": pass_at_k(groups, golds, 1)}
    summary.update(composition_stats(all_rollouts))
    if rewards:
        summary["mean_saliency_reward"] = float(np.mean(rewards))
        summary["frac_reward_above_1"] = float(np.mean([r > 1 for r in rewards]))
    return rows, summary


def write_eval(rows: Sequence[Mapping], summary: Mapping, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# -- reports ----------------------------------------------------------------------------

CURVE_KEYS = ("batch", "epoch", "mean_outcome", "mean_saliency", "mean_cot_len", "pass@1")


def _num(v):
    if v in ("", None):
        return None
    x = float(v)
    if math.isnan(x):
        return None
    return int(x) if x.is_integer() and abs(x) < 2**53 and "." not in str(v) else x


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(f)]


def summarize_run(log: Sequence[Mapping], eval_summary: Mapping | None,
                  saliency_weight: float | None) -> dict:
    curve = [{k: row.get(k) for k in CURVE_KEYS} for row in log]
    return {"saliency_weight": saliency_weight, "batches": len(log),
            "final": dict(curve[-1]) if curve else None, "curve": curve,
            "eval": dict(eval_summary) if eval_summary else None}


def report(runs: Mapping[str, Mapping], out: str | Path) -> dict:
    """Write ``summary.json`` and ``summary.csv`` for ``runs`` (name -> summarize_run dict).

    Deltas compare every run against the first run whose saliency weight is 0.
    """
    names = sorted(runs)
    base = next((n for n in names if runs[n]["saliency_weight"] == 0), None)
    deltas = {}
    if base is not None:
        for n in names:
            if n == base:
                continue
            b = _metrics(runs[base])
            t = _metrics(runs[n])
            deltas[n] = delta_table(b, t)
    summary = {"schema_version": 1, "runs": {n: runs[n] for n in names}, "deltas": deltas}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    metric_keys = sorted({k for n in names for k in _metrics(runs[n])})
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "saliency_weight"] + metric_keys)
    for n in names:
        m = _metrics(runs[n])
        w.writerow([n, runs[n]["saliency_weight"]] + [m.get(k, "") for k in metric_keys])
    (out / "summary.csv").write_text(buf.getvalue())
    return summary


def _metrics(run: Mapping) -> dict[str, float]:
    """Flat metric view: eval summary when present, else the final log row."""
    src = run.get("eval") or {}
    if not src:
        final = run.get("final") or {}
        src = {k: v for k, v in final.items() if k not in ("batch", "epoch")}
    return {k: v for k, v in src.items() if isinstance(v, (int, float)) and v is not None
            and k not in ("n_queries", "k")}
