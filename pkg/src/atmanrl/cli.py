"""Command-line entry point: ``atmanrl <subcommand> ...``.

Environment overrides: ``ATMANRL_OUT_DIR`` (output location when a flag is omitted)
and ``ATMANRL_WORKERS`` (default worker count).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import config as cfgmod
from .config import RunConfig
from .evaluation import (evaluate, read_log, report, saliency_localization,
                         summarize_run, write_eval)
from .grpo import train
from .mask import optimize_masks
from .model import Decoder, fit_supervised, load_checkpoint, save_checkpoint
from .tasks import (VOCAB, TaskInstance, corpus_digest, generate_corpus, load_corpus,
                    save_corpus, segment, supervised_examples)


class CLIError(Exception):
    pass


def _out(path: str | None, default_name: str) -> Path:
    if path:
        return Path(path)
    base = os.environ.get("ATMANRL_OUT_DIR")
    if not base:
        raise CLIError(f"no output path given and ATMANRL_OUT_DIR is unset ({default_name})")
    return Path(base) / default_name


def _workers(flag: int | None, cfg_value: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("ATMANRL_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CLIError(f"ATMANRL_WORKERS must be an integer, got {env!r}")
    return cfg_value


def _config(path: str | None, sets: Sequence[str]) -> RunConfig:
    cfg = cfgmod.load(path) if path else RunConfig()
    overrides = {}
    for item in sets or ():
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfgmod.apply(cfg, overrides)


def warm_start(cfg: RunConfig, log_every: int = 0) -> Decoder:
    """Supervised warm start on a generated gold-CoT corpus, fully determined by ``cfg``."""
    s = cfg.sft
    data = generate_corpus(cfg.seed, s.corpus_size, s.n_steps, s.n_distractors,
                           vary_distractors=s.vary_distractors)
    seqs, starts = supervised_examples(data, s.counterfactual_frac, cfg.seed)
    longest = max(len(x) for x in seqs)
    if longest > cfg.model.max_seq:
        raise CLIError(f"warm-start sequences reach {longest} tokens, model.max_seq is "
                       f"{cfg.model.max_seq}")
    model = Decoder(cfg.model, seed=cfg.seed)
    with torch.random.fork_rng():
        fit_supervised(model, seqs, starts, s.steps, lr=s.lr, batch_size=s.batch_size,
                       seed=cfg.seed, weight_decay=s.weight_decay, log_every=log_every)
    return model


# -- subcommands ------------------------------------------------------------------------

def cmd_gen_corpus(a) -> None:
    tasks = generate_corpus(a.seed, a.count, a.steps, a.distractors,
                            vary_distractors=a.vary_distractors)
    out = _out(a.out, "corpus.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(tasks, out)
    print(f"wrote {len(tasks)} instances to {out} "
          f"(digest {corpus_digest(out.read_bytes())})")


def cmd_pretrain(a) -> None:
    cfg = _config(a.config, a.set)
    if a.seed is not None:
        cfg = cfgmod.apply(cfg, {"seed": a.seed})
    out = _out(a.out, "warm_start.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    model = warm_start(cfg, log_every=a.log_every)
    save_checkpoint(model, out)
    cfgmod.write_manifest(out.with_suffix(".manifest.json"), cfg, command="pretrain",
                          checkpoint_sha256=cfgmod.file_sha256(out))
    print(f"wrote {out}")


def _initial_model(cfg: RunConfig) -> tuple[Decoder, dict]:
    if cfg.init_checkpoint:
        path = Path(cfg.init_checkpoint)
        model = load_checkpoint(path)
        if model.cfg != cfg.model:
            raise CLIError(f"{path} holds a model config that differs from model.*")
        return model, {"init_checkpoint_sha256": cfgmod.file_sha256(path)}
    return warm_start(cfg), {"init_checkpoint_sha256": None}


def cmd_train_policy(a) -> None:
    if a.manifest:
        cfg, manifest = cfgmod.read_manifest(a.manifest)
        records = manifest["corpus"]["records"]
        tasks = [TaskInstance.from_json(r) for r in records]
        digest = manifest["corpus"]["digest"]
        if a.workers is not None or os.environ.get("ATMANRL_WORKERS"):
            cfg = cfgmod.apply(cfg, {"workers": _workers(a.workers, cfg.workers)})
        expected_init = manifest.get("init_checkpoint_sha256")
    else:
        cfg = _config(a.config, a.set)
        over = {}
        if a.saliency_weight is not None:
            over["rl.saliency_weight"] = a.saliency_weight
        if a.seed is not None:
            over["seed"] = a.seed
        over["workers"] = _workers(a.workers, cfg.workers)
        cfg = cfgmod.apply(cfg, over)
        if not a.corpus:
            raise CLIError("--corpus is required unless --manifest is given")
        raw = Path(a.corpus).read_bytes()
        tasks = load_corpus(a.corpus)
        records = [t.to_json() for t in tasks]
        digest = corpus_digest(raw)
        expected_init = None
    out = _out(a.out_dir, "run")
    out.mkdir(parents=True, exist_ok=True)
    model, init_info = _initial_model(cfg)
    if expected_init is not None and init_info["init_checkpoint_sha256"] != expected_init:
        raise CLIError("initial checkpoint does not match the manifest's sha256")
    cfgmod.write_manifest(out / "manifest.json", cfg, command="train-policy",
                          corpus={"path": a.corpus, "digest": digest, "records": records},
                          seeds={"run": cfg.seed, "model_init": cfg.seed,
                                 "sft": cfg.seed, "rl": cfg.seed},
                          **init_info)
    save_checkpoint(model, out / "init.ckpt")
    train(model, tasks, cfg.rl, cfg.mask, seed=cfg.seed, out_dir=out, workers=cfg.workers,
          on_log=(lambda r: print(json.dumps(r), flush=True)) if a.verbose else None,
          record_wallclock=not a.no_wallclock)
    save_checkpoint(model, out / "final.ckpt")
    print(f"wrote {out / 'final.ckpt'}")


def _instance(spec: str) -> TaskInstance:
    path, _, idx = spec.partition(":")
    if idx:
        tasks = load_corpus(path)
        i = int(idx)
        if not 0 <= i < len(tasks):
            raise CLIError(f"instance index {i} outside corpus of {len(tasks)}")
        return tasks[i]
    text = Path(path).read_text().strip()
    if "\n" in text:
        raise CLIError(f"{path} holds several instances; use {path}:INDEX")
    return TaskInstance.from_json(text)


def cmd_train_mask(a) -> None:
    cfg = _config(a.config, a.set)
    if a.steps is not None:
        cfg = cfgmod.apply(cfg, {"mask.steps": a.steps})
    model = load_checkpoint(a.checkpoint)
    inst = _instance(a.instance)
    seq = segment(inst.full_ids(), len(inst.prompt_ids()))
    res = optimize_masks(model, [seq], [inst.answer_ids()], cfg.mask)[0]
    cot = seq.cot_ids
    doc = {
        "instance": json.loads(inst.to_json()),
        "steps": cfg.mask.steps,
        "reward": res.reward,
        "loss_trace": res.loss_trace,
        "cot_tokens": [VOCAB.symbols[t] for t in cot],
        "token_saliency_scores": res.token_scores,
    }
    out = _out(a.out, "mask.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"reward {res.reward:.6f}; wrote {out}")


ANALYZE_COLUMNS = ("instance_id", "token_index", "token_text", "token_class", "segment",
                   "salient", "saliency_score")


def cmd_analyze(a) -> None:
    cfg = _config(a.config, a.set)
    model = load_checkpoint(a.checkpoint)
    tasks = load_corpus(a.corpus)
    if a.limit:
        tasks = tasks[:a.limit]
    out = _out(a.out, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    aucs, precs, rewards = [], [], []
    with open(out / "saliency.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ANALYZE_COLUMNS)
        for start in range(0, len(tasks), a.batch):
            chunk = tasks[start:start + a.batch]
            seqs = [segment(t.full_ids(), len(t.prompt_ids())) for t in chunk]
            results = optimize_masks(model, seqs, [t.answer_ids() for t in chunk], cfg.mask)
            for i, (t, seq, res) in enumerate(zip(chunk, seqs, results)):
                qid = start + i
                salient = set(t.salient_positions)
                for j, tok in enumerate(seq.cot_ids):
                    sym = VOCAB.symbols[tok]
                    w.writerow([qid, j, sym, VOCAB.token_class(tok), "cot", int(j in salient),
                                repr(res.token_scores[j])])
                loc = saliency_localization(res.token_scores, salient)
                aucs.append(loc["auc"])
                precs.append(loc["precision_at_k"])
                rewards.append(res.reward)
    summary = {"n_instances": len(tasks), "mask_steps": cfg.mask.steps,
               "mean_auc": float(np.mean(aucs)), "min_auc": float(np.min(aucs)),
               "mean_precision_at_k": float(np.mean(precs)),
               "mean_reward": float(np.mean(rewards)), "per_instance_auc": aucs}
    (out / "saliency_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"mean AUC {summary['mean_auc']:.4f} over {len(tasks)} instances; wrote {out}")


def cmd_eval(a) -> None:
    cfg = _config(a.config, a.set)
    model = load_checkpoint(a.checkpoint)
    tasks = load_corpus(a.corpus)
    k = a.k if a.k is not None else cfg.eval_k
    rows, summary = evaluate(model, tasks, k=k, temperature=a.temperature,
                             seed=cfg.seed if a.seed is None else a.seed,
                             max_new=a.max_new or cfg.rl.max_new,
                             mask_cfg=cfg.mask if a.saliency else None)
    out = _out(a.out, "eval")
    write_eval(rows, summary, out)
    print(json.dumps(summary, sort_keys=True))


def cmd_report(a) -> None:
    root = Path(a.run_dir)
    runs = {}
    candidates = [root] if (root / "train_log.csv").exists() else sorted(root.iterdir())
    for d in candidates:
        if not (d / "train_log.csv").exists():
            continue
        weight = None
        if (d / "manifest.json").exists():
            c, _ = cfgmod.read_manifest(d / "manifest.json")
            weight = c.rl.saliency_weight
        ev = None
        for name in ("eval_summary.json", "eval/eval_summary.json"):
            if (d / name).exists():
                ev = json.loads((d / name).read_text())
                break
        runs[d.name] = summarize_run(read_log(d / "train_log.csv"), ev, weight)
    if not runs:
        raise CLIError(f"no runs (directories with train_log.csv) under {root}")
    out = _out(a.out, "report")
    report(runs, out)
    print(f"summarized {len(runs)} run(s) into {out}")


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atmanrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    g = sub.add_parser("gen-corpus", help="generate a chain-arithmetic corpus (JSONL)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--steps", type=int, default=3)
    g.add_argument("--distractors", type=int, default=5)
    g.add_argument("--vary-distractors", action="store_true",
                   help="draw each instance's distractor count from 0..--distractors")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_corpus)

    g = sub.add_parser("pretrain", help="supervised warm start; writes a checkpoint")
    with_config(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--log-every", type=int, default=0)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train-policy", help="GRPO with outcome + saliency reward")
    with_config(g)
    g.add_argument("--corpus")
    g.add_argument("--out-dir")
    g.add_argument("--saliency-weight", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--manifest", help="rerun exactly from a previous run's manifest.json")
    g.add_argument("--no-wallclock", action="store_true",
                   help="log wallclock_s as 0 so logs are byte-comparable across reruns")
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_train_policy)

    g = sub.add_parser("train-mask", help="optimize one attention mask; dump trace as JSON")
    with_config(g)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--instance", required=True, help="instance JSON file or CORPUS:INDEX")
    g.add_argument("--steps", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_train_mask)

    g = sub.add_parser("analyze", help="per-token saliency CSV over a corpus")
    with_config(g)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--corpus", required=True)
    g.add_argument("--limit", type=int, default=0)
    g.add_argument("--batch", type=int, default=10)
    g.add_argument("--out")
    g.set_defaults(func=cmd_analyze)

    g = sub.add_parser("eval", help="pass@k and CoT composition on a corpus")
    with_config(g)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--corpus", required=True)
    g.add_argument("--k", type=int)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int)
    g.add_argument("--max-new", type=int)
    g.add_argument("--saliency", action="store_true", help="also score rollouts with masks")
    g.add_argument("--out")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("report", help="summarize run directories into JSON and CSV")
    g.add_argument("--run-dir", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # single-line diagnostic, no traceback
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
