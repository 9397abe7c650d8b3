"""Paired-seed GRPO runs: saliency weight W vs 0 from the same warm start.

    python3 scripts/paired_seeds.py --config configs/paired.cfg --out results/paired

For each seed: warm start (``init_checkpoint`` if set, else trained and cached per
seed), one GRPO run per weight, then held-out evaluation. ``paired.json`` records
mean CoT length and pass@1 per run and the per-pair verdict (CoT shorter under the
saliency reward, pass@1 within the tolerance).
Runs already finished are reused, so the script can be resumed.
"""

import argparse
import json
import time
from pathlib import Path

from atmanrl import config as cfgmod
from atmanrl.cli import warm_start
from atmanrl.evaluation import evaluate, write_eval
from atmanrl.grpo import train
from atmanrl.model import load_checkpoint, save_checkpoint
from atmanrl.tasks import generate_corpus, save_corpus


def _run(cfg, tasks, eval_tasks, init_ckpt, weight, out, eval_k):
    done = out / "eval_summary.json"
    if done.exists():
        return json.loads(done.read_text())
    cfg = cfgmod.apply(cfg, {"rl.saliency_weight": weight})
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_manifest(out / "manifest.json", cfg, command="paired_seeds",
                          init_checkpoint_sha256=cfgmod.file_sha256(init_ckpt))
    model = load_checkpoint(init_ckpt)
    t0 = time.perf_counter()
    train(model, tasks, cfg.rl, cfg.mask, seed=cfg.seed, out_dir=out, workers=cfg.workers)
    seconds = time.perf_counter() - t0
    save_checkpoint(model, out / "final.ckpt")
    rows, summary = evaluate(model, eval_tasks, k=eval_k, seed=cfg.seed + 777,
                             max_new=cfg.rl.max_new)
    summary["train_seconds"] = seconds
    write_eval(rows, summary, out)
    return summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default="results/paired")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--weight", type=float, default=1.0)
    ap.add_argument("--queries", type=int, default=64, help="training queries per run")
    ap.add_argument("--eval-queries", type=int, default=500)
    ap.add_argument("--tolerance", type=float, default=2.0, help="pass@1 band, points")
    a = ap.parse_args()

    base = cfgmod.load(a.config)
    root = Path(a.out)
    root.mkdir(parents=True, exist_ok=True)
    s = base.sft
    pairs = []
    for seed in a.seeds:
        cfg = cfgmod.apply(base, {"seed": seed})
        sd = root / f"seed{seed}"
        sd.mkdir(exist_ok=True)
        if cfg.init_checkpoint:
            init = Path(cfg.init_checkpoint)
        else:
            init = sd / "warm_start.ckpt"
            if not init.exists():
                save_checkpoint(warm_start(cfg), init)
        tasks = generate_corpus(seed + 3000, a.queries, s.n_steps, s.n_distractors,
                                vary_distractors=s.vary_distractors)
        eval_tasks = generate_corpus(seed + 4000, a.eval_queries, s.n_steps, s.n_distractors,
                                     vary_distractors=s.vary_distractors)
        save_corpus(tasks, sd / "train_corpus.jsonl")
        save_corpus(eval_tasks, sd / "eval_corpus.jsonl")
        init_eval = sd / "init_eval_summary.json"
        if not init_eval.exists():
            _, summ = evaluate(load_checkpoint(init), eval_tasks, k=base.eval_k,
                               seed=cfg.seed + 777, max_new=cfg.rl.max_new)
            init_eval.write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
        start = json.loads(init_eval.read_text())
        res = {w: _run(cfg, tasks, eval_tasks, init, w, sd / f"w{w:g}", base.eval_k)
               for w in (0.0, a.weight)}
        ctrl, treat = res[0.0], res[a.weight]
        d_pass = 100 * (treat["pass@1"] - ctrl["pass@1"])
        pair = {"seed": seed,
                "initial": {k: start[k] for k in ("mean_cot_tokens", "pass@1")},
                "control": {k: ctrl[k] for k in ("mean_cot_tokens", "pass@1", "train_seconds")},
                "treated": {k: treat[k] for k in ("mean_cot_tokens", "pass@1", "train_seconds")},
                "shorter": treat["mean_cot_tokens"] < ctrl["mean_cot_tokens"],
                "pass1_delta_points": d_pass,
                "pass1_within_tolerance": abs(d_pass) <= a.tolerance}
        pairs.append(pair)
        print(json.dumps(pair))
    n_short = sum(p["shorter"] for p in pairs)
    doc = {"weight": a.weight, "tolerance_points": a.tolerance, "pairs": pairs,
           "n_shorter": n_short,
           "all_pass1_within_tolerance": all(p["pass1_within_tolerance"] for p in pairs),
           "criterion_met": n_short >= 2 and all(p["pass1_within_tolerance"] for p in pairs)}
    name = "paired.json" if a.weight == 1.0 else f"paired_w{a.weight:g}.json"
    (root / name).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"{n_short}/{len(pairs)} pairs shorter; criterion met: {doc['criterion_met']}")


if __name__ == "__main__":
    main()
