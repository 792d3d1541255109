"""Command-line entry point: ``mudd <verb> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from . import analysis, complexity
from .checkpoint import load_checkpoint
from .config import TABLE6, ablation_variant
from .model import forward_with_trace
from .train import TrainConfig, evaluate, generate, load_config, read_bytes, run_ablation, train


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.steps is not None:
        over["steps"] = args.steps
    if args.corpus is not None:
        over["corpus"] = args.corpus
    cfg = dataclasses.replace(cfg, **over)
    res = train(cfg, args.out, log=_log)
    print(json.dumps({"step0_loss": res.step0_loss, "final_val_loss": res.final_val_loss,
                      "best_val_loss": res.best_val_loss, "rejected_steps": res.rejected_steps}))
    return 0


def cmd_eval(args) -> int:
    loss, ppl = evaluate(args.checkpoint, args.corpus, seq_len=args.seq_len, max_batches=args.max_batches)
    print(json.dumps({"loss": loss, "ppl": ppl}))
    return 0


def cmd_generate(args) -> int:
    mode = args.mode
    out = generate(args.checkpoint, args.prompt.encode(), args.n, mode=mode,
                   temperature=args.temperature, top_k=args.top_k, seed=args.seed)
    sys.stdout.write(out.decode("latin-1") + "\n")
    return 0


def cmd_analyze(args) -> int:
    if args.L is None and args.D is None:
        reports = complexity.table1()
    else:
        if args.L is None or args.D is None:
            raise SystemExit("analyze needs both --L and --D (or neither for the reference table)")
        spec = complexity.ArchSpec(L=args.L, D=args.D, T=args.T, N=args.N, B=args.B)
        reports = [complexity.report(spec, variant=args.variant)]
    sys.stdout.write(complexity.format_reports(reports, args.format))
    return 0


def _traces(model, data: np.ndarray, seq_len: int, max_seqs: int):
    starts = np.arange(0, len(data) - seq_len + 1, seq_len)[:max_seqs]
    if len(starts) == 0:
        raise SystemExit(f"corpus shorter than one sequence of {seq_len}")
    return [forward_with_trace(model, data[s:s + seq_len][None])[1] for s in starts]


def cmd_analyze_model(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = read_bytes(args.corpus)
    seq_len = args.seq_len or model.config.T_max
    traces = _traces(model, data, seq_len, args.max_seqs)
    rows: list[dict] = []
    if args.metric == "cosine":
        for stream in ("q", "k", "v", "r"):
            per = [analysis.adjacent_cosine_similarity(t, stream) for t in traces]
            vals = np.mean([p.values for p in per], axis=0)
            excl = np.sum([p.excluded for p in per], axis=0)
            for layer, v, e in zip(per[0].layers, vals, excl):
                rows.append({"layer": layer, "stream": stream, "cosine": float(v), "excluded": int(e)})
    elif args.metric == "head_act":
        ratios = np.mean([analysis.head_activation_ratio(t) for t in traces], axis=0)
        rows = [{"layer": i + 1, "ratio": float(r)} for i, r in enumerate(ratios)]
    else:
        st = analysis.rectified_weight_stats(traces)
        ways = "qkvr" if st.mean.shape[0] == 4 else "x"
        C, L, J = st.mean.shape
        for c in range(C):
            for i in range(L):
                for j in range(J):
                    if not np.isnan(st.mean[c, i, j]):
                        rows.append({"way": ways[c], "i": i + 1, "j": j,
                                     "mean": float(st.mean[c, i, j]), "std": float(st.std[c, i, j])})
    _emit(rows, args.out)
    return 0


def _emit(rows: list[dict], out: str | None) -> None:
    if out is None or out in ("csv", "json"):
        fmt = out or "csv"
        dest = sys.stdout
    else:
        fmt = "json" if out.endswith(".json") else "csv"
        dest = open(out, "w", newline="")
    try:
        if fmt == "json":
            dest.write(json.dumps(rows, indent=1) + "\n")
        elif rows:
            w = csv.DictWriter(dest, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    finally:
        if dest is not sys.stdout:
            dest.close()


def cmd_ablate(args) -> int:
    if args.suite != "table6":
        raise SystemExit(f"unknown suite {args.suite!r}")
    base = load_config(args.config) if args.config else TrainConfig()
    over = {"seed": args.seed}
    if args.steps is not None:
        over["steps"] = args.steps
    base = dataclasses.replace(base, **over)
    names = args.names.split(",") if args.names else list(TABLE6)
    for n in names:
        ablation_variant(base.model, n)  # fail fast on a bad name
    rows = run_ablation(base, names, args.out, log=_log)
    for r in sorted(rows, key=lambda r: r["final_val_loss"]):
        print(f"{r['name']:>22s}  val {r['final_val_loss']:.4f}  ppl {r['val_ppl']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mudd", description="Dense-connection Transformer toolkit")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a byte-level model")
    p.add_argument("--config", help="flat TOML config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="loss and perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--max-batches", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="sample from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--mode", choices=("greedy", "temperature", "top_k"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("analyze", help="closed-form overhead and memory table")
    p.add_argument("--L", type=int)
    p.add_argument("--D", type=int)
    p.add_argument("--T", type=int, default=4096)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--B", type=int, default=1)
    p.add_argument("--variant", choices=complexity.MEMORY_VARIANTS)
    p.add_argument("--format", choices=("table", "json", "csv"), default="table")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("analyze-model", help="diagnostics of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--metric", choices=("cosine", "head_act", "mudd_weights"), required=True)
    p.add_argument("--out", help="output path (.csv or .json), or 'csv'/'json' for stdout")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--max-seqs", type=int, default=16)
    p.set_defaults(fn=cmd_analyze_model)

    p = sub.add_parser("ablate", help="train the ablation grid")
    p.add_argument("--suite", default="table6")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--names", help="comma-separated subset of the grid")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
