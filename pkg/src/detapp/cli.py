"""Command-line entry point: gen, adapt, eval, bench, friedman."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adapt_task, load_model, save_model
from .bench import BenchConfig, run_benchmark, write_result
from .errors import DetaError
from .infer import predict_queries
from .metrics import friedman, friedman_from_ranks
from .synth import GenConfig, generate_episode, read_episode, write_episode


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise DetaError(f"{path}: config must be a JSON object")
    return obj


def cmd_gen(args) -> int:
    cfg = GenConfig.from_dict(_load_json(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.episodes):
        ep = generate_episode(GenConfig.from_dict({**vars(cfg), "seed": cfg.seed + i}))
        write_episode(ep, out / f"episode_{i:04d}.json")
    print(f"wrote {args.episodes} episodes to {out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = AdaptConfig.from_dict(_load_json(args.config))
    ep = read_episode(args.episode)
    if args.dump_weights:
        with open(args.dump_weights, "w") as dump:
            params, bank, state = adapt_task(ep, cfg, dump=dump)
    else:
        params, bank, state = adapt_task(ep, cfg)
    save_model(args.out, params, bank, state, cfg, ep)
    print(f"saved model to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, bank, _, _ = load_model(args.model)
    ep = read_episode(args.episode)
    pred, score = predict_queries(params, bank, ep.support, ep.query, ep.C, args.head, args.tau)
    with open(args.out, "w") as fh:
        for q, p, s in zip(ep.query, pred, score):
            fh.write(json.dumps({"query_id": q.id, "pred": int(p), "true": int(q.label),
                                 "noise": q.noise, "score": float(s)}) + "\n")
    true = np.array([q.label for q in ep.query])
    id_q = true > 0
    if id_q.any():
        print(f"accuracy on {id_q.sum()} in-distribution queries: {np.mean(pred[id_q] == true[id_q]):.4f}")
    return 0


def cmd_bench(args) -> int:
    if args.check:
        from .acceptance import run_all
        checks = run_all()
        failed = [c.number for c in checks if not c.passed]
        print("all acceptance checks passed" if not failed else f"failed: {failed}")
        return 0 if not failed else 1
    d = _load_json(args.config)
    if args.episodes is not None:
        d["episodes"] = args.episodes
    result = run_benchmark(BenchConfig.from_dict(d))
    summary = write_result(result, args.out, write_csv=args.csv)
    print("ratio  deta_acc  baseline_acc  auroc")
    for row in summary["rows"]:
        au = "-" if row["auroc"] is None else f"{row['auroc']:.4f}"
        print(f"{row['ratio']:<5}  {row['deta_acc']:.4f}    {row['baseline_acc']:.4f}        {au}")
    return 0


def _read_ranks(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row if x.strip()] for row in csv.reader(fh) if any(x.strip() for x in row)]
    if not rows:
        raise DetaError(f"{path}: no ranks found")
    return rows


def cmd_friedman(args) -> int:
    rows = _read_ranks(args.ranks)
    if args.n is not None:
        chi2, ff = friedman([x for row in rows for x in row], args.n)
    else:
        if len({len(r) for r in rows}) != 1:
            raise DetaError("rank matrix rows differ in length")
        chi2, ff = friedman_from_ranks(rows)
    print(json.dumps({"chi2": chi2, "ff": ff}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="detapp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic episodes")
    p.add_argument("--config", help="flat JSON object of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("adapt", help="adapt a head to one episode's support set")
    p.add_argument("--episode", required=True)
    p.add_argument("--config", help="flat JSON object of adaptation settings")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--dump-weights", help="write per-iteration region and image weights as JSON lines")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="classify and score an episode's queries")
    p.add_argument("--model", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--head", choices=["localncc", "ncc", "mcm"], default="localncc")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="noise-ratio sweep, or the acceptance suite with --check")
    p.add_argument("--config", help="JSON object of benchmark settings")
    p.add_argument("--out", default="bench_out")
    p.add_argument("--episodes", type=int)
    p.add_argument("--csv", action="store_true", help="also write summary.csv")
    p.add_argument("--check", action="store_true", help="run the acceptance checks; exit 0 iff all pass")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("friedman", help="Friedman statistics from mean ranks or a rank matrix")
    p.add_argument("--ranks", required=True, help="CSV of mean ranks, or an n x k rank matrix when --n is omitted")
    p.add_argument("--n", type=int, help="number of datasets the mean ranks were averaged over")
    p.set_defaults(fn=cmd_friedman)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DetaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
