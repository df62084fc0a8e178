"""Noise-ratio sweeps over synthetic episodes and result persistence."""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adapt_task, initial_head
from .errors import ConfigInvalid
from .infer import local_centroids, mcm_scores, ncc_centroids, nearest_centroid, _query_embeddings
from .metrics import accuracy_ci, auroc, fpr_at_95_tpr, sign_test
from .synth import GenConfig, generate_episode

DEFAULT_RATIOS = (0.0, 0.1, 0.3, 0.5, 0.7)
THREADS_ENV = "DETA_BENCH_THREADS"


@dataclass
class BenchConfig:
    """Sweep settings. ``gen`` and ``adapt`` hold overrides of the generator and
    adaptation defaults; the episode seed and the support OOD ratio are set by
    the sweep itself."""

    gen: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    ratios: list = field(default_factory=lambda: list(DEFAULT_RATIOS))
    episodes: int = 100
    seed: int = 0
    tau: float = 1.0
    ood_eval: bool = True

    def validate(self) -> None:
        if self.episodes < 0:
            raise ConfigInvalid("episodes must be >= 0")
        if not self.ratios:
            raise ConfigInvalid("need at least one noise ratio")
        if self.tau <= 0:
            raise ConfigInvalid("tau must be positive")
        for r in self.ratios:
            GenConfig.from_dict({**self.gen, "ood_ratio": r}).validate()
        AdaptConfig.from_dict(self.adapt).validate()

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown BenchConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratios"] = [float(r) for r in self.ratios]
        return d


@dataclass
class BenchResult:
    config: dict
    episodes: list  # one dict per (ratio, seed), sorted
    queries: list  # one dict per query, sorted by (ratio, seed, query_id)
    timings: dict  # stage -> list of seconds, aligned with ``episodes``

    def accuracies(self, ratio: float, key: str = "deta_acc") -> list[float]:
        return [e[key] for e in self.episodes if e["ratio"] == ratio]

    def scores_by_noise(self, ratio: float) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for q in self.queries:
            if q["ratio"] == ratio:
                out.setdefault(q["noise"], []).append(q["score"])
        return out

    def summary(self) -> dict:
        rows = [_aggregate(r, [e for e in self.episodes if e["ratio"] == r])
                for r in sorted({float(x) for x in self.config["ratios"]})]
        accs = [row["deta_acc"] for row in rows]
        return {
            "config": self.config,
            "rows": rows,
            "deta_monotone": bool(all(a >= b for a, b in zip(accs, accs[1:]))),
        }


def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _aggregate(ratio: float, eps: list[dict]) -> dict:
    deta = [e["deta_acc"] for e in eps]
    base = [e["baseline_acc"] for e in eps]
    row = {"ratio": ratio, "episodes": len(eps)}
    for key, vals in (("deta", deta), ("ncc", [e["ncc_acc"] for e in eps]), ("baseline", base)):
        row[f"{key}_acc"], row[f"{key}_ci"] = accuracy_ci(vals)
    w, l, p = sign_test(deta, base)
    row["sign_vs_baseline"] = {"wins": w, "losses": l, "p": p}
    for key in ("mcm_id", "mcm_ood", "auroc", "fpr95"):
        row[key] = _mean_or_none([e[key] for e in eps])
    return row


def _accuracy(pred, true) -> float:
    return float(np.mean(pred == true)) if true.size else 0.0


def run_episode(cfg: BenchConfig, ratio: float, seed: int):
    """Generate, adapt and evaluate one episode. Returns (record, query rows, timings)."""
    t0 = time.perf_counter()
    ep = generate_episode(GenConfig.from_dict({**cfg.gen, "ood_ratio": ratio, "seed": seed}))
    t1 = time.perf_counter()
    acfg = AdaptConfig.from_dict({**cfg.adapt, "seed": seed})
    params, bank, _ = adapt_task(ep, acfg)
    t2 = time.perf_counter()

    true = np.array([q.label for q in ep.query])
    is_id = true > 0
    Q = _query_embeddings(params, ep.query)
    local = local_centroids(params, bank, ep.support, ep.C)
    pred_local = nearest_centroid(Q, local)
    pred_ncc = nearest_centroid(Q, ncc_centroids(params, ep.support, ep.C))
    p0 = initial_head(ep, acfg)
    pred_base = nearest_centroid(_query_embeddings(p0, ep.query), ncc_centroids(p0, ep.support, ep.C))
    score = mcm_scores(Q, local, cfg.tau)
    t3 = time.perf_counter()

    rec = {
        "ratio": float(ratio), "seed": int(seed),
        "deta_acc": _accuracy(pred_local[is_id], true[is_id]),
        "ncc_acc": _accuracy(pred_ncc[is_id], true[is_id]),
        "baseline_acc": _accuracy(pred_base[is_id], true[is_id]),
        "mcm_id": None, "mcm_ood": None, "auroc": None, "fpr95": None,
    }
    if cfg.ood_eval and is_id.any() and (~is_id).any():
        s_id, s_ood = score[is_id], score[~is_id]
        rec.update(mcm_id=float(s_id.mean()), mcm_ood=float(s_ood.mean()),
                   auroc=auroc(s_id, s_ood), fpr95=fpr_at_95_tpr(s_id, s_ood))
    rows = [{"ratio": float(ratio), "seed": int(seed), "query_id": q.id, "true": int(q.label),
             "noise": q.noise, "pred": int(pl), "pred_ncc": int(pn), "pred_baseline": int(pb),
             "score": float(s)}
            for q, pl, pn, pb, s in zip(ep.query, pred_local, pred_ncc, pred_base, score)]
    return rec, rows, {"gen": t1 - t0, "adapt": t2 - t1, "eval": t3 - t2}


def _job(args):
    return run_episode(*args)


def bench_workers() -> int:
    cap = os.environ.get(THREADS_ENV)
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ConfigInvalid(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def run_benchmark(bench_config: BenchConfig | dict, workers: int | None = None) -> BenchResult:
    """Run every (ratio, episode seed) pair. Seeds ``seed .. seed+episodes-1`` are
    shared by all ratios so results pair across the sweep."""
    cfg = bench_config if isinstance(bench_config, BenchConfig) else BenchConfig.from_dict(bench_config)
    cfg.validate()
    jobs = [(cfg, float(r), cfg.seed + i) for r in cfg.ratios for i in range(cfg.episodes)]
    workers = bench_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        out = [_job(j) for j in jobs]

    order = sorted(range(len(jobs)), key=lambda i: (jobs[i][1], jobs[i][2]))
    episodes = [out[i][0] for i in order]
    queries = [row for i in order for row in sorted(out[i][1], key=lambda r: r["query_id"])]
    timings = {k: [out[i][2][k] for i in order] for k in ("gen", "adapt", "eval")}
    result = BenchResult(cfg.to_dict(), episodes, queries, timings)
    if cfg.episodes == 0:
        result.summary()  # raises EmptyList
    return result


def write_result(result: BenchResult, out_dir, write_csv: bool = False) -> dict:
    """Persist a run. ``summary.json`` holds no timings so reruns compare byte for byte."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "episodes.jsonl", "w") as f:
        for e in result.episodes:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    with open(out / "queries.jsonl", "w") as f:
        for q in result.queries:
            f.write(json.dumps(q, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(result.timings) + "\n")
    if write_csv:
        fields = ["ratio", "episodes", "deta_acc", "deta_ci", "ncc_acc", "ncc_ci", "baseline_acc",
                  "baseline_ci", "mcm_id", "mcm_ood", "auroc", "fpr95"]
        with open(out / "summary.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields + ["sign_wins", "sign_losses", "sign_p"])
            w.writeheader()
            for row in summary["rows"]:
                st = row["sign_vs_baseline"]
                w.writerow({**{k: row[k] for k in fields}, "sign_wins": st["wins"],
                            "sign_losses": st["losses"], "sign_p": st["p"]})
    return summary
