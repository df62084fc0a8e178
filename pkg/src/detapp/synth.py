"""Synthetic noisy episodes: Gaussian patch clusters with background clutter
and mislabeled out-of-distribution support samples."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episode import CLEAN, ID_NOISE, NOISE_FLAGS, OOD_LABEL, OOD_NOISE, Episode, PatchGrid, Sample
from .errors import ConfigInvalid, PoolExhausted, SchemaError


@dataclass
class GenConfig:
    C: int = 5
    K: int = 10
    queries_per_class: int = 15
    d: int = 16
    H: int = 8
    W: int = 8
    n_ood_classes: int = 5
    cluster_sep: float = 1.25
    patch_noise_sd: float = 1.0
    instance_sd: float = 0.0
    ood_affinity: float = 0.7
    clutter_ratio: float = 0.3
    ood_ratio: float = 0.3
    query_ood_ratio: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.C < 2:
            problems.append("C must be >= 2")
        if self.K < 1:
            problems.append("K must be >= 1")
        if self.queries_per_class < 0:
            problems.append("queries_per_class must be >= 0")
        if min(self.d, self.H, self.W) < 1:
            problems.append("d, H, W must be >= 1")
        if self.n_ood_classes < 1:
            problems.append("n_ood_classes must be >= 1")
        if self.cluster_sep < 0 or self.patch_noise_sd < 0 or self.instance_sd < 0:
            problems.append("cluster_sep, patch_noise_sd and instance_sd must be >= 0")
        if not 0.0 <= self.ood_affinity <= 1.0:
            problems.append("ood_affinity must lie in [0, 1]")
        if not 0.0 <= self.clutter_ratio <= 1.0:
            problems.append("clutter_ratio must lie in [0, 1]")
        if not 0.0 <= self.ood_ratio < 1.0:
            problems.append("ood_ratio must lie in [0, 1)")
        if not 0.0 <= self.query_ood_ratio < 1.0:
            problems.append("query_ood_ratio must lie in [0, 1)")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)


def _cluster_means(cfg: GenConfig, rng: np.random.Generator):
    """Class and background means on orthogonal directions, OOD means at random.

    Orthogonal directions scaled by sep/sqrt(2) put every pair of ID classes
    (and the background) exactly ``cluster_sep`` apart; with more clusters
    than dimensions they are random unit directions and the separation is
    approximate. An OOD mean has the same norm; ``ood_affinity`` of its
    direction lies in the span of the class means and the rest is private,
    so unseen classes partly resemble task classes.
    """
    n = cfg.C + 1
    if n <= cfg.d:
        q, _ = np.linalg.qr(rng.standard_normal((cfg.d, n)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((n, cfg.d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ood = rng.standard_normal((cfg.n_ood_classes, cfg.C)) @ dirs[:cfg.C]
    ood /= np.linalg.norm(ood, axis=1, keepdims=True)
    own = rng.standard_normal((cfg.n_ood_classes, cfg.d))
    own -= (own @ dirs[:cfg.C].T) @ dirs[:cfg.C]
    own /= np.linalg.norm(own, axis=1, keepdims=True)
    a = cfg.ood_affinity
    ood = a * ood + math.sqrt(1.0 - a * a) * own
    scale = cfg.cluster_sep / math.sqrt(2.0)
    return dirs[:cfg.C] * scale, dirs[cfg.C] * scale, ood * scale


def _clutter_mask(H: int, W: int, n_clutter: int, rng: np.random.Generator) -> np.ndarray:
    # contiguous background band grown row by row from a random edge
    order = np.arange(H * W).reshape(H, W)
    side = rng.integers(4)
    if side == 1:
        order = order[::-1]
    elif side == 2:
        order = order.T.reshape(W, H)  # columns become rows
    elif side == 3:
        order = order.T[::-1].reshape(W, H)
    flat = np.zeros(H * W, dtype=bool)
    flat[order.ravel()[:n_clutter]] = True
    return ~flat.reshape(H, W)


def _make_grid(mean, bg_mean, cfg: GenConfig, sample_id: int, rng: np.random.Generator) -> PatchGrid:
    n_clutter = int(math.floor(cfg.clutter_ratio * cfg.H * cfg.W))
    obj = _clutter_mask(cfg.H, cfg.W, n_clutter, rng)
    mean = mean + rng.normal(0.0, cfg.instance_sd, size=cfg.d)
    centers = np.where(obj[..., None], mean, bg_mean)
    patches = centers + rng.normal(0.0, cfg.patch_noise_sd, size=(cfg.H, cfg.W, cfg.d))
    return PatchGrid(patches, sample_id, object_mask=obj)


def _id_flag(cfg: GenConfig) -> str:
    return ID_NOISE if math.floor(cfg.clutter_ratio * cfg.H * cfg.W) > 0 else CLEAN


def generate_episode(cfg: GenConfig) -> Episode:
    """Build one C-way K-shot episode.

    The clean episode, the OOD pool and the replacement choice draw from
    independent seed streams, so for a fixed seed the replaced support
    samples at a larger ``ood_ratio`` are a superset of those at a smaller one.
    """
    cfg.validate()
    s_means, s_samples, s_pool, s_inject = np.random.SeedSequence(cfg.seed).spawn(4)
    class_means, bg_mean, ood_means = _cluster_means(cfg, np.random.default_rng(s_means))

    rng = np.random.default_rng(s_samples)
    flag = _id_flag(cfg)
    next_id = 0
    support = []
    for c in range(cfg.C):
        for _ in range(cfg.K):
            support.append(Sample(_make_grid(class_means[c], bg_mean, cfg, next_id, rng), c + 1, flag))
            next_id += 1
    query = []
    for c in range(cfg.C):
        for _ in range(cfg.queries_per_class):
            query.append(Sample(_make_grid(class_means[c], bg_mean, cfg, next_id, rng), c + 1, flag))
            next_id += 1
    n_ood_q = int(math.floor(cfg.query_ood_ratio * cfg.C * cfg.queries_per_class))
    for _ in range(n_ood_q):
        o = rng.integers(cfg.n_ood_classes)
        query.append(Sample(_make_grid(ood_means[o], bg_mean, cfg, next_id, rng), OOD_LABEL, OOD_NOISE))
        next_id += 1

    episode = Episode(support, query, cfg.C, cfg.K,
                      meta={"seed": cfg.seed, "ood_ratio": float(cfg.ood_ratio),
                            "clutter_ratio": float(cfg.clutter_ratio)})

    # fixed-size per-class pool blocks keep replacements nested across ratios
    prng = np.random.default_rng(s_pool)
    block = max(cfg.K - 1, 0)
    blocks = []
    for c in range(cfg.C):
        grids = []
        for _ in range(block):
            o = prng.integers(cfg.n_ood_classes)
            grids.append(_make_grid(ood_means[o], bg_mean, cfg, next_id, prng))
            next_id += 1
        blocks.append(grids)
    n_rep = int(math.floor(cfg.ood_ratio * cfg.K))
    pool = [g for grids in blocks for g in grids[:n_rep]]
    seed = int(np.random.default_rng(s_inject).integers(2**63 - 1))
    return inject_ood_noise(episode, cfg.ood_ratio, pool, seed)


def inject_ood_noise(episode: Episode, alpha: float, ood_pool: list[PatchGrid], seed) -> Episode:
    """Replace floor(alpha*K) support samples per class by pool samples.

    The replacements keep the class label they overwrite and are marked as OOD
    noise. Pool samples are consumed in order, class 1 first.
    """
    if not 0.0 <= alpha < 1.0:
        raise ConfigInvalid("alpha must lie in [0, 1)")
    n_rep = int(math.floor(alpha * episode.K))
    if n_rep == 0:
        return episode
    if len(ood_pool) < n_rep * episode.C:
        raise PoolExhausted(f"need {n_rep * episode.C} pool samples, got {len(ood_pool)}")
    rng = np.random.default_rng(seed)
    support = list(episode.support)
    cursor = 0
    for c in range(1, episode.C + 1):
        positions = [i for i, s in enumerate(support) if s.label == c]
        if len(positions) < n_rep:
            raise PoolExhausted(f"class {c} has only {len(positions)} support samples")
        for i in rng.permutation(positions)[:n_rep]:
            support[i] = Sample(ood_pool[cursor], c, OOD_NOISE)
            cursor += 1
    return Episode(support, list(episode.query), episode.C, episode.K, dict(episode.meta))


# JSON episode files


def _sample_json(s: Sample, with_noise: bool) -> dict:
    out = {"id": int(s.id), "label": int(s.label)}
    if with_noise:
        out["noise"] = s.noise
    out["patches"] = s.grid.patches.tolist()
    return out


def episode_to_json(episode: Episode) -> dict:
    H, W, d = episode.dims
    return {
        "d": d, "H": H, "W": W, "C": episode.C, "K": episode.K,
        "support": [_sample_json(s, True) for s in episode.support],
        "query": [_sample_json(s, True) for s in episode.query],
        "meta": {"seed": int(episode.meta.get("seed", 0)),
                 "ood_ratio": float(episode.meta.get("ood_ratio", 0.0)),
                 "clutter_ratio": float(episode.meta.get("clutter_ratio", 0.0))},
    }


def write_episode(episode: Episode, path) -> None:
    Path(path).write_text(json.dumps(episode_to_json(episode)))


def _require(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise SchemaError(f"{where}.{key}: expected int")
    if kind is float and (isinstance(val, bool) or not isinstance(val, (int, float))):
        raise SchemaError(f"{where}.{key}: expected number")
    if kind is list and not isinstance(val, list):
        raise SchemaError(f"{where}.{key}: expected list")
    return val


def _parse_sample(obj, where, H, W, d, is_query) -> Sample:
    sid = _require(obj, "id", int, where)
    label = _require(obj, "label", int, where)
    patches = _require(obj, "patches", list, where)
    noise = obj.get("noise", CLEAN) if not is_query else _require(obj, "noise", str, where)
    if noise not in NOISE_FLAGS:
        raise SchemaError(f"{where}.noise: {noise!r} not one of {NOISE_FLAGS}")
    try:
        arr = np.asarray(patches, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}.patches: ragged or non-numeric") from exc
    if arr.shape != (H, W, d):
        raise SchemaError(f"{where}.patches: shape {arr.shape}, expected {(H, W, d)}")
    return Sample(PatchGrid(arr, sid), label, noise)


def episode_from_json(obj) -> Episode:
    if not isinstance(obj, dict):
        raise SchemaError("episode must be a JSON object")
    d, H, W = (_require(obj, k, int, "episode") for k in ("d", "H", "W"))
    C, K = (_require(obj, k, int, "episode") for k in ("C", "K"))
    support = [_parse_sample(s, f"support[{i}]", H, W, d, False)
               for i, s in enumerate(_require(obj, "support", list, "episode"))]
    query = [_parse_sample(s, f"query[{i}]", H, W, d, True)
             for i, s in enumerate(_require(obj, "query", list, "episode"))]
    meta = _require(obj, "meta", dict, "episode")
    meta = {"seed": _require(meta, "seed", int, "meta"),
            "ood_ratio": float(_require(meta, "ood_ratio", float, "meta")),
            "clutter_ratio": float(_require(meta, "clutter_ratio", float, "meta"))}
    if not support:
        raise SchemaError("episode: empty support set")
    for s in support:
        if not 1 <= s.label <= C:
            raise SchemaError(f"support sample {s.id}: label {s.label} outside 1..{C}")
    return Episode(support, query, C, K, meta)


def read_episode(path) -> Episode:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return episode_from_json(obj)
