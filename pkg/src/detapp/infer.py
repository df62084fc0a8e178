"""Query-time classifiers and the OOD score."""
from __future__ import annotations

import numpy as np

from .adapt import HeadParams, _cosines, embed
from .cora import MemoryBank
from .episode import PatchGrid, Sample, image_feature, pool_region
from .errors import EmptyBankClass, EmptyList


def _n_classes(support, C):
    return int(max(s.label for s in support)) if C is None else int(C)


def local_centroids(params: HeadParams, bank: MemoryBank, support: list[Sample],
                    C: int | None = None) -> np.ndarray:
    """Mean head embedding of each class's banked regions, re-pooled from the support grids."""
    C = _n_classes(support, C)
    grids = {s.id: s.grid for s in support}
    out = []
    for c in range(1, C + 1):
        entries = bank.get(c)
        if not entries:
            raise EmptyBankClass(f"memory bank holds no region for class {c}")
        feats = np.stack([pool_region(grids[e.sample_id], e.box) for e in entries])
        out.append(embed(params, feats).mean(axis=0))
    return np.stack(out)


def ncc_centroids(params: HeadParams, support: list[Sample], C: int | None = None) -> np.ndarray:
    C = _n_classes(support, C)
    E = embed(params, np.stack([image_feature(s.grid) for s in support]))
    labels = np.array([s.label for s in support])
    out = []
    for c in range(1, C + 1):
        members = labels == c
        if not members.any():
            raise EmptyList(f"no support image for class {c}")
        out.append(E[members].mean(axis=0))
    return np.stack(out)


def nearest_centroid(embeddings, centroids) -> np.ndarray:
    """1-based labels by maximum cosine; np.argmax keeps the lowest index on ties."""
    return np.argmax(_cosines(embeddings, centroids), axis=1) + 1


def _query_embeddings(params, queries):
    grids = [q.grid if isinstance(q, Sample) else q for q in queries]
    return embed(params, np.stack([image_feature(g) for g in grids]))


def local_ncc_predict(params: HeadParams, bank: MemoryBank, support: list[Sample],
                      query: PatchGrid, C: int | None = None) -> int:
    cents = local_centroids(params, bank, support, C)
    return int(nearest_centroid(_query_embeddings(params, [query]), cents)[0])


def ncc_predict(params: HeadParams, support: list[Sample], query: PatchGrid,
                C: int | None = None) -> int:
    cents = ncc_centroids(params, support, C)
    return int(nearest_centroid(_query_embeddings(params, [query]), cents)[0])


def mcm_scores(embeddings, centroids, tau: float = 1.0) -> np.ndarray:
    """Maximum softmax of cosine/tau over classes, per row."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    S = _cosines(embeddings, centroids) / tau
    S = S - S.max(axis=1, keepdims=True)
    P = np.exp(S)
    return P.max(axis=1) / P.sum(axis=1)


def mcm_score(params: HeadParams, centroids, query: PatchGrid, tau: float = 1.0) -> float:
    return float(mcm_scores(_query_embeddings(params, [query]), centroids, tau)[0])


def predict_queries(params: HeadParams, bank: MemoryBank, support: list[Sample], queries,
                    C: int | None = None, head: str = "localncc", tau: float = 1.0):
    """Batch predictions and MCM scores for a list of query samples.

    ``head`` picks the centroids: bank regions for ``localncc`` and ``mcm``,
    support images for ``ncc``. Returns ``(labels, scores)``.
    """
    if head in ("localncc", "mcm"):
        cents = local_centroids(params, bank, support, C)
    elif head == "ncc":
        cents = ncc_centroids(params, support, C)
    else:
        raise ValueError(f"unknown head {head!r}")
    Q = _query_embeddings(params, queries)
    return nearest_centroid(Q, cents), mcm_scores(Q, cents, tau)
