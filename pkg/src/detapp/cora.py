"""Contrastive relevance aggregation over cropped region features.

Each region is scored by its mean cosine to regions of other images in its
class (phi) and to regions of every other class (psi). Both scores are
softmax-normalised within the class and their ratio is the region weight.
Nothing here has trainable parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .episode import EPS_NORM, RegionBox
from .errors import MissingPrevState, TooFewClasses, TooFewSamples, ZeroVector


@dataclass
class RegionRecord:
    sample_id: int
    class_label: int
    box: RegionBox
    feature: np.ndarray
    phi: float = float("nan")
    psi: float = float("nan")
    phi_norm: float = float("nan")
    psi_norm: float = float("nan")
    lam: float = float("nan")


@dataclass
class RegionWeightTable:
    sample_ids: np.ndarray
    labels: np.ndarray
    boxes: list
    phi: np.ndarray
    psi: np.ndarray
    phi_norm: np.ndarray
    psi_norm: np.ndarray
    lam: np.ndarray

    def __len__(self):
        return len(self.lam)

    def image_lambdas(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for sid, lam in zip(self.sample_ids.tolist(), self.lam.tolist()):
            out.setdefault(sid, []).append(lam)
        return out


def _class_softmax(x, labels):
    out = np.empty_like(x)
    for c in np.unique(labels):
        m = labels == c
        z = np.exp(x[m] - x[m].max())
        out[m] = z / z.sum()
    return out


def region_weights(features, labels, sample_ids):
    """Array form of :func:`compute_region_weights`.

    Returns ``(phi, psi, phi_norm, psi_norm, lam)``, each of length R.
    """
    Z = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    sample_ids = np.asarray(sample_ids)
    if len(np.unique(labels)) < 2:
        raise TooFewClasses("region weighting needs at least two classes")
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms <= EPS_NORM):
        raise ZeroVector("zero-norm region feature")
    Zn = Z / norms[:, None]
    S = Zn @ Zn.T

    same_class = labels[:, None] == labels[None, :]
    # regions of the same image never count as in-class evidence
    in_mask = same_class & (sample_ids[:, None] != sample_ids[None, :])
    out_mask = ~same_class
    n_in = in_mask.sum(axis=1)
    if np.any(n_in == 0):
        raise TooFewSamples("a class has regions from a single image only")

    phi = (S * in_mask).sum(axis=1) / n_in
    psi = (S * out_mask).sum(axis=1) / out_mask.sum(axis=1)
    phi_norm = _class_softmax(phi, labels)
    psi_norm = _class_softmax(psi, labels)
    return phi, psi, phi_norm, psi_norm, phi_norm / psi_norm


def compute_region_weights(regions: list[RegionRecord]) -> RegionWeightTable:
    feats = np.stack([r.feature for r in regions])
    labels = np.array([r.class_label for r in regions])
    sids = np.array([r.sample_id for r in regions])
    phi, psi, phi_n, psi_n, lam = region_weights(feats, labels, sids)
    for i, r in enumerate(regions):
        r.phi, r.psi, r.phi_norm, r.psi_norm, r.lam = phi[i], psi[i], phi_n[i], psi_n[i], lam[i]
    return RegionWeightTable(sids, labels, [r.box for r in regions], phi, psi, phi_n, psi_n, lam)


def partition(lam, rho: float):
    """Indices of clean (lam >= rho) and noisy (lam < rho) regions."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    lam = lam.lam if isinstance(lam, RegionWeightTable) else np.asarray(lam)
    noisy = lam < rho
    return np.flatnonzero(~noisy), np.flatnonzero(noisy)


@dataclass
class AccumulatorState:
    omega: dict = field(default_factory=dict)
    t: int = 1  # iteration the next update belongs to
    gamma_momentum: float = 0.7


def accumulate_image_weights(state: AccumulatorState, per_image_lambdas: dict) -> AccumulatorState:
    g = state.gamma_momentum
    omega = dict(state.omega)
    for sid, lams in per_image_lambdas.items():
        if len(lams) < 1:
            raise ValueError(f"image {sid} has no region weights")
        m = float(np.mean(lams))
        if state.t == 1:
            omega[sid] = m
        else:
            if sid not in state.omega:
                raise MissingPrevState(f"image {sid} has no weight from iteration {state.t - 1}")
            omega[sid] = g * state.omega[sid] + (1.0 - g) * m
    return AccumulatorState(omega, state.t + 1, g)


@dataclass(frozen=True)
class BankEntry:
    sample_id: int
    box: RegionBox
    weight: float


@dataclass
class MemoryBank:
    capacity: int
    entries: dict = field(default_factory=dict)  # class label -> list[BankEntry]

    def get(self, c) -> list[BankEntry]:
        return self.entries.get(c, [])

    def to_json(self) -> dict:
        return {"capacity": self.capacity,
                "entries": {str(c): [{"sample_id": e.sample_id, "box": list(e.box), "weight": e.weight}
                                     for e in es]
                            for c, es in sorted(self.entries.items())}}

    @classmethod
    def from_json(cls, obj) -> "MemoryBank":
        entries = {int(c): [BankEntry(int(e["sample_id"]), RegionBox(*e["box"]), float(e["weight"]))
                            for e in es]
                   for c, es in obj["entries"].items()}
        return cls(int(obj["capacity"]), entries)


def update_memory_bank(bank: MemoryBank, regions, K: int | None = None) -> MemoryBank:
    """Merge clean regions into the bank and keep the top-2K per class.

    ``regions`` yields ``(class_label, sample_id, box, weight)``. A repeated
    ``(sample_id, box)`` keeps its larger weight.
    """
    capacity = 2 * K if K is not None else bank.capacity
    merged = {c: {(e.sample_id, e.box): e.weight for e in es} for c, es in bank.entries.items()}
    for c, sid, box, w in regions:
        key = (int(sid), RegionBox(*box))
        slot = merged.setdefault(c, {})
        if key not in slot or w > slot[key]:
            slot[key] = float(w)
    entries = {}
    for c, slot in merged.items():
        ranked = sorted(slot.items(), key=lambda kv: (-kv[1], kv[0][0], tuple(kv[0][1])))
        entries[c] = [BankEntry(sid, box, w) for (sid, box), w in ranked[:capacity]]
    return MemoryBank(capacity, entries)
