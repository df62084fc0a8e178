"""Projection head, noise-robust losses and the task adaptation loop.

Only the head is trained; pooled patch features play the part of a frozen
backbone. The loss is differentiated by hand through the region embeddings,
the image embeddings and the weighted prototypes built from them.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .cora import (AccumulatorState, BankEntry, MemoryBank, accumulate_image_weights, partition,
                   region_weights, update_memory_bank)
from .episode import (EPS_NORM, Episode, PatchGrid, RegionBox, Sample, default_side,
                      image_feature, integral_image, pool_boxes)
from .errors import (AllImagesFiltered, ClassMismatch, ConfigInvalid, DegeneratePrototype,
                     NonFiniteLoss, SideTooLarge, ZeroEmbedding)

LOG_FLOOR = math.log(1e-12)


@dataclass
class HeadParams:
    W1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, m)
    b2: np.ndarray  # (m,)

    _names = ("W1", "b1", "W2", "b2")

    def arrays(self):
        return [getattr(self, n) for n in self._names]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v) -> "HeadParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(v[i:i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        return HeadParams(*out)

    def __sub__(self, other: "HeadParams") -> "HeadParams":
        return HeadParams(*(a - b for a, b in zip(self.arrays(), other.arrays())))

    def scaled(self, s: float) -> "HeadParams":
        return HeadParams(*(s * a for a in self.arrays()))

    def to_json(self) -> dict:
        return {n: getattr(self, n).tolist() for n in self._names}

    @classmethod
    def from_json(cls, obj) -> "HeadParams":
        return cls(*(np.asarray(obj[n], dtype=np.float64) for n in cls._names))


def init_head(d: int, m: int = 128, hidden: int | None = None, seed=0) -> HeadParams:
    """Glorot-uniform weights and zero biases; hidden width defaults to max(d, m)."""
    h = hidden or max(d, m)
    rng = np.random.default_rng(seed)
    a1 = math.sqrt(6.0 / (d + h))
    a2 = math.sqrt(6.0 / (h + m))
    return HeadParams(rng.uniform(-a1, a1, (d, h)), np.zeros(h),
                      rng.uniform(-a2, a2, (h, m)), np.zeros(m))


def _forward(params: HeadParams, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pre = X @ params.W1 + params.b1
    act = np.maximum(pre, 0.0)
    out = act @ params.W2 + params.b2
    norms = np.linalg.norm(out, axis=1)
    if np.any(norms <= EPS_NORM):
        raise ZeroEmbedding("projection head produced a zero vector")
    E = out / norms[:, None]
    return E, (X, pre, act, norms)


def embed(params: HeadParams, X) -> np.ndarray:
    """Unit-norm embeddings for a batch of feature rows."""
    return _forward(params, X)[0]


def head_forward(params: HeadParams, feature) -> np.ndarray:
    return _forward(params, feature)[0][0]


def _backward(params: HeadParams, cache, E, dE) -> HeadParams:
    X, pre, act, norms = cache
    dO = (dE - E * np.sum(E * dE, axis=1, keepdims=True)) / norms[:, None]
    dW2 = act.T @ dO
    db2 = dO.sum(axis=0)
    dpre = (dO @ params.W2.T) * (pre > 0)
    return HeadParams(X.T @ dpre, dpre.sum(axis=0), dW2, db2)


# prototypes and posteriors


def prototype_coefficients(omega, labels, C: int, rho: float, strict: bool = False) -> np.ndarray:
    """Matrix A (C x N) with prototypes = A @ embeddings.

    Image weights below ``rho`` are zeroed and each class is divided by its
    count of surviving images. A class with no survivor falls back to the
    plain mean of its images unless ``strict`` is set.
    """
    omega = np.asarray(omega, dtype=np.float64)
    labels = np.asarray(labels)
    w = np.where(omega < rho, 0.0, omega)
    A = np.zeros((C, len(labels)))
    for c in range(C):
        members = labels == c
        if not members.any():
            raise ConfigInvalid(f"class {c + 1} has no images")
        alive = members & (w > 0)
        if alive.any():
            A[c, alive] = w[alive] / alive.sum()
        else:
            if strict:
                raise AllImagesFiltered(c + 1)
            A[c, members] = 1.0 / members.sum()
    return A


def _fallback_row(labels, c):
    members = np.asarray(labels) == c
    return members / members.sum()


def _safe_prototypes(A, E, labels):
    mu = A @ E
    norms = np.linalg.norm(mu, axis=1)
    for c in np.flatnonzero(norms <= EPS_NORM):
        A[c] = _fallback_row(labels, c)
        mu[c] = A[c] @ E
        norms[c] = np.linalg.norm(mu[c])
        if norms[c] <= EPS_NORM:
            raise DegeneratePrototype(f"prototype of class {c + 1} is the zero vector")
    return mu, norms


def weighted_prototypes(embeddings, omega, labels, rho: float, C: int | None = None,
                        strict: bool = False) -> np.ndarray:
    """Class prototypes from unit image embeddings.

    ``labels`` are 0-based class indices. Augmented images are passed as
    extra rows carrying the weight of the image they were built from.
    """
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    C = C if C is not None else int(labels.max()) + 1
    A = prototype_coefficients(omega, labels, C, rho, strict)
    mu, _ = _safe_prototypes(A, E, labels)
    return mu


def _log_softmax(S):
    S = S - S.max(axis=1, keepdims=True)
    return S - np.log(np.exp(S).sum(axis=1, keepdims=True))


def _cosines(R, mu):
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    mn = np.linalg.norm(mu, axis=1)
    if np.any(mn <= EPS_NORM):
        raise DegeneratePrototype("zero prototype")
    rn = np.linalg.norm(R, axis=1)
    if np.any(rn <= EPS_NORM):
        raise ZeroEmbedding("zero embedding")
    return (R / rn[:, None]) @ (mu / mn[:, None]).T


def class_posteriors(r, prototypes) -> np.ndarray:
    """Softmax over cosine similarities; a single vector gives a 1-D result."""
    S = _cosines(r, prototypes)
    p = np.exp(_log_softmax(S))
    return p[0] if np.ndim(r) == 1 else p


def _effective(lam, rho):
    lam = np.asarray(lam, dtype=np.float64)
    return np.where(lam < rho, 0.0, lam)


def clean_prototype_loss(region_embeddings, lam, labels, prototypes, rho: float) -> float:
    logp = np.maximum(_log_softmax(_cosines(region_embeddings, prototypes)), LOG_FLOOR)
    labels = np.asarray(labels)
    w = _effective(lam, rho)
    return float(-(w * logp[np.arange(len(labels)), labels]).sum() / len(labels))


def noise_entropy_loss(noisy_embeddings, prototypes) -> float:
    if len(noisy_embeddings) == 0:
        return 0.0
    logp = _log_softmax(_cosines(noisy_embeddings, prototypes))
    ent = -(np.exp(logp) * logp).sum(axis=1)
    return float(-ent.mean())


@dataclass
class IterationBatch:
    """Everything one optimisation step needs, as backbone features.

    ``img_labels``/``reg_labels`` are 0-based class indices; ``noisy`` marks
    the regions in the detected noisy set.
    """

    img_feats: np.ndarray
    img_labels: np.ndarray
    img_omega: np.ndarray
    reg_feats: np.ndarray
    reg_labels: np.ndarray
    reg_lam: np.ndarray
    noisy: np.ndarray
    C: int


def total_loss_and_grad(params: HeadParams, batch: IterationBatch, beta: float, rho: float,
                        detach_prototypes: bool = False):
    """Weighted clean loss plus ``beta`` times the noise entropy loss, with its
    exact gradient with respect to every head parameter.

    Returns ``(loss, grad, parts)`` where ``parts`` holds the two loss terms.
    """
    n_img = len(batch.img_feats)
    X = np.vstack([batch.img_feats, batch.reg_feats])
    E, cache = _forward(params, X)
    E_img, E_reg = E[:n_img], E[n_img:]

    A = prototype_coefficients(batch.img_omega, batch.img_labels, batch.C, rho)
    mu, mu_norms = _safe_prototypes(A, E_img, batch.img_labels)
    U = mu / mu_norms[:, None]

    S = E_reg @ U.T
    logp = np.maximum(_log_softmax(S), LOG_FLOOR)
    p = np.exp(logp)
    R = len(E_reg)
    rows = np.arange(R)
    y = np.asarray(batch.reg_labels)
    w = _effective(batch.reg_lam, rho)

    l_clean = -(w * logp[rows, y]).sum() / R
    gS = p * (w / R)[:, None]
    gS[rows, y] -= w / R

    noisy = np.asarray(batch.noisy, dtype=bool)
    l_noise = 0.0
    if noisy.any():
        n = noisy.sum()
        plogp = (p * logp).sum(axis=1, keepdims=True)
        l_noise = plogp[noisy].sum() / n
        gS[noisy] += (beta / n) * p[noisy] * (logp[noisy] - plogp[noisy])

    loss = l_clean + beta * l_noise
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss}")

    dE = np.zeros_like(E)
    dE[n_img:] = gS @ U
    if not detach_prototypes:
        dU = gS.T @ E_reg
        dmu = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / mu_norms[:, None]
        dE[:n_img] = A.T @ dmu
    grad = _backward(params, cache, E, dE)
    return float(loss), grad, {"clean": float(l_clean), "noise": float(l_noise)}


# augmentation


def intraswap(base: Sample, donor_entry, donor: Sample) -> Sample:
    """Paste the donor's stored clean box onto ``base``; the label stays."""
    sid, box = (donor_entry.sample_id, donor_entry.box) if isinstance(donor_entry, BankEntry) \
        else donor_entry
    box = RegionBox(*box)
    if base.label != donor.label:
        raise ClassMismatch(f"base class {base.label} != donor class {donor.label}")
    if sid != donor.id:
        raise ValueError(f"bank entry refers to sample {sid}, donor grid is {donor.id}")
    box.check(base.grid.H, base.grid.W)
    box.check(donor.grid.H, donor.grid.W)
    patches = base.grid.patches.copy()
    patches[box.row0:box.row1, box.col0:box.col1] = donor.grid.patches[box.row0:box.row1, box.col0:box.col1]
    return Sample(PatchGrid(patches, base.id), base.label, base.noise)


def cutmix(a: Sample, b: Sample, box, varpi: float, C: int):
    """Mix two samples: patches inside ``box`` come from ``a``, the rest from ``b``.

    Returns the mixed grid and the soft label ``varpi*onehot(a) + (1-varpi)*onehot(b)``.
    """
    box = RegionBox(*box)
    box.check(a.grid.H, a.grid.W)
    box.check(b.grid.H, b.grid.W)
    patches = b.grid.patches.copy()
    patches[box.row0:box.row1, box.col0:box.col1] = a.grid.patches[box.row0:box.row1, box.col0:box.col1]
    soft = np.zeros(C)
    soft[a.label - 1] += varpi
    soft[b.label - 1] += 1.0 - varpi
    return PatchGrid(patches, a.id), soft


def random_cutmix(a: Sample, b: Sample, C: int, rng):
    """CutMix with the mixing weight drawn from U(0, 1) and a box of matching area."""
    rng = np.random.default_rng(rng)
    varpi = float(rng.uniform(0.0, 1.0))
    H, W = a.grid.H, a.grid.W
    bh = max(1, min(H, int(round(H * math.sqrt(varpi)))))
    bw = max(1, min(W, int(round(W * math.sqrt(varpi)))))
    r0 = int(rng.integers(0, H - bh + 1))
    c0 = int(rng.integers(0, W - bw + 1))
    return cutmix(a, b, RegionBox(r0, c0, r0 + bh, c0 + bw), varpi, C)


# adaptation loop


BETA_OOD_DETECTION = 1.0


@dataclass
class AdaptConfig:
    eta: int = 40
    k: int = 4
    side: int | None = None
    rho: float = 0.7
    beta: float = 0.3
    gamma_momentum: float = 0.7
    learning_rate: float = 0.1
    intraswap_per_class: int = 1
    embed_dim: int = 128
    hidden: int | None = None
    detach_prototypes: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.eta < 0 or self.k < 1 or self.rho <= 0 or self.beta < 0:
            raise ConfigInvalid("need eta >= 0, k >= 1, rho > 0, beta >= 0")
        if not 0.0 <= self.gamma_momentum <= 1.0:
            raise ConfigInvalid("gamma_momentum must lie in [0, 1]")
        if self.learning_rate <= 0 or self.intraswap_per_class < 0 or self.embed_dim < 1:
            raise ConfigInvalid("learning_rate and embed_dim must be positive")

    @classmethod
    def for_ood_detection(cls, **overrides) -> "AdaptConfig":
        """Defaults used when the head feeds an OOD score: a stronger entropy term."""
        return cls(**{"beta": BETA_OOD_DETECTION, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown AdaptConfig keys: {sorted(unknown)}")
        return cls(**d)


def _seeds(seed):
    s_init, s_loop = np.random.SeedSequence(seed).spawn(2)
    return s_init, s_loop


def initial_head(episode: Episode, cfg: AdaptConfig) -> HeadParams:
    """The head ``adapt_task`` starts from for this config."""
    return init_head(episode.dims[2], cfg.embed_dim, cfg.hidden, _seeds(cfg.seed)[0])


def adapt_task(episode: Episode, cfg: AdaptConfig | None = None, dump=None):
    """Adapt a fresh head to the support set.

    Returns ``(params, bank, accumulator)``. When ``dump`` is a writable text
    stream, per-region weights and per-image weights are written to it as
    JSON lines every iteration.
    """
    cfg = cfg or AdaptConfig()
    cfg.validate()
    params = initial_head(episode, cfg)
    rng = np.random.default_rng(_seeds(cfg.seed)[1])

    support = episode.support
    H, W, _ = episode.dims
    side = cfg.side or default_side(H, W)
    sids = np.array([s.id for s in support])
    labels = np.array([s.label - 1 for s in support])
    img_feats = np.stack([image_feature(s.grid) for s in support])
    by_class = [np.flatnonzero(labels == c) for c in range(episode.C)]

    state = AccumulatorState(gamma_momentum=cfg.gamma_momentum)
    bank = MemoryBank(2 * episode.K)
    by_id = episode.support_by_id()

    tables = np.stack([integral_image(s.grid) for s in support])
    owner = np.repeat(np.arange(len(support)), cfg.k)
    reg_sid = sids[owner]
    reg_lab = labels[owner]
    if side > min(H, W):
        raise SideTooLarge(f"side {side} does not fit a {H}x{W} grid")

    for t in range(1, cfg.eta + 1):
        # one draw per iteration for every support image's k crops
        rows = rng.integers(0, H - side + 1, size=owner.size)
        cols = rng.integers(0, W - side + 1, size=owner.size)
        feats = pool_boxes(tables, owner, rows, cols, side)
        boxes = [RegionBox(int(r), int(c), int(r) + side, int(c) + side) for r, c in zip(rows, cols)]
        *_, lam = region_weights(feats, reg_lab, reg_sid)

        per_image = {}
        for sid, l in zip(reg_sid.tolist(), lam.tolist()):
            per_image.setdefault(sid, []).append(l)
        state = accumulate_image_weights(state, per_image)
        clean, noisy = partition(lam, cfg.rho)
        bank = update_memory_bank(
            bank, ((int(reg_lab[i]) + 1, int(reg_sid[i]), boxes[i], float(lam[i])) for i in clean),
            episode.K)

        omega = np.array([state.omega[s] for s in sids.tolist()])
        aug_feats, aug_labels, aug_omega = [], [], []
        for c in range(episode.C):
            entries = bank.get(c + 1)
            if not entries:
                continue
            members = by_class[c]
            kept = members[omega[members] >= cfg.rho]
            pool = kept if len(kept) else members
            for _ in range(cfg.intraswap_per_class):
                entry = entries[int(rng.integers(len(entries)))]
                base = support[int(pool[int(rng.integers(len(pool)))])]
                mixed = intraswap(base, entry, by_id[entry.sample_id])
                aug_feats.append(image_feature(mixed.grid))
                aug_labels.append(c)
                aug_omega.append(state.omega[base.id])

        batch = IterationBatch(
            img_feats=np.vstack([img_feats] + ([np.stack(aug_feats)] if aug_feats else [])),
            img_labels=np.concatenate([labels, np.array(aug_labels, dtype=int)]),
            img_omega=np.concatenate([omega, np.array(aug_omega)]),
            reg_feats=feats, reg_labels=reg_lab, reg_lam=lam,
            noisy=np.isin(np.arange(len(lam)), noisy), C=episode.C)
        _, grad, _ = total_loss_and_grad(params, batch, cfg.beta, cfg.rho, cfg.detach_prototypes)
        params = params - grad.scaled(cfg.learning_rate)

        if dump is not None:
            for i in range(len(lam)):
                dump.write(json.dumps({"t": t, "kind": "region", "sample_id": int(reg_sid[i]),
                                       "box": list(boxes[i]), "lambda": float(lam[i])}) + "\n")
            for sid in sids.tolist():
                dump.write(json.dumps({"t": t, "kind": "image", "sample_id": sid,
                                       "omega": float(state.omega[sid])}) + "\n")
    return params, bank, state


def save_model(path, params: HeadParams, bank: MemoryBank, state: AccumulatorState,
               cfg: AdaptConfig, episode: Episode) -> None:
    obj = {"params": params.to_json(), "bank": bank.to_json(),
           "omega": {str(k): v for k, v in sorted(state.omega.items())},
           "config": dataclasses.asdict(cfg), "C": episode.C, "K": episode.K}
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_model(path):
    with open(path) as fh:
        obj = json.load(fh)
    return (HeadParams.from_json(obj["params"]), MemoryBank.from_json(obj["bank"]),
            {int(k): v for k, v in obj.get("omega", {}).items()},
            AdaptConfig.from_dict(obj["config"]))
