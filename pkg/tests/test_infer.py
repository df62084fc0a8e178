import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from detapp.adapt import AdaptConfig, _cosines, adapt_task, embed, init_head
from detapp.cora import BankEntry, MemoryBank
from detapp.episode import RegionBox, image_feature, pool_region
from detapp.errors import EmptyBankClass
from detapp.infer import (local_centroids, local_ncc_predict, mcm_score, mcm_scores, ncc_centroids, ncc_predict,
                          nearest_centroid, predict_queries)
from detapp.synth import GenConfig, generate_episode

from conftest import sample_of


def test_nearest_centroid_cases():
    cents = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert nearest_centroid(np.array([[0.0, 2.0, 0.0]]), cents).tolist() == [2]
    assert nearest_centroid(np.array([[1.0, 1.0, 0.0]]), cents).tolist() == [1]


def test_nearest_centroid_matches_exhaustive_argmax():
    rng = np.random.default_rng(0)
    E, cents = rng.normal(size=(30, 4)), rng.normal(size=(3, 4))
    for e, pred in zip(E, nearest_centroid(E, cents)):
        cos = [e @ c / np.linalg.norm(e) / np.linalg.norm(c) for c in cents]
        best = max(range(3), key=lambda j: (cos[j], -j))
        assert pred == best + 1


def hand_task():
    rng = np.random.default_rng(3)
    support = [sample_of(rng.normal(size=(3, 3, 4)) + 2 * np.eye(4)[c], c + 1, sample_id=10 * c + i)
               for c in range(3) for i in range(2)]
    entries = {c + 1: [BankEntry(10 * c + i, RegionBox(0, 0, 2, 2), 1.0) for i in range(2)] for c in range(3)}
    return support, MemoryBank(4, entries), init_head(4, 8, seed=0)


def test_local_ncc_matches_brute_force():
    support, bank, params = hand_task()
    by_id = {s.id: s for s in support}
    rng = np.random.default_rng(9)
    for _ in range(10):
        q = sample_of(rng.normal(size=(3, 3, 4)) * 2, 1, sample_id=99).grid
        cents = []
        for c in (1, 2, 3):
            feats = [pool_region(by_id[e.sample_id].grid, e.box) for e in bank.get(c)]
            cents.append(np.mean(embed(params, np.stack(feats)), axis=0))
        e = embed(params, image_feature(q)[None])[0]
        cos = [e @ c / np.linalg.norm(c) for c in cents]
        assert local_ncc_predict(params, bank, support, q) == int(np.argmax(cos)) + 1


def test_single_class_always_one():
    support, bank, params = hand_task()
    one = [s for s in support if s.label == 1]
    bank1 = MemoryBank(4, {1: bank.get(1)})
    q = support[-1].grid
    assert local_ncc_predict(params, bank1, one, q) == 1 and ncc_predict(params, one, q) == 1


def test_empty_bank_class():
    support, bank, params = hand_task()
    with pytest.raises(EmptyBankClass):
        local_ncc_predict(params, MemoryBank(4, {1: bank.get(1), 3: bank.get(3)}), support, support[0].grid)


def test_ncc_support_query_is_own_class():
    rng = np.random.default_rng(4)
    support = [sample_of(rng.normal(size=(2, 2, 5)), c, sample_id=c) for c in (1, 2, 3)]
    params = init_head(5, 16, seed=1)
    for s in support:
        assert ncc_predict(params, support, s.grid) == s.label


def test_predictions_invariant_to_support_order():
    support, bank, params = hand_task()
    q = [sample_of(np.random.default_rng(i).normal(size=(3, 3, 4)), 1, sample_id=50 + i) for i in range(8)]
    for head in ("localncc", "ncc"):
        a = predict_queries(params, bank, support, q, head=head)
        b = predict_queries(params, bank, support[::-1], q, head=head)
        assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1])


def test_mcm_cases():
    cents = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(mcm_scores(np.array([[1.0, 1.0]]), cents), 0.5)
    e = np.array([[0.9, math.sqrt(1 - 0.81)]])
    cents2 = np.array([[1.0, 0.0], [0.1, math.sqrt(1 - 0.01)]])
    cos = _cosines(e, cents2)[0]
    expected = math.exp(cos[0]) / (math.exp(cos[0]) + math.exp(cos[1]))
    assert abs(mcm_scores(e, cents2)[0] - expected) < 1e-12
    assert abs(math.exp(0.9) / (math.exp(0.9) + math.exp(0.1)) - 0.6900) < 1e-4
    assert mcm_scores(np.array([[1.0, 0.2]]), cents, tau=1e-3)[0] > 1 - 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.floats(0.05, 5.0))
def test_mcm_range(seed, C, tau):
    rng = np.random.default_rng(seed)
    s = mcm_scores(rng.normal(size=(4, 3)), rng.normal(size=(C, 3)), tau)
    assert np.all(s >= 1 / C - 1e-12) and np.all(s <= 1 + 1e-12)


def test_mcm_score_single_query():
    support, bank, params = hand_task()
    cents = local_centroids(params, bank, support)
    q = support[0].grid
    assert mcm_score(params, cents, q) == pytest.approx(predict_queries(params, bank, support, [q], head="mcm")[1][0])


def test_mcm_rejects_bad_temperature():
    with pytest.raises(ValueError):
        mcm_scores(np.ones((1, 2)), np.eye(2), tau=0.0)


def test_unknown_head():
    support, bank, params = hand_task()
    with pytest.raises(ValueError):
        predict_queries(params, bank, support, [support[0]], head="knn")


def test_local_and_plain_ncc_agree_without_noise():
    ep = generate_episode(GenConfig(clutter_ratio=0.0, ood_ratio=0.0, query_ood_ratio=0.0,
                                    cluster_sep=6.0, patch_noise_sd=0.5, seed=2))
    params, bank, _ = adapt_task(ep, AdaptConfig(eta=10))
    a, _ = predict_queries(params, bank, ep.support, ep.query, head="localncc")
    b, _ = predict_queries(params, bank, ep.support, ep.query, head="ncc")
    assert np.mean(a == b) >= 0.95
    assert ncc_centroids(params, ep.support).shape == (ep.C, 128)
