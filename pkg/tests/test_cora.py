import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from detapp.acceptance import brute_force_weights, random_cora_instance
from detapp.adapt import AdaptConfig
from detapp.cora import (AccumulatorState, BankEntry, MemoryBank, RegionRecord, accumulate_image_weights,
                         compute_region_weights, partition, update_memory_bank)
from detapp.episode import RegionBox
from detapp.errors import MissingPrevState, TooFewClasses, TooFewSamples, ZeroVector

B = RegionBox(0, 0, 1, 1)


def rec(sid, c, v):
    return RegionRecord(sid, c, B, np.asarray(v, dtype=float))


def test_identical_features_give_unit_weights():
    recs = [rec(s, 1 + s % 2, [1.0, 2.0]) for s in range(6)]
    table = compute_region_weights(recs)
    assert np.allclose(table.lam, 1.0)
    assert np.allclose(table.phi_norm, 1 / 3)


def test_single_class_rejected():
    with pytest.raises(TooFewClasses):
        compute_region_weights([rec(0, 1, [1, 0]), rec(1, 1, [0, 1])])


def test_single_image_class_rejected():
    with pytest.raises(TooFewSamples):
        compute_region_weights([rec(0, 1, [1, 0]), rec(0, 1, [0, 1]), rec(1, 2, [1, 1]), rec(2, 2, [1, 2])])


def test_zero_feature_rejected():
    with pytest.raises(ZeroVector):
        compute_region_weights([rec(0, 1, [0, 0]), rec(1, 1, [0, 1]), rec(2, 2, [1, 1]), rec(3, 2, [1, 2])])


def test_hand_instance_matches_loops():
    # two classes, two images each, two regions per image
    vecs = {
        (0, 1): [[1.0, 0.1], [0.9, 0.3]], (1, 1): [[1.0, -0.2], [0.2, 1.0]],
        (2, 2): [[0.0, 1.0], [0.1, 0.8]], (3, 2): [[-0.3, 1.0], [1.0, 0.0]],
    }
    recs = [rec(sid, c, v) for (sid, c), vs in vecs.items() for v in vs]
    table = compute_region_weights(recs)
    phi, psi, lam = brute_force_weights([r.feature.tolist() for r in recs], [r.class_label for r in recs],
                                        [r.sample_id for r in recs])
    assert np.allclose(table.phi, phi, atol=1e-12)
    assert np.allclose(table.psi, psi, atol=1e-12)
    assert np.allclose(table.lam, lam, atol=1e-12)
    # the off-class region of image 3 is the least relevant of class 2
    assert table.lam[7] == table.lam[table.labels == 2].min()
    assert recs[7].lam == table.lam[7]


def test_random_instances_match_loops():
    rng = np.random.default_rng(7)
    for _ in range(100):
        recs = random_cora_instance(rng)
        table = compute_region_weights(recs)
        _, _, lam = brute_force_weights([r.feature.tolist() for r in recs], [r.class_label for r in recs],
                                        [r.sample_id for r in recs])
        assert np.max(np.abs(table.lam - lam)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_weights_invariant_to_feature_scale(seed, scale):
    recs = random_cora_instance(np.random.default_rng(seed))
    a = compute_region_weights(recs).lam
    b = compute_region_weights([rec(r.sample_id, r.class_label, r.feature * scale) for r in recs]).lam
    assert np.allclose(a, b, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalised_scores_sum_to_one_per_class(seed):
    table = compute_region_weights(random_cora_instance(np.random.default_rng(seed)))
    for c in np.unique(table.labels):
        m = table.labels == c
        assert abs(table.phi_norm[m].sum() - 1) < 1e-12
        assert abs(table.psi_norm[m].sum() - 1) < 1e-12
    assert np.all(table.lam > 0)


def test_partition_threshold():
    clean, noisy = partition(np.array([0.2, 0.5, 1.3]), 0.3)
    assert noisy.tolist() == [0] and clean.tolist() == [1, 2]
    clean, noisy = partition(np.array([0.3]), 0.3)
    assert clean.tolist() == [0] and noisy.size == 0


def test_partition_accepts_table():
    table = compute_region_weights(random_cora_instance(np.random.default_rng(0)))
    clean, noisy = partition(table, 1.0)
    assert sorted(clean.tolist() + noisy.tolist()) == list(range(len(table)))


def test_threshold_default():
    # recalibrated for the pooled-patch features, see the README
    assert AdaptConfig().rho == 0.7


def test_momentum_first_step_is_mean():
    s = accumulate_image_weights(AccumulatorState(), {3: [0.4, 0.8]})
    assert abs(s.omega[3] - 0.6) < 1e-15 and s.t == 2


def test_momentum_mixing():
    s = AccumulatorState({3: 0.6}, t=2, gamma_momentum=0.7)
    assert abs(accumulate_image_weights(s, {3: [1.0]}).omega[3] - 0.72) < 1e-15


def test_momentum_fixed_point():
    s = AccumulatorState()
    for _ in range(25):
        s = accumulate_image_weights(s, {1: [0.3, 0.5], 2: [1.7]})
    assert abs(s.omega[1] - 0.4) < 1e-14 and abs(s.omega[2] - 1.7) < 1e-14


def test_momentum_missing_state():
    s = accumulate_image_weights(AccumulatorState(), {1: [1.0]})
    with pytest.raises(MissingPrevState):
        accumulate_image_weights(s, {2: [1.0]})


def test_momentum_does_not_mutate_input():
    s = accumulate_image_weights(AccumulatorState(), {1: [1.0]})
    accumulate_image_weights(s, {1: [0.0]})
    assert s.omega == {1: 1.0} and s.t == 2


def box(i):
    return RegionBox(i, 0, i + 1, 1)


def test_bank_stores_and_sorts():
    bank = update_memory_bank(MemoryBank(4), [(1, 0, box(0), 0.5), (1, 1, box(1), 0.9), (1, 2, box(2), 0.7)], K=2)
    assert [e.weight for e in bank.get(1)] == [0.9, 0.7, 0.5]


def test_bank_drops_lowest():
    regs = [(1, i, box(i), w) for i, w in enumerate([0.5, 0.9, 0.1, 0.7, 0.3])]
    bank = update_memory_bank(MemoryBank(4), regs, K=2)
    assert len(bank.get(1)) == 4 and min(e.weight for e in bank.get(1)) == 0.3


def test_bank_deduplicates():
    bank = update_memory_bank(MemoryBank(4), [(2, 5, box(1), 0.5)], K=2)
    bank = update_memory_bank(bank, [(2, 5, box(1), 0.9)], K=2)
    assert bank.get(2) == [BankEntry(5, box(1), 0.9)]
    bank = update_memory_bank(bank, [(2, 5, box(1), 0.2)], K=2)
    assert bank.get(2) == [BankEntry(5, box(1), 0.9)]


def test_bank_matches_replay_oracle():
    rng = np.random.default_rng(3)
    bank, stream = MemoryBank(6), []
    for _ in range(20):
        batch = [(int(rng.integers(1, 3)), int(rng.integers(0, 4)), box(int(rng.integers(0, 3))),
                  float(rng.uniform())) for _ in range(5)]
        stream += batch
        bank = update_memory_bank(bank, batch, K=3)
    best = {}
    for c, sid, b, w in stream:
        best[(c, sid, b)] = max(w, best.get((c, sid, b), -1))
    for c in (1, 2):
        ws = sorted((w for (cc, _, _), w in best.items() if cc == c), reverse=True)[:6]
        assert [e.weight for e in bank.get(c)] == ws


def test_bank_json_round_trip():
    bank = update_memory_bank(MemoryBank(4), [(1, 0, box(0), 0.5), (2, 1, box(1), 0.9)], K=2)
    assert MemoryBank.from_json(bank.to_json()) == bank
