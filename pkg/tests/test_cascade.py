import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fragtrack.blobgraph import GlobalFragments
from fragtrack.cascade import (DEGRADED, NON_CONSISTENT, NOT_CERTAIN, NOT_UNIQUE, PROTOCOL1_DONE, Cascade,
                               AccumulationState, CascadeParams, IdentificationData, IdentityDistribution,
                               NoGlobalFragment, assess_global_fragment, assessment_order, best_attempt,
                               certainty, choose_first_global_fragment, coexisting_duplicates,
                               identity_distribution, p1_from_frequencies, sort_globals_by_distance, top_two)
from fragtrack.classifier import ClassifierModel, identification_train_config
from oracles import certainty_bruteforce, p1_exact, top2

FAST = identification_train_config(learning_rate=0.05, optimizer="adam", max_epochs=150, batch_size=64)


# formulas ----------------------------------------------------------------------

def test_p1_examples():
    np.testing.assert_allclose(p1_from_frequencies([5, 0, 0]), [32 / 34, 1 / 34, 1 / 34], rtol=1e-12)
    assert p1_from_frequencies([5, 0, 0])[0] == pytest.approx(0.9412, abs=1e-4)
    np.testing.assert_allclose(p1_from_frequencies([0, 0, 0]), [1 / 3] * 3)


def test_p1_overflow_safe():
    p = p1_from_frequencies([10**6, 10**6 - 1, 3])
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0, abs=1e-9)
    assert p[0] == pytest.approx(2 / 3)


@given(st.lists(st.integers(0, 60), min_size=2, max_size=8))
def test_p1_matches_exact(freq):
    np.testing.assert_allclose(p1_from_frequencies(freq), p1_exact(freq), rtol=1e-9, atol=1e-300)


def test_certainty_example():
    c = certainty([0.94, 0.03, 0.03], [0.9, 0.6, 0.0])
    assert c == pytest.approx((0.9 * 0.94 - 0.6 * 0.03) / 0.97)
    assert c == pytest.approx(0.8536, abs=1e-4)


def test_top_two_ties_lower_index():
    assert top_two([0.2, 0.4, 0.4]) == (1, 2)
    assert top_two([0.5, 0.5]) == (0, 1)


@given(st.integers(0, 10**6))
def test_certainty_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    k = int(rng.integers(1, 12))
    a = rng.normal(size=(k, n)) * rng.uniform(0.1, 4)
    rows = np.exp(a) / np.exp(a).sum(1, keepdims=True)
    d = identity_distribution(rows)
    cert, p1, freq = certainty_bruteforce(rows.tolist())
    assert list(d.frequencies) == freq
    np.testing.assert_allclose(d.p1, p1, rtol=1e-9)
    assert d.cert == pytest.approx(cert, rel=1e-9, abs=1e-12)
    assert d.argmax == top2(p1)[0]


# ordering ------------------------------------------------------------------------

def test_choose_first_global():
    g = GlobalFragments(np.array([[0, 1], [2, 3]]), np.array([0, 50]))
    assert choose_first_global_fragment(g, [10, 5, 8, 7]) == 1
    one = GlobalFragments(np.array([[0, 1]]), np.array([4]))
    assert choose_first_global_fragment(one, [1, 2]) == 0
    tie = GlobalFragments(np.array([[0, 1], [2, 3]]), np.array([30, 10]))
    assert choose_first_global_fragment(tie, [5, 5, 5, 5]) == 1
    assert list(sort_globals_by_distance(g, [10, 5, 8, 7])) == [1, 0]
    with pytest.raises(NoGlobalFragment):
        choose_first_global_fragment(GlobalFragments(np.zeros((0, 2), int), np.zeros(0, int)), [])


def test_assessment_order_by_core_distance():
    g = GlobalFragments(np.zeros((5, 2), int), np.array([0, 10, 20, 30, 40]))
    assert list(assessment_order(g, 2)) == [1, 3, 0, 4]


# toy identification data -------------------------------------------------------

def signal_images(identity, k, side=4, rng=None, noise=0.05):
    """Images whose class signal survives 180-degree rotation."""
    rng = rng or np.random.default_rng(identity)
    x = rng.normal(0, noise, size=(k, side * side))
    x[:, identity] += 1.0
    x[:, side * side - 1 - identity] += 1.0
    return x.reshape(k, side, side).astype(np.float32)


def toy_data(frags, globals_, n, distances=None, images=None):
    """``frags``: list of (true_identity, start, end)."""
    sizes = [e - s + 1 for _, s, e in frags]
    ptr = np.concatenate([[0], np.cumsum(sizes)])
    if images is None:
        images = np.concatenate([signal_images(t, k, rng=np.random.default_rng(i))
                                 for i, ((t, _, _), k) in enumerate(zip(frags, sizes))])
    G = GlobalFragments(np.array([sorted(m) for m in globals_], dtype=np.int64),
                        np.array([max(frags[f][1] for f in m) for m in globals_], dtype=np.int64))
    if distances is None:
        distances = np.array(sizes, dtype=float)
    return IdentificationData(images, ptr, np.array([s for _, s, _ in frags]),
                              np.array([e for _, _, e in frags]), np.asarray(distances, float), G, n)


def dist(p1_argmax, n, cert, pmax=0.9):
    p1 = np.full(n, (1 - pmax) / (n - 1))
    p1[p1_argmax] = pmax
    return IdentityDistribution(np.zeros(n), p1, cert, np.zeros(n))


def three_coexisting():
    return toy_data([(0, 0, 9), (1, 0, 9), (2, 0, 9)], [[0, 1, 2]], 3)


def test_assess_acceptable():
    d = three_coexisting()
    a = assess_global_fragment([0, 1, 2], {0: dist(0, 3, .9), 1: dist(1, 3, .9), 2: dist(2, 3, .9)},
                               np.zeros(3, int), d)
    assert a.acceptable and a.temporary == {0: 1, 1: 2, 2: 3}


def test_assess_not_certain():
    d = three_coexisting()
    a = assess_global_fragment([0, 1, 2], {0: dist(0, 3, .9), 1: dist(1, 3, .05), 2: dist(2, 3, .9)},
                               np.zeros(3, int), d)
    assert not a.acceptable and a.reason == NOT_CERTAIN


def test_assess_non_consistent():
    d = three_coexisting()
    a = assess_global_fragment([0, 1, 2], {0: dist(2, 3, .9, .95), 1: dist(2, 3, .9, .8), 2: dist(0, 3, .9)},
                               np.zeros(3, int), d)
    assert not a.acceptable and a.reason == NON_CONSISTENT


def test_assess_low_p1_is_non_consistent():
    d = toy_data([(0, 0, 1), (1, 0, 1)], [[0, 1]], 2)  # |F| = 2: need max P1 > 0.5
    a = assess_global_fragment([0, 1], {0: dist(0, 2, .9, .5), 1: dist(1, 2, .9)}, np.zeros(2, int), d)
    assert a.reason == NON_CONSISTENT


def test_assess_known_members_keep_identity():
    # two members already hold identity 1 through non-coexisting knowledge -> duplicate ids
    d = toy_data([(0, 0, 9), (1, 0, 9), (2, 20, 29), (0, 20, 29)], [[0, 1], [2, 3]], 2)
    ident = np.array([1, 2, 1, 1])
    a = assess_global_fragment([2, 3], {}, ident, d)
    assert a.reason == NOT_UNIQUE


def test_best_attempt():
    assert best_attempt([0.7, 0.93]) == 1
    assert best_attempt([0.7, 0.6, 0.65]) == 0
    assert best_attempt([0.5, 0.5]) == 0


def test_coexisting_duplicates():
    d = toy_data([(0, 0, 9), (1, 5, 9), (0, 20, 29)], [[0, 1]], 2)
    assert coexisting_duplicates(np.array([1, 1, 1]), d.coexist) == [(0, 1)]
    assert coexisting_duplicates(np.array([1, 0, 1]), d.coexist) == []


# accumulation details ----------------------------------------------------------

def test_per_identity_cap_1800_old_1200_new():
    d = three_coexisting()
    c = Cascade(d, CascadeParams())
    y = np.zeros(4000, int)
    is_old = np.zeros(4000, bool)
    is_old[:2500] = True
    keep = c._cap_per_identity(np.arange(4000), y, is_old)
    assert len(keep) == 3000
    assert is_old[keep].sum() == 1800 and (~is_old[keep]).sum() == 1200
    small = c._cap_per_identity(np.arange(10), np.zeros(10, int), np.ones(10, bool))
    assert len(small) == 10


def _partial_setup(accumulated, taken=()):
    # fragment 0 coexists with 1..4
    frags = [(i, 0, 9) for i in range(5)]
    d = toy_data(frags, [[0, 1, 2, 3, 4]], 5)
    c = Cascade(d, CascadeParams())
    ident = np.zeros(5, int)
    acc = np.zeros(5, bool)
    for f, i in accumulated:
        ident[f] = i
        acc[f] = True
    st_ = AccumulationState(ident, acc, np.where(acc, 0, -1), None, 0)
    return c, st_


def test_partial_accumulation_example():
    c, s = _partial_setup([(1, 1), (2, 2)])
    n = c._partial(s, {0: dist(2, 5, 0.2)})
    assert n == 1 and s.accumulated[0] and s.identity[0] == 3


def test_partial_needs_half_of_neighbours():
    c, s = _partial_setup([(1, 1)])
    assert c._partial(s, {0: dist(2, 5, 0.2)}) == 0


def test_partial_rejects_taken_identity_and_low_cert():
    c, s = _partial_setup([(1, 1), (2, 3)])
    assert c._partial(s, {0: dist(2, 5, 0.2)}) == 0
    c, s = _partial_setup([(1, 1), (2, 2)])
    assert c._partial(s, {0: dist(2, 5, 0.1)}) == 0


# whole protocols on toy data ---------------------------------------------------

def test_single_global_covering_everything_is_protocol1():
    d = three_coexisting()
    out = Cascade(d, CascadeParams(train=FAST)).run()
    assert out.status == PROTOCOL1_DONE and out.coverage == 1.0
    assert out.protocols_run == ["protocol1"]
    assert sorted(out.identity.tolist()) == sorted(set(out.identity.tolist())) and (out.identity > 0).all()


def test_two_clean_globals_protocol1():
    frags = [(0, 0, 29), (1, 0, 29), (0, 40, 59), (1, 40, 59)]
    d = toy_data(frags, [[0, 1], [2, 3]], 2)
    out = Cascade(d, CascadeParams(train=FAST)).run()
    assert out.status == PROTOCOL1_DONE
    # fragments of the same true individual get the same identity
    assert out.identity[0] == out.identity[2] and out.identity[1] == out.identity[3]
    assert out.identity[0] != out.identity[1]


def _blank_second_global():
    frags = [(0, 0, 39), (1, 0, 39), (2, 0, 39), (0, 100, 109), (1, 100, 109), (2, 100, 109)]
    imgs = np.concatenate([signal_images(t, 40, rng=np.random.default_rng(i)) for i, t in enumerate(range(3))]
                          + [np.zeros((30, 4, 4), np.float32)])
    return toy_data(frags, [[0, 1, 2], [3, 4, 5]], 3, distances=[9, 9, 9, 1, 1, 1], images=imgs)


def test_escalation_through_all_protocols():
    d = _blank_second_global()
    out = Cascade(d, CascadeParams(train=FAST)).run()
    assert out.protocols_run == ["protocol1", "protocol2", "protocol3"]
    assert out.coverage == max(out.attempt_coverages)
    assert len(out.attempt_coverages) == 2
    if out.coverage < 0.9:
        assert out.status == DEGRADED and out.warnings
    assert not coexisting_duplicates(out.identity, d.coexist)


def test_pretraining_stops_at_95_percent():
    # cumulative global-image coverage 0.60, 0.85, 0.96, 1.00
    sizes = [(30, 30), (12, 13), (5, 6), (2, 2)]
    frags, globals_, t = [], [], 0
    for a, b in sizes:
        frags += [(0, t, t + a - 1), (1, t, t + b - 1)]
        globals_.append([len(frags) - 2, len(frags) - 1])
        t += 100
    dists = [40, 40, 30, 30, 20, 20, 10, 10]
    d = toy_data(frags, globals_, 2, distances=dists)
    c = Cascade(d, CascadeParams(train=FAST))
    c.pretrain()
    cov = [r["coverage"] for r in c.records if r.get("stage") == "pretraining"]
    np.testing.assert_allclose(cov, [0.60, 0.85, 0.96])


def test_pretrain_keeps_features_between_globals():
    d = three_coexisting()
    c = Cascade(d, CascadeParams(train=FAST))
    m = c.pretrain()
    fresh = ClassifierModel(4, 3, seed=0)
    assert not np.array_equal(m.W1, fresh.W1)


# invariants on a tracked video -------------------------------------------------

def test_cascade_invariants_on_video(small_run):
    out = small_run.outcome
    coexist = small_run.fragments.individual.coexisting()
    acc_ident = np.where(out.accumulated, out.identity, 0)
    assert not coexisting_duplicates(acc_ident, coexist)
    assert 0.0 <= out.coverage <= 1.0
    hist = [r["images_accumulated"] for r in out.log if "images_accumulated" in r and "stage" not in r
            and r.get("protocol") == "protocol2"]
    assert hist == sorted(hist)
    run = out.protocols_run
    assert run == ["protocol1", "protocol2", "protocol3"][:len(run)]
