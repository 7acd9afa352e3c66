import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fragtrack.classifier import (DIVERGED, EPOCH_CAP, OVERFIT, PERFECT, PLATEAU, ZERO_LOSS, CONTINUE,
                                  ClassifierModel, EpochCapWarning, LabeledDataset, TrainConfig, TrainHistory,
                                  class_weights, evaluate, plateau_threshold, softmax, split_train_val,
                                  stopping_check, train, weighted_cross_entropy)
from oracles import class_weights_direct, plateau_direct, wce_direct


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-12)
    p = softmax([1000.0, 0.0])
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_distribution(a):
    p = softmax(a)
    assert (p > 0).all() and abs(p.sum() - 1) < 1e-9


def test_class_weight_examples():
    np.testing.assert_allclose(class_weights([900, 100]), [0.1, 0.9])
    np.testing.assert_allclose(class_weights([50, 50]), [0.5, 0.5])
    assert class_weights([5, 0, 5])[1] == 1.0
    with pytest.raises(ValueError):
        class_weights([0, 0])


@given(st.lists(st.integers(0, 1000), min_size=2, max_size=6).filter(lambda c: sum(c) > 0))
def test_class_weights_match_oracle(counts):
    np.testing.assert_allclose(class_weights(counts), [float(x) for x in class_weights_direct(counts)], rtol=1e-12)


def test_wce_examples():
    assert weighted_cross_entropy([0.5, 0.5], 0, 1.0) == pytest.approx(0.6931, abs=1e-4)
    assert weighted_cross_entropy([1.0, 0.0], [1, 0], 0.3) == 0.0
    assert weighted_cross_entropy([0.25, 0.75], 0, 0.5) == pytest.approx(0.6931, abs=1e-4)
    assert math.isfinite(weighted_cross_entropy([0.0, 1.0], 0, 1.0))


@given(st.floats(1e-15, 1.0), st.floats(0, 1))
def test_wce_matches_oracle(p, w):
    assert weighted_cross_entropy([p, 1 - p], 0, w) == pytest.approx(wce_direct(p, w), rel=1e-12, abs=1e-300)


def test_plateau_threshold():
    assert plateau_threshold(0.1) == pytest.approx(5e-4)
    for L in (3.7, 0.02, 1e-5):
        assert plateau_threshold(L) == pytest.approx(plateau_direct(L), rel=1e-12)


def _ds(k, n_classes=2, side=3, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.normal(size=(k, side, side)), rng.integers(0, n_classes, k), n_classes)


def test_split_sizes_and_determinism():
    T, V = split_train_val(_ds(100), seed=4)
    assert (len(T), len(V)) == (90, 10)
    T, V = split_train_val(_ds(10), seed=4)
    assert (len(T), len(V)) == (9, 1)
    a = split_train_val(_ds(50), seed=7)
    b = split_train_val(_ds(50), seed=7)
    assert np.array_equal(a[0].images, b[0].images)
    with pytest.raises(ValueError):
        split_train_val(_ds(1))


def test_split_disjoint_exhaustive():
    ds = _ds(37)
    ds.images[:, 0, 0] = np.arange(37)
    T, V = split_train_val(ds, seed=1)
    ids = sorted(T.images[:, 0, 0].tolist() + V.images[:, 0, 0].tolist())
    assert ids == list(range(37))


class Fixed(ClassifierModel):
    """Model whose predictions are given directly by the input row."""

    def predict_proba(self, X, batch=0):
        return np.asarray(X, dtype=np.float64).reshape(len(X), -1)


def test_evaluate_class_accuracy():
    m = Fixed(1, 2, input_dim=2)
    X = np.array([[0.9, 0.1]] * 3 + [[0.2, 0.8]] + [[0.1, 0.9]] * 2)
    y = np.array([0, 0, 0, 0, 1, 1])
    ev = evaluate(m, LabeledDataset(X, y, 3))
    assert ev.class_accuracy[0] == 0.75
    assert ev.class_accuracy[1] == 1.0
    assert ev.accuracy == pytest.approx(5 / 6)
    assert list(ev.absent_classes) == [2] and ev.class_accuracy[2] == 1.0


def _hist(losses, acc=0.5):
    h = TrainHistory()
    h.val_loss = list(losses)
    h.class_accuracy = [np.array([acc, 1.0])] * len(losses)
    return h


def test_stopping_rules():
    assert stopping_check(_hist([1.0] * 10)) == CONTINUE
    # plateau: L(V) = 0.1 and |d| = 1e-4
    assert stopping_check(_hist([0.1] * 10 + [0.1 + 1e-4])) == PLATEAU
    assert stopping_check(_hist([0.1] * 10 + [0.1 + 1e-3])) == CONTINUE
    assert stopping_check(_hist([1.0] * 10 + [0.0])) == ZERO_LOSS
    assert stopping_check(_hist([1.0] * 10 + [0.5], acc=1.0)) == PERFECT
    rising = [1.0] * 10 + [1.1, 1.2, 1.3, 1.4, 1.5]
    assert stopping_check(_hist(rising)) == OVERFIT
    assert stopping_check(_hist(rising[:-1])) == CONTINUE


def _relerr(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    d, n, k = 6, 3, 5
    m = ClassifierModel(1, n, seed=seed, hidden=4, dtype=np.float64, input_dim=d)
    X = rng.normal(size=(k, d))
    y = rng.integers(0, n, k)
    w = rng.uniform(0.1, 1, k)
    _, g = m.loss_and_grads(X, y, w)
    h = 1e-6
    for name in ("W2", "b2", "W1", "b1"):
        p = getattr(m, name)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = m.loss_and_grads(X, y, w)
            p[idx] = old - h
            lm, _ = m.loss_and_grads(X, y, w)
            p[idx] = old
            num = (lp - lm) / (2 * h)
            assert abs(num - g[name][idx]) <= 1e-4 * max(abs(num), abs(g[name][idx])) or \
                abs(num - g[name][idx]) < 1e-9, (name, idx)


def _separable(k=200, side=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(k) % 2
    X = rng.normal(0, 0.3, size=(k, side, side))
    # class signal survives the 180-degree augmentation
    X[y == 1] += 2.0
    return LabeledDataset(X, y, 2)


def test_separable_data_trains_to_perfect():
    m = ClassifierModel(4, 2, seed=0)
    res = train(m, _separable(), TrainConfig(learning_rate=0.01, batch_size=20, max_epochs=200, optimizer="adam"))
    assert res.outcome == PERFECT
    assert res.history.val_accuracy[-1] == 1.0


def test_zero_learning_rate_leaves_params():
    m = ClassifierModel(4, 2, seed=0)
    before = [p.copy() for p in (m.W1, m.b1, m.W2, m.b2)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EpochCapWarning)
        res = train(m, _separable(), TrainConfig(learning_rate=0.0, max_epochs=1))
    assert res.outcome == EPOCH_CAP
    for a, b in zip(before, (m.W1, m.b1, m.W2, m.b2)):
        assert np.array_equal(a, b)


def test_epoch_cap_warns():
    m = ClassifierModel(4, 2, seed=0)
    with pytest.warns(EpochCapWarning):
        train(m, _separable(), TrainConfig(learning_rate=1e-6, max_epochs=3))


def test_nan_input_diverges():
    ds = _separable()
    ds.images[5, 0, 0] = np.nan
    res = train(ClassifierModel(4, 2, seed=0), ds, TrainConfig(max_epochs=5, batch_size=500))
    assert res.outcome == DIVERGED


def test_freeze_and_reinit_contracts():
    m = ClassifierModel(4, 2, seed=0)
    W1, b1 = m.W1.copy(), m.b1.copy()
    W2 = m.W2.copy()
    train(m, _separable(), TrainConfig(learning_rate=0.01, max_epochs=20, optimizer="adam"), freeze_features=True)
    assert np.array_equal(m.W1, W1) and np.array_equal(m.b1, b1)
    assert not np.array_equal(m.W2, W2)
    W1, W2 = m.W1.copy(), m.W2.copy()
    m.reinit_classifier(np.random.default_rng(9))
    assert np.array_equal(m.W1, W1) and not np.array_equal(m.W2, W2)
    assert (m.b2 == 0).all()


def test_training_is_deterministic():
    cfg = TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=12, optimizer="adam", seed=3)
    a = ClassifierModel(4, 2, seed=1)
    b = ClassifierModel(4, 2, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EpochCapWarning)
        train(a, _separable(), cfg)
        train(b, _separable(), cfg)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)


def test_predictions_sum_to_one():
    m = ClassifierModel(4, 5, seed=0)
    p = m.predict_proba(np.random.default_rng(0).normal(size=(7, 4, 4)))
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-9)


def test_xavier_bounds():
    m = ClassifierModel(10, 3, seed=0)
    assert np.abs(m.W1).max() <= math.sqrt(6 / (100 + 100))
    assert (m.b1 == 0).all()


def test_checkpoint_roundtrip(tmp_path):
    m = ClassifierModel(4, 3, seed=2)
    m.save(tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"FTCM"
    m2 = ClassifierModel.load(tmp_path / "m.bin")
    for a, b in ((m.W1, m2.W1), (m.W2, m2.W2), (m.b2, m2.b2)):
        assert np.array_equal(a, b)
    (tmp_path / "bad.bin").write_bytes(raw[:40])
    with pytest.raises(ValueError):
        ClassifierModel.load(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        ClassifierModel.load(tmp_path / "junk.bin")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
