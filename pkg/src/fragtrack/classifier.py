"""Softmax classifier trained from scratch.

The model is split into a feature stage (one fully connected ReLU layer, the
parameters ``W1, b1``) and a classification stage (``W2, b2`` followed by a
softmax). Either stage can be frozen or re-initialised independently, which
is what the pretraining protocol needs.
"""
from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

HIDDEN_UNITS = 100
CHECKPOINT_MAGIC = b"FTCM"
CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-12

# stopping_check outcomes
CONTINUE = "continue"
OVERFIT = "overfit"
PLATEAU = "plateau"
PERFECT = "perfect"
ZERO_LOSS = "zero_loss"
# extra train() outcomes
EPOCH_CAP = "epoch_cap"
DIVERGED = "diverged"


class TrainingDiverged(RuntimeError):
    pass


class EpochCapWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# formulas
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def class_weights(counts) -> np.ndarray:
    """``w_i = 1 - |L_i| / sum_j |L_j|``."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty dataset")
    return 1.0 - counts / total


def weighted_cross_entropy(probabilities, label, weight) -> float:
    """``-w * log(max(s_label, 1e-12))``; ``label`` is an index or a one-hot vector."""
    p = np.asarray(probabilities, dtype=np.float64)
    lab = np.asarray(label)
    if lab.ndim:
        lab = int(np.argmax(lab))
    return float(-weight * math.log(max(float(p[int(lab)]), LOG_FLOOR)))


def plateau_threshold(val_loss: float) -> float:
    """``0.05 * 10 ** (log10(L) - 1)``, i.e. half a percent of the loss."""
    if val_loss <= 0:
        return 0.0
    return 0.05 * 10.0 ** (math.log10(val_loss) - 1.0)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    images: np.ndarray  # (k, side, side) or (k, d)
    labels: np.ndarray  # (k,) int
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.n_classes)


def split_train_val(dataset: LabeledDataset, seed=0, fraction: float = 0.9):
    """Seeded shuffle then a 90/10 split (``floor(9k/10)`` training items)."""
    k = len(dataset)
    if k < 2:
        raise ValueError(f"dataset of {k} items cannot leave a non-empty validation set")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(k)
    n_train = int(math.floor(fraction * k + 1e-9))
    n_train = min(max(n_train, 1), k - 1)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class ClassifierModel:
    def __init__(self, input_side: int, n_classes: int, seed=0, hidden: int = HIDDEN_UNITS,
                 dtype=np.float32, input_dim: Optional[int] = None):
        self.input_side = int(input_side)
        self.input_dim = int(input_dim if input_dim is not None else input_side * input_side)
        self.n_classes = int(n_classes)
        self.hidden = int(hidden)
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.W1 = self.b1 = self.W2 = self.b2 = None
        self.reinit_features(rng)
        self.reinit_classifier(rng)

    # --- parameter groups -------------------------------------------------
    def reinit_features(self, rng):
        self.W1 = _xavier(rng, self.input_dim, self.hidden, self.dtype)
        self.b1 = np.zeros(self.hidden, dtype=self.dtype)

    def reinit_classifier(self, rng, n_classes: Optional[int] = None):
        if n_classes is not None:
            self.n_classes = int(n_classes)
        self.W2 = _xavier(rng, self.hidden, self.n_classes, self.dtype)
        self.b2 = np.zeros(self.n_classes, dtype=self.dtype)

    @property
    def feature_params(self):
        return [self.W1, self.b1]

    @property
    def classifier_params(self):
        return [self.W2, self.b2]

    def copy(self) -> "ClassifierModel":
        m = object.__new__(ClassifierModel)
        m.__dict__.update(self.__dict__)
        m.W1, m.b1, m.W2, m.b2 = (p.copy() for p in (self.W1, self.b1, self.W2, self.b2))
        return m

    # --- forward / backward ----------------------------------------------
    def _flat(self, X):
        X = np.asarray(X)
        return X.reshape(len(X), -1).astype(self.dtype, copy=False)

    def logits(self, X) -> np.ndarray:
        h = np.maximum(self._flat(X) @ self.W1 + self.b1, 0)
        return h @ self.W2 + self.b2

    def predict_proba(self, X, batch: int = 8192) -> np.ndarray:
        X = np.asarray(X)
        out = np.empty((len(X), self.n_classes))
        for s in range(0, len(X), batch):
            out[s:s + batch] = softmax(self.logits(X[s:s + batch]))
        return out

    def loss_and_grads(self, X, y, sample_weight, need_features: bool = True):
        """Mean weighted cross-entropy over the batch and its gradients."""
        X = self._flat(X)
        y = np.asarray(y, dtype=np.int64)
        w = np.asarray(sample_weight, dtype=self.dtype)
        k = len(y)
        pre = X @ self.W1 + self.b1
        h = np.maximum(pre, 0)
        a = h @ self.W2 + self.b2
        z = a - a.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        rows = np.arange(k)
        loss = float(-(w * np.log(np.maximum(p[rows, y], LOG_FLOOR))).mean())
        g = p.copy()
        g[rows, y] -= 1
        g *= (w / k)[:, None]
        gW2 = h.T @ g
        gb2 = g.sum(axis=0)
        grads = {"W2": gW2, "b2": gb2}
        if need_features:
            gh = (g @ self.W2.T) * (pre > 0)
            grads["W1"] = X.T @ gh
            grads["b1"] = gh.sum(axis=0)
        return loss, grads

    # --- checkpoint ------------------------------------------------------
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<5I", CHECKPOINT_VERSION, self.input_side, self.input_dim,
                                 self.hidden, self.n_classes))
            for p in (self.W1, self.b1, self.W2, self.b2):
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ClassifierModel":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a classifier checkpoint")
        version, side, dim, hidden, nc = struct.unpack_from("<5I", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        vals = np.frombuffer(data, dtype="<f8", offset=24)
        sizes = [dim * hidden, hidden, hidden * nc, nc]
        if len(vals) != sum(sizes):
            raise ValueError(f"{path}: truncated checkpoint")
        m = object.__new__(cls)
        m.input_side, m.input_dim, m.hidden, m.n_classes = side, dim, hidden, nc
        m.dtype = np.dtype(dtype)
        parts = np.split(vals, np.cumsum(sizes)[:-1])
        m.W1 = parts[0].reshape(dim, hidden).astype(dtype)
        m.b1 = parts[1].astype(dtype)
        m.W2 = parts[2].reshape(hidden, nc).astype(dtype)
        m.b2 = parts[3].astype(dtype)
        return m


# ---------------------------------------------------------------------------
# evaluation and stopping
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    loss: float
    accuracy: float
    class_accuracy: np.ndarray
    absent_classes: np.ndarray  # class accuracy reported as 1.0 for these


def evaluate(model: ClassifierModel, dataset: LabeledDataset, weights=None) -> Evaluation:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty set")
    p = model.predict_proba(dataset.images)
    y = dataset.labels
    if weights is None:
        weights = np.ones(dataset.n_classes)
    w = np.asarray(weights, dtype=np.float64)[y]
    loss = float(-(w * np.log(np.maximum(p[np.arange(len(y)), y], LOG_FLOOR))).mean())
    pred = p.argmax(axis=1)
    correct = pred == y
    n = dataset.n_classes
    totals = np.bincount(y, minlength=n)
    hits = np.bincount(y[correct], minlength=n)
    absent = totals == 0
    cls_acc = np.where(absent, 1.0, hits / np.maximum(totals, 1))
    return Evaluation(loss, float(correct.mean()), cls_acc, np.flatnonzero(absent))


@dataclass
class TrainHistory:
    val_loss: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    class_accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.val_loss)


def _d(losses, i):
    """Loss difference at 1-based epoch ``i`` against the mean of the 10 epochs before it."""
    return losses[i - 1] - float(np.mean(losses[i - 11:i - 1]))


def stopping_check(history: TrainHistory) -> str:
    """Stopping rule evaluated after the latest epoch ``i* = len(history)``."""
    losses = list(history.val_loss)
    i = len(losses)
    if i <= 10:
        return CONTINUE
    L = losses[-1]
    if L == 0:
        return ZERO_LOSS
    if history.class_accuracy and np.all(np.asarray(history.class_accuracy[-1]) == 1.0):
        return PERFECT
    if i >= 15 and all(_d(losses, j) > 0 for j in range(i - 4, i + 1)):
        return OVERFIT
    if abs(_d(losses, i)) < plateau_threshold(L):
        return PLATEAU
    return CONTINUE


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 500
    max_epochs: int = 10000
    optimizer: str = "sgd"  # or "adam"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment_rotation: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def dcd_train_config(**kw) -> TrainConfig:
    kw.setdefault("batch_size", 100)
    kw.setdefault("max_epochs", 100)
    kw.setdefault("optimizer", "adam")
    return TrainConfig(**kw)


def identification_train_config(**kw) -> TrainConfig:
    kw.setdefault("batch_size", 500)
    kw.setdefault("max_epochs", 10000)
    kw.setdefault("optimizer", "sgd")
    return TrainConfig(**kw)


@dataclass
class TrainResult:
    model: ClassifierModel
    history: TrainHistory
    outcome: str
    weights: np.ndarray
    final: Optional[Evaluation] = None

    @property
    def epochs(self):
        return len(self.history)


def _augment(images: np.ndarray) -> np.ndarray:
    if images.ndim != 3:
        return images
    return np.concatenate([images, images[:, ::-1, ::-1]])


def train(model: ClassifierModel, dataset: LabeledDataset, config: TrainConfig,
          freeze_features: bool = False, split=None) -> TrainResult:
    """Mini-batch training with class-weighted cross-entropy and early stopping.

    The model is updated in place and also returned. ``split`` may supply a
    ready ``(T, V)`` pair; otherwise a seeded 90/10 split is drawn.
    """
    if dataset.n_classes > model.n_classes:
        raise ValueError("dataset has more classes than the model outputs")
    rng = np.random.default_rng(config.seed)
    T, V = split if split is not None else split_train_val(dataset, rng)
    weights = class_weights(np.bincount(T.labels, minlength=model.n_classes))
    X = _augment(T.images) if config.augment_rotation else T.images
    X = X.reshape(len(X), -1).astype(model.dtype, copy=False)
    y = np.concatenate([T.labels, T.labels]) if (config.augment_rotation and T.images.ndim == 3) else T.labels
    sw = weights[y].astype(model.dtype)
    Vds = LabeledDataset(V.images, V.labels, model.n_classes)
    names = ["W2", "b2"] if freeze_features else ["W1", "b1", "W2", "b2"]
    m_state = {k: np.zeros_like(getattr(model, k)) for k in names}
    v_state = {k: np.zeros_like(getattr(model, k)) for k in names}
    lr = config.learning_rate
    step = 0
    hist = TrainHistory()
    outcome = EPOCH_CAP
    ev = None
    for epoch in range(config.max_epochs):
        perm = rng.permutation(len(y))
        tot = 0.0
        for s in range(0, len(y), config.batch_size):
            bi = perm[s:s + config.batch_size]
            loss, grads = model.loss_and_grads(X[bi], y[bi], sw[bi], need_features=not freeze_features)
            tot += loss * len(bi)
            if not np.isfinite(loss):
                break
            step += 1
            for k in names:
                p = getattr(model, k)
                g = grads[k]
                if config.optimizer == "sgd":
                    p -= (lr * g).astype(p.dtype)
                else:
                    m_state[k] = config.beta1 * m_state[k] + (1 - config.beta1) * g
                    v_state[k] = config.beta2 * v_state[k] + (1 - config.beta2) * g * g
                    mh = m_state[k] / (1 - config.beta1 ** step)
                    vh = v_state[k] / (1 - config.beta2 ** step)
                    p -= (lr * mh / (np.sqrt(vh) + config.eps)).astype(p.dtype)
        train_loss = tot / max(len(y), 1)
        ev = evaluate(model, Vds, weights)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(ev.loss)
        hist.val_accuracy.append(ev.accuracy)
        hist.class_accuracy.append(ev.class_accuracy)
        if not (np.isfinite(train_loss) and np.isfinite(ev.loss)) or not all(
                np.all(np.isfinite(p)) for p in (model.W1, model.W2)):
            outcome = DIVERGED
            break
        verdict = stopping_check(hist)
        if verdict != CONTINUE:
            outcome = verdict
            break
    if outcome == EPOCH_CAP:
        warnings.warn(f"training stopped at the {config.max_epochs}-epoch cap", EpochCapWarning)
    log.debug("trained %d epochs -> %s (val acc %.4f)", len(hist), outcome,
              hist.val_accuracy[-1] if hist.val_accuracy else float("nan"))
    return TrainResult(model, hist, outcome, weights, ev)
