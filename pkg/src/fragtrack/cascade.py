"""Training / identification protocol cascade.

Identities are 1..n; 0 means "no identity". Classifier class ``c`` stands for
identity ``c + 1``. Fragment ids are individual-fragment ids from
:mod:`fragtrack.blobgraph`, and the images of fragment ``f`` are the rows
``ptr[f]:ptr[f+1]`` of the image stack, in fragment blob order.

Three protocols run in order, each only if the previous one fell short:

1. train on the seed global fragment and check how much of the other global
   fragments the model identifies acceptably;
2. accumulate acceptable global fragments (and later single fragments) into
   the training set, fine-tuning the model at every step;
3. pretrain the feature stage over many global fragments, then redo the
   accumulation with that stage frozen, from up to three seed fragments.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blobgraph import Coexistence, GlobalFragments
from .classifier import (DIVERGED, ClassifierModel, EpochCapWarning, LabeledDataset, TrainConfig,
                         identification_train_config, train)

log = logging.getLogger(__name__)

PROTOCOL1_DONE = "protocol1_done"
PROTOCOL2_DONE = "protocol2_done"
PROTOCOL3_DONE = "protocol3_done"
DEGRADED = "degraded"

NOT_CERTAIN = "not_certain"
NON_CONSISTENT = "non_consistent"
NOT_UNIQUE = "not_unique"


class NoGlobalFragment(RuntimeError):
    pass


class IdentificationDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# per-fragment identification formulas
# ---------------------------------------------------------------------------

def p1_from_frequencies(freq) -> np.ndarray:
    """``2^Λ_i / Σ 2^Λ_j`` evaluated as ``2^(Λ_i - max Λ)`` to stay finite."""
    lam = np.asarray(freq, dtype=np.float64)
    e = np.exp2(lam - lam.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_two(p1) -> tuple:
    """Indices of the first and second maximum (ties resolved by lower index)."""
    order = np.argsort(-np.asarray(p1, dtype=np.float64), kind="stable")
    return int(order[0]), int(order[1])


def certainty(p1, medians) -> float:
    """``(m_a P1_a - m_b P1_b) / (P1_a + P1_b)``; ``a, b`` are the top two of P1."""
    p1 = np.asarray(p1, dtype=np.float64)
    a, b = top_two(p1)
    return float((medians[a] * p1[a] - medians[b] * p1[b]) / (p1[a] + p1[b]))


@dataclass
class IdentityDistribution:
    frequencies: np.ndarray
    p1: np.ndarray
    cert: float
    medians: np.ndarray  # median softmax of the images voting for each class (0 if none)

    @property
    def argmax(self) -> int:
        return top_two(self.p1)[0]


def identity_distribution(probs) -> IdentityDistribution:
    """Frequencies, P1 and certainty from the per-image softmax rows of one fragment."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[1]
    vote = probs.argmax(axis=1)
    freq = np.bincount(vote, minlength=n)
    p1 = p1_from_frequencies(freq)
    a, b = top_two(p1)
    med = np.zeros(n)
    for j in (a, b):
        sel = vote == j
        if sel.any():
            med[j] = float(np.median(probs[sel, j]))
    return IdentityDistribution(freq, p1, certainty(p1, med), med)


# ---------------------------------------------------------------------------
# global fragment ordering
# ---------------------------------------------------------------------------

def global_scores(globals_: GlobalFragments, distances) -> np.ndarray:
    """Minimum distance travelled over the member fragments of each global fragment."""
    distances = np.asarray(distances, dtype=np.float64)
    return distances[globals_.members].min(axis=1)


def sort_globals_by_distance(globals_: GlobalFragments, distances) -> np.ndarray:
    """σ: descending score, ties broken by the earlier core frame."""
    if len(globals_) == 0:
        raise NoGlobalFragment("no global fragment: tracking cannot proceed")
    s = global_scores(globals_, distances)
    return np.lexsort((np.arange(len(s)), globals_.core, -s))


def choose_first_global_fragment(globals_: GlobalFragments, distances) -> int:
    return int(sort_globals_by_distance(globals_, distances)[0])


def assessment_order(globals_: GlobalFragments, seed_index: int) -> np.ndarray:
    """Global fragments other than the seed, nearest core frame first."""
    d = np.abs(globals_.core - globals_.core[seed_index])
    order = np.lexsort((np.arange(len(d)), globals_.core, d))
    return order[order != seed_index]


# ---------------------------------------------------------------------------
# data container
# ---------------------------------------------------------------------------

@dataclass
class IdentificationData:
    """Everything the cascade needs about individual fragments."""

    images: np.ndarray          # (N, s, s) float32, grouped by fragment
    ptr: np.ndarray             # (F+1,)
    start: np.ndarray           # (F,) first frame
    end: np.ndarray             # (F,) last frame
    distances: np.ndarray       # (F,) distance travelled
    globals_: GlobalFragments
    n_identities: int
    coexist: Optional[Coexistence] = None

    def __post_init__(self):
        if self.coexist is None:
            self.coexist = Coexistence.from_intervals(self.start, self.end)
        self.size = np.diff(self.ptr)
        self.in_global = np.zeros(len(self.size), dtype=bool)
        if len(self.globals_):
            self.in_global[np.unique(self.globals_.members)] = True
        self.global_images = int(self.size[self.in_global].sum())

    @property
    def n_fragments(self):
        return len(self.size)

    @property
    def image_side(self):
        return int(self.images.shape[-1])

    def image_rows(self, frags) -> np.ndarray:
        frags = np.asarray(frags, dtype=np.int64)
        if len(frags) == 0:
            return np.zeros(0, dtype=np.int64)
        sizes = self.size[frags]
        starts = np.repeat(self.ptr[frags], sizes)
        offs = np.arange(sizes.sum()) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        return starts + offs


def identify_fragments(model: ClassifierModel, data: IdentificationData, frags) -> dict:
    """``{fragment: IdentityDistribution}`` from the model's per-image softmax."""
    frags = np.asarray(frags, dtype=np.int64)
    out = {}
    if len(frags) == 0:
        return out
    rows = data.image_rows(frags)
    probs = model.predict_proba(data.images[rows])
    bounds = np.concatenate([[0], np.cumsum(data.size[frags])])
    for k, f in enumerate(frags.tolist()):
        out[f] = identity_distribution(probs[bounds[k]:bounds[k + 1]])
    return out


def fragment_softmax(model: ClassifierModel, data: IdentificationData, f: int) -> np.ndarray:
    return model.predict_proba(data.images[data.ptr[f]:data.ptr[f + 1]])


def coexisting_duplicates(identity, coexist: Coexistence) -> list:
    """Pairs of coexisting fragments that share a nonzero identity."""
    identity = np.asarray(identity)
    bad = []
    for f in np.flatnonzero(identity > 0):
        nb = coexist[f]
        nb = nb[nb > f]
        for g in nb[identity[nb] == identity[f]]:
            bad.append((int(f), int(g)))
    return bad


# ---------------------------------------------------------------------------
# assessment of global fragments
# ---------------------------------------------------------------------------

@dataclass
class Assessment:
    acceptable: bool
    reason: Optional[str]
    temporary: dict  # fragment -> identity, for the members that were not yet identified


def assess_global_fragment(members, dists: dict, identity: np.ndarray, data: IdentificationData,
                           certainty_threshold: float = 0.1) -> Assessment:
    """Certain, consistent and unique check of one global fragment.

    ``identity`` holds the identities already known (0 elsewhere); members that
    have one keep it. Others are identified from ``dists`` in order of
    decreasing max P1.
    """
    members = [int(m) for m in members]
    todo = [m for m in members if identity[m] == 0]
    for m in todo:
        if not dists[m].cert >= certainty_threshold:
            return Assessment(False, NOT_CERTAIN, {})
    todo.sort(key=lambda m: (-float(dists[m].p1.max()), m))
    cur = identity.copy()
    temp = {}
    for m in todo:
        d = dists[m]
        iota = d.argmax + 1
        if np.any(cur[data.coexist[m]] == iota) or not float(d.p1.max()) > 1.0 / data.size[m]:
            return Assessment(False, NON_CONSISTENT, {})
        cur[m] = iota
        temp[m] = iota
    ids = cur[members]
    if len(np.unique(ids)) != len(ids):
        return Assessment(False, NOT_UNIQUE, {})
    return Assessment(True, None, temp)


def best_attempt(coverages) -> int:
    """Index of the parachute attempt that accumulated the most; earliest on ties."""
    return max(range(len(coverages)), key=lambda i: (coverages[i], -i))


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------

@dataclass
class CascadeParams:
    certainty_threshold: float = 0.1
    protocol1_success: float = 0.9995
    protocol2_success: float = 0.9
    accumulation_stop: float = 0.9995
    partial_trigger: float = 0.5
    max_images_per_identity: int = 3000
    old_images_per_identity: int = 1800
    pretrain_coverage: float = 0.95
    parachute_attempts: int = 3
    max_accumulation_iterations: int = 1000
    seed: int = 0
    train: TrainConfig = field(default_factory=identification_train_config)


@dataclass
class AccumulationState:
    identity: np.ndarray       # fixed identity per fragment (0 = none)
    accumulated: np.ndarray    # bool
    acc_iteration: np.ndarray  # iteration at which the fragment was accumulated (-1 = never)
    model: ClassifierModel
    seed_global: int
    iteration: int = 0
    partial_enabled: bool = False
    history: list = field(default_factory=list)  # images accumulated after each iteration

    def copy(self) -> "AccumulationState":
        return AccumulationState(self.identity.copy(), self.accumulated.copy(),
                                 self.acc_iteration.copy(), self.model.copy(), self.seed_global,
                                 self.iteration, self.partial_enabled, list(self.history))


@dataclass
class ProtocolOutcome:
    status: str
    model: ClassifierModel
    coverage: float
    identity: np.ndarray
    accumulated: np.ndarray
    first_global: int
    warnings: list = field(default_factory=list)
    attempt_coverages: list = field(default_factory=list)
    log: list = field(default_factory=list)
    protocols_run: list = field(default_factory=list)


class Cascade:
    def __init__(self, data: IdentificationData, params: Optional[CascadeParams] = None,
                 model_factory=None):
        self.data = data
        self.p = params or CascadeParams()
        self.rng = np.random.default_rng(self.p.seed)
        self.sigma = sort_globals_by_distance(data.globals_, data.distances)
        self.model_factory = model_factory or (
            lambda seed: ClassifierModel(data.image_side, data.n_identities, seed=seed))
        self.records = []
        self.warnings = []

    # --- helpers -----------------------------------------------------------
    def _seed(self) -> int:
        return int(self.rng.integers(0, 2**31 - 1))

    def coverage(self, accumulated) -> float:
        if self.data.global_images == 0:
            return 0.0
        return float(self.data.size[accumulated].sum() / self.data.global_images)

    def _log(self, **rec):
        self.records.append(rec)
        log.info("cascade %s", json.dumps(rec, default=float))

    def _train(self, model, frags, labels, freeze=False, cap_old=None):
        """Train on the images of ``frags`` labelled with class ``labels``."""
        d = self.data
        rows = d.image_rows(frags)
        y = np.repeat(np.asarray(labels, dtype=np.int64), d.size[np.asarray(frags, dtype=np.int64)])
        if cap_old is not None:
            keep = self._cap_per_identity(rows, y, cap_old)
            rows, y = rows[keep], y[keep]
        ds = LabeledDataset(d.images[rows], y, d.n_identities)
        cfg = TrainConfig(**{**self.p.train.__dict__, "seed": self._seed()})
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EpochCapWarning)
            res = train(model, ds, cfg, freeze_features=freeze)
        for w in caught:
            self.warnings.append(str(w.message))
        if res.outcome == DIVERGED:
            raise IdentificationDiverged("identification classifier diverged")
        return res

    def _cap_per_identity(self, rows, y, is_old) -> np.ndarray:
        """Per-class cap: up to 1800 old images, the rest new, 3000 in total."""
        cap = self.p.max_images_per_identity
        n_old = self.p.old_images_per_identity
        keep = []
        for c in np.unique(y):
            idx = np.flatnonzero(y == c)
            if len(idx) <= cap:
                keep.append(idx)
                continue
            old = idx[is_old[idx]]
            new = idx[~is_old[idx]]
            take_old = min(len(old), max(n_old, cap - len(new)))
            take_new = min(len(new), cap - take_old)
            keep.append(self.rng.choice(old, take_old, replace=False))
            keep.append(self.rng.choice(new, take_new, replace=False))
        return np.sort(np.concatenate(keep))

    def _seed_labels(self, g) -> tuple:
        members = np.sort(self.data.globals_.members[g])
        perm = self.rng.permutation(self.data.n_identities)[:len(members)]
        return members, perm

    # --- protocol 1 ------------------------------------------------------------
    def _start(self, seed_global: int, model: ClassifierModel, freeze: bool, protocol: str,
               attempt: int = 0) -> AccumulationState:
        d = self.data
        members, labels = self._seed_labels(seed_global)
        res = self._train(model, members, labels, freeze=freeze)
        identity = np.zeros(d.n_fragments, dtype=np.int64)
        identity[members] = labels + 1
        acc = np.zeros(d.n_fragments, dtype=bool)
        acc[members] = True
        it = np.full(d.n_fragments, -1, dtype=np.int64)
        it[members] = 0
        st = AccumulationState(identity, acc, it, model, seed_global)
        st.history.append(int(d.size[acc].sum()))
        self._log(protocol=protocol, attempt=attempt, iteration=0, seed_global=int(seed_global),
                  images_accumulated=int(d.size[acc].sum()), coverage=self.coverage(acc),
                  train_epochs=res.epochs, val_accuracy=res.history.val_accuracy[-1],
                  train_outcome=res.outcome)
        return st

    def assess_all(self, st: AccumulationState, order=None):
        """Assess every not-yet-accumulated global fragment; returns (accepted, temp ids, reasons)."""
        d = self.data
        G = d.globals_
        if order is None:
            order = assessment_order(G, st.seed_global)
        pending = [g for g in order if not st.accumulated[G.members[g]].all()]
        need = np.unique(np.concatenate([G.members[g] for g in pending])) if pending else []
        need = [f for f in np.asarray(need, dtype=np.int64).tolist() if st.identity[f] == 0]
        dists = identify_fragments(st.model, d, need)
        identity = st.identity.copy()
        accepted, reasons = [], {}
        for g in pending:
            a = assess_global_fragment(G.members[g], dists, identity, d, self.p.certainty_threshold)
            if a.acceptable:
                accepted.append(int(g))
                for f, iota in a.temporary.items():
                    identity[f] = iota
            else:
                reasons[int(g)] = a.reason
        return accepted, identity, dists, reasons

    def protocol1(self, seed_global: int, model, freeze=False, protocol="protocol1", attempt=0):
        st = self._start(seed_global, model, freeze, protocol, attempt)
        pending = self.assess_all(st)
        accepted, _, _, reasons = pending
        acc = st.accumulated.copy()
        for g in accepted:
            acc[self.data.globals_.members[g]] = True
        cov = self.coverage(acc)
        self._log(protocol=protocol, attempt=attempt, iteration=0, stage="assessment",
                  acceptable_globals=len(accepted), rejected=len(reasons),
                  images_in_acceptable=int(self.data.size[acc].sum()), coverage=cov)
        return st, pending, cov

    # --- accumulation ----------------------------------------------------------
    def accumulate(self, st: AccumulationState, pending=None, freeze=False, protocol="protocol2",
                   attempt=0) -> AccumulationState:
        """Iterate global / partial accumulation until nothing is added or coverage suffices."""
        d = self.data
        G = d.globals_
        while st.iteration < self.p.max_accumulation_iterations:
            if self.coverage(st.accumulated) >= self.p.accumulation_stop:
                break
            if pending is None:
                pending = self.assess_all(st)
            accepted, identity, dists, _ = pending
            pending = None
            before = st.accumulated.copy()
            new_global = set()
            for g in accepted:
                for f in G.members[g]:
                    if not st.accumulated[f]:
                        new_global.add(int(f))
            for f in new_global:
                st.identity[f] = identity[f]
                st.accumulated[f] = True
            n_partial = 0
            if self.coverage(st.accumulated) > self.p.partial_trigger:
                st.partial_enabled = True
            if st.partial_enabled:
                n_partial = self._partial(st, dists)
            added = st.accumulated & ~before
            if not added.any():
                break
            st.iteration += 1
            st.acc_iteration[added] = st.iteration
            self._check_no_duplicates(st)
            frags = np.flatnonzero(st.accumulated)
            is_old = np.repeat(st.acc_iteration[frags] < st.iteration, d.size[frags])
            res = self._train(st.model, frags, st.identity[frags] - 1, freeze=freeze, cap_old=is_old)
            st.history.append(int(d.size[st.accumulated].sum()))
            self._log(protocol=protocol, attempt=attempt, iteration=st.iteration,
                      new_globals=len(accepted), new_fragments=int(added.sum()), partial=n_partial,
                      images_accumulated=int(d.size[st.accumulated].sum()),
                      coverage=self.coverage(st.accumulated), train_epochs=res.epochs,
                      val_accuracy=res.history.val_accuracy[-1], train_outcome=res.outcome)
        return st

    def _partial(self, st: AccumulationState, dists: dict) -> int:
        """Accumulate single fragments that are certain, well surrounded and duplicate-free."""
        d = self.data
        cand = [f for f, dist in dists.items()
                if not st.accumulated[f] and d.in_global[f] and dist.cert > self.p.certainty_threshold]
        cand.sort(key=lambda f: (-dists[f].cert, f))
        n = 0
        for f in cand:
            nb = d.coexist[f]
            if len(nb) and st.accumulated[nb].sum() * 2 < len(nb):
                continue
            iota = dists[f].argmax + 1
            if np.any(st.identity[nb[st.accumulated[nb]]] == iota):
                continue
            st.identity[f] = iota
            st.accumulated[f] = True
            n += 1
        return n

    def _check_no_duplicates(self, st: AccumulationState):
        ident = np.where(st.accumulated, st.identity, 0)
        dup = coexisting_duplicates(ident, self.data.coexist)
        if dup:
            raise AssertionError(f"coexisting accumulated fragments share identities: {dup[:5]}")

    # --- protocol 3 ------------------------------------------------------------
    def pretrain(self) -> ClassifierModel:
        d = self.data
        model = self.model_factory(self._seed())
        used = np.zeros(d.n_fragments, dtype=bool)
        for k, g in enumerate(self.sigma):
            members, labels = self._seed_labels(g)
            model.reinit_classifier(np.random.default_rng(self._seed()))
            res = self._train(model, members, labels)
            used[members] = True
            cov = self.coverage(used)
            self._log(protocol="protocol3", stage="pretraining", iteration=k, global_fragment=int(g),
                      images_used=int(d.size[used].sum()), coverage=cov, train_epochs=res.epochs,
                      val_accuracy=res.history.val_accuracy[-1])
            if cov >= self.p.pretrain_coverage:
                break
        return model

    def protocol3(self):
        pre = self.pretrain()
        attempts = []
        for k in range(min(self.p.parachute_attempts, len(self.sigma))):
            model = pre.copy()
            model.reinit_classifier(np.random.default_rng(self._seed()))
            st, pending, _ = self.protocol1(int(self.sigma[k]), model, freeze=True,
                                            protocol="protocol3", attempt=k)
            st = self.accumulate(st, pending, freeze=True, protocol="protocol3", attempt=k)
            cov = self.coverage(st.accumulated)
            attempts.append((cov, st))
            if cov >= self.p.protocol2_success:
                break
        return attempts, best_attempt([c for c, _ in attempts])

    # --- driver ----------------------------------------------------------------
    def run(self) -> ProtocolOutcome:
        d = self.data
        seed_g = int(self.sigma[0])
        st, pending, cov1 = self.protocol1(seed_g, self.model_factory(self._seed()))
        run = ["protocol1"]
        if cov1 >= self.p.protocol1_success:
            accepted, identity, _, _ = pending
            for g in accepted:
                for f in d.globals_.members[g]:
                    if not st.accumulated[f]:
                        st.identity[f] = identity[f]
                        st.accumulated[f] = True
            self._check_no_duplicates(st)
            return self._outcome(PROTOCOL1_DONE, st, run)
        run.append("protocol2")
        st = self.accumulate(st, pending)
        cov2 = self.coverage(st.accumulated)
        if cov2 >= self.p.protocol2_success:
            return self._outcome(PROTOCOL2_DONE, st, run)
        run.append("protocol3")
        # identities from the first two protocols are discarded
        attempts, best = self.protocol3()
        cov, st = attempts[best]
        status = PROTOCOL3_DONE if cov >= self.p.protocol2_success else DEGRADED
        if status == DEGRADED:
            msg = "all accumulation attempts below {:.0%} coverage: {}".format(
                self.p.protocol2_success, ", ".join(f"{c:.4f}" for c, _ in attempts))
            warnings.warn(msg)
            self.warnings.append(msg)
        out = self._outcome(status, st, run)
        out.attempt_coverages = [c for c, _ in attempts]
        return out

    def _outcome(self, status, st: AccumulationState, run) -> ProtocolOutcome:
        identity = np.where(st.accumulated, st.identity, 0)
        return ProtocolOutcome(status, st.model, self.coverage(st.accumulated), identity,
                               st.accumulated.copy(), st.seed_global, list(self.warnings),
                               log=self.records, protocols_run=run)


def run_cascade(data: IdentificationData, params: Optional[CascadeParams] = None) -> ProtocolOutcome:
    return Cascade(data, params).run()
