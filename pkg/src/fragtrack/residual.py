"""Identification of the fragments the cascade left without identity."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .blobgraph import Coexistence
from .cascade import top_two


def _log_exclusion(p1_coexisting, n) -> np.ndarray:
    q = np.asarray(p1_coexisting, dtype=np.float64).reshape(-1, n)
    with np.errstate(divide="ignore"):
        return np.log1p(-np.minimum(q, 1.0)).sum(axis=0)


def compute_p2(p1, p1_coexisting) -> np.ndarray:
    """``P1(F,i) * prod_G (1 - P1(G,i))``, normalised over ``i``.

    Evaluated in log space so that long coexistence lists do not underflow.
    An all-zero numerator gives the all-zero vector (unidentifiable).
    """
    p1 = np.asarray(p1, dtype=np.float64)
    return _normalise_log(p1, _log_exclusion(p1_coexisting, len(p1)))


def _normalise_log(p1, log_excl) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lg = np.log(p1) + log_excl
    top = lg.max()
    if not np.isfinite(top):
        return np.zeros_like(p1)
    e = np.exp(lg - top)
    return e / e.sum()


def p2_certainty(p2, p1=None) -> float:
    """``P2(a) / P2(b)`` with ``a, b`` the first and second maximum of P1.

    ``p1`` defaults to ``p2``. A zero denominator gives ``inf`` (0 if the
    numerator is also 0, so that such fragments sort last).
    """
    p2 = np.asarray(p2, dtype=np.float64)
    a, b = top_two(p2 if p1 is None else p1)
    if p2[b] == 0:
        return float("inf") if p2[a] > 0 else 0.0
    return float(p2[a] / p2[b])


def assign_from_p2(p2) -> int:
    """Identity (1-based) of the unique maximum of P2; 0 on an exact tie or an empty vector."""
    p2 = np.asarray(p2, dtype=np.float64)
    top = p2.max()
    if top <= 0 or np.count_nonzero(p2 == top) > 1:
        return 0
    return int(np.argmax(p2)) + 1


@dataclass
class ResidualResult:
    identity: np.ndarray   # (F,) final identities, 0 = unidentified
    p1: np.ndarray         # (F, n) with assigned fragments one-hot
    p2: np.ndarray         # (F, n) P2 at the moment of assignment (one-hot for fixed fragments)
    assigned: np.ndarray   # (F,) bool, identified here
    order: list            # fragments in assignment order


def one_hot(identity, n) -> np.ndarray:
    v = np.zeros(n)
    v[identity - 1] = 1.0
    return v


def residual_identify(p1, identity, coexist: Coexistence) -> ResidualResult:
    """Assign identities to every fragment with ``identity == 0``, most certain first.

    ``p1`` holds the P1 vector of every fragment; rows of fragments that already
    have an identity are replaced by one-hot vectors. After each assignment the
    coexisting fragments are re-scored. A fragment whose P2 has a tied or empty
    maximum stays unidentified unless a later assignment changes its P2.
    """
    p1 = np.array(p1, dtype=np.float64)
    identity = np.array(identity, dtype=np.int64)
    F, n = p1.shape
    fixed = identity > 0
    for f in np.flatnonzero(fixed):
        p1[f] = one_hot(identity[f], n)
    p2 = np.zeros_like(p1)
    p2[fixed] = p1[fixed]
    version = np.zeros(F, dtype=np.int64)
    heap = []

    def score(f):
        p2[f] = compute_p2(p1[f], p1[coexist[f]])
        return p2_certainty(p2[f], p1[f])

    for f in np.flatnonzero(~fixed).tolist():
        heap.append((-score(f), f, 0))
    heapq.heapify(heap)
    assigned = np.zeros(F, dtype=bool)
    order = []
    while heap:
        neg, f, ver = heapq.heappop(heap)
        if ver != version[f] or identity[f] > 0:
            continue
        iota = assign_from_p2(p2[f])
        if iota == 0:
            continue
        identity[f] = iota
        assigned[f] = True
        order.append(f)
        p1[f] = one_hot(iota, n)
        for g in coexist[f].tolist():
            if identity[g] == 0:
                version[g] += 1
                heapq.heappush(heap, (-score(g), g, int(version[g])))
    return ResidualResult(identity, p1, p2, assigned, order)
