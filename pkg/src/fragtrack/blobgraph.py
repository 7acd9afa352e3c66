"""Overlap graph, area model, sure-image heuristics and fragmentation.

Blob ids are row indices of a :class:`~fragtrack.ingest.BlobTable`, so blob
order is frame-major and, inside a frame, segmentation order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ingest import Blob, BlobTable
from .kernels import overlap_edges

log = logging.getLogger(__name__)

AMBIGUOUS = 0
SURE_INDIVIDUAL = 1
SURE_CROSSING = 2

MIN_GLOBAL_FRAGMENT_IMAGES = 3


class NoCompleteFrame(Exception):
    """No frame has as many blobs as declared animals."""

    def __init__(self, n_animals, histogram):
        self.n_animals = n_animals
        self.histogram = histogram
        hist = ", ".join(f"{k} blobs: {v} frames" for k, v in sorted(histogram.items()))
        super().__init__(f"no frame contains exactly {n_animals} blobs ({hist or 'no frames'})")


# ---------------------------------------------------------------------------
# area model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AreaModel:
    m_A: float
    s_A: float

    def is_individual(self, area):
        """Vectorised area test; strict inequality."""
        return np.abs(np.asarray(area, dtype=np.float64) - self.m_A) < 4.0 * self.s_A


def fit_area_model(table: BlobTable, n_animals: int) -> AreaModel:
    counts = table.counts_per_frame()
    complete = np.flatnonzero(counts == n_animals)
    if len(complete) == 0:
        values, freq = np.unique(counts, return_counts=True)
        raise NoCompleteFrame(n_animals, {int(v): int(c) for v, c in zip(values, freq)})
    fp = table.frame_ptr
    idx = np.concatenate([np.arange(fp[f], fp[f + 1]) for f in complete])
    areas = table.area[idx].astype(np.float64)
    # population standard deviation
    return AreaModel(float(np.median(areas)), float(np.std(areas)))


def classify_blob(model: AreaModel, blob) -> str:
    area = blob.area if isinstance(blob, Blob) else int(blob)
    return "individual" if model.is_individual(area) else "crossing"


# ---------------------------------------------------------------------------
# overlap graph
# ---------------------------------------------------------------------------

def overlap(a: Blob, b: Blob) -> bool:
    """True iff the two pixel sets intersect."""
    if len(a.pixels) == 0 or len(b.pixels) == 0:
        return False
    w = int(max(a.pixels[:, 0].max(), b.pixels[:, 0].max())) + 1
    ka = a.pixels[:, 1].astype(np.int64) * w + a.pixels[:, 0]
    kb = b.pixels[:, 1].astype(np.int64) * w + b.pixels[:, 0]
    return bool(np.intersect1d(ka, kb, assume_unique=False).size)


@dataclass
class OverlapGraph:
    """Edges between overlapping blobs of consecutive frames, CSR both ways."""

    n_blobs: int
    src: np.ndarray
    dst: np.ndarray
    next_ptr: np.ndarray
    next_idx: np.ndarray
    prev_ptr: np.ndarray
    prev_idx: np.ndarray

    @classmethod
    def from_edges(cls, n_blobs, src, dst):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        o = np.lexsort((dst, src))
        src, dst = src[o], dst[o]
        next_ptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n_blobs))])
        r = np.lexsort((src, dst))
        prev_ptr = np.concatenate([[0], np.cumsum(np.bincount(dst, minlength=n_blobs))])
        return cls(int(n_blobs), src, dst, next_ptr.astype(np.int64), dst.copy(),
                   prev_ptr.astype(np.int64), src[r].copy())

    @property
    def n_next(self) -> np.ndarray:
        return np.diff(self.next_ptr)

    @property
    def n_prev(self) -> np.ndarray:
        return np.diff(self.prev_ptr)

    def next(self, b: int) -> np.ndarray:
        return self.next_idx[self.next_ptr[b]:self.next_ptr[b + 1]]

    def prev(self, b: int) -> np.ndarray:
        return self.prev_idx[self.prev_ptr[b]:self.prev_ptr[b + 1]]


def build_overlap_graph(table: BlobTable, backend=None) -> OverlapGraph:
    src, dst = overlap_edges(table.frame_ptr, table.pix_ptr, table.flat_pixels,
                             table.width * table.height, backend=backend)
    return OverlapGraph.from_edges(len(table), src, dst)


def unique_links(graph: OverlapGraph, same_kind: Optional[np.ndarray] = None) -> np.ndarray:
    """``link[b]`` = the single successor of ``b`` when the step is one-to-one, else -1.

    One-to-one means ``|N_b| = 1`` and ``|P_{n_b}| = 1``; with ``same_kind`` (a
    per-blob label array) the two blobs must also carry the same label.
    """
    n = graph.n_blobs
    link = np.full(n, -1, dtype=np.int64)
    single = np.flatnonzero(graph.n_next == 1)
    succ = graph.next_idx[graph.next_ptr[single]]
    ok = graph.n_prev[succ] == 1
    if same_kind is not None:
        ok &= same_kind[single] == same_kind[succ]
    link[single[ok]] = succ[ok]
    return link


def mark_sure_images(table: BlobTable, area_model: AreaModel, graph: OverlapGraph) -> np.ndarray:
    """Per-blob label: AMBIGUOUS, SURE_INDIVIDUAL or SURE_CROSSING.

    The past/future history of a blob is the chain reached through one-to-one
    overlap steps. ``split_ahead[b]`` says some blob on the future chain of ``b``
    (``b`` included) overlaps several blobs in its next frame; ``merge_behind``
    is the mirror image for previous frames.
    """
    n = len(table)
    n_next = graph.n_next
    n_prev = graph.n_prev
    link = unique_links(graph)
    split_ahead = n_next > 1
    merge_behind = n_prev > 1
    # blobs are frame-sorted and links go one frame forward, so one sweep each way suffices
    has_link = np.flatnonzero(link >= 0)
    for b in has_link[::-1]:
        if split_ahead[link[b]]:
            split_ahead[b] = True
    for b in has_link:
        if merge_behind[b]:
            merge_behind[link[b]] = True
    individual = area_model.is_individual(table.area)
    one_one = (n_prev == 1) & (n_next == 1)
    labels = np.full(n, AMBIGUOUS, dtype=np.int8)
    labels[individual & one_one & ~split_ahead & ~merge_behind] = SURE_INDIVIDUAL
    crossing = ~individual
    sure_x = crossing & ((n_prev > 1) | (n_next > 1) | (one_one & split_ahead & merge_behind))
    labels[sure_x] = SURE_CROSSING
    return labels


# ---------------------------------------------------------------------------
# fragments
# ---------------------------------------------------------------------------

@dataclass
class FragmentTable:
    """Fragments of one kind; fragment ``i`` owns ``blobs[ptr[i]:ptr[i+1]]``."""

    kind: str
    ptr: np.ndarray
    blobs: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def __len__(self):
        return len(self.start)

    @property
    def size(self) -> np.ndarray:
        return np.diff(self.ptr)

    def blobs_of(self, i: int) -> np.ndarray:
        return self.blobs[self.ptr[i]:self.ptr[i + 1]]

    def owner(self) -> np.ndarray:
        """Fragment id of every entry of ``blobs``."""
        return np.repeat(np.arange(len(self)), self.size)

    def coexisting(self) -> "Coexistence":
        return Coexistence.from_intervals(self.start, self.end)


@dataclass
class Fragments:
    individual: FragmentTable
    crossing: FragmentTable
    blob_fragment: np.ndarray  # fragment id within its kind
    is_individual: np.ndarray  # per-blob final label

    def to_json(self, table: BlobTable) -> list:
        out = []
        cen = table.centroid
        for ft in (self.individual, self.crossing):
            for i in range(len(ft)):
                bl = ft.blobs_of(i)
                out.append({"id": i, "kind": ft.kind,
                            "frames": [int(ft.start[i]), int(ft.end[i])],
                            "centroids": np.round(cen[bl], 3).tolist()})
        return out

    def dump(self, path, table: BlobTable) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(table), fh)


def build_fragments(table: BlobTable, graph: OverlapGraph, is_individual: np.ndarray) -> Fragments:
    """Chain blobs into maximal one-to-one, same-kind runs."""
    is_individual = np.asarray(is_individual, dtype=bool)
    n = len(table)
    link = unique_links(graph, same_kind=is_individual)
    has_pred = np.zeros(n, dtype=bool)
    has_pred[link[link >= 0]] = True
    blob_fragment = np.full(n, -1, dtype=np.int64)
    tables = {}
    for kind, flag in (("individual", True), ("crossing", False)):
        heads = np.flatnonzero((is_individual == flag) & ~has_pred)
        order = []
        sizes = np.empty(len(heads), dtype=np.int64)
        for fid, h in enumerate(heads.tolist()):
            b = h
            k = 0
            while b >= 0:
                blob_fragment[b] = fid
                order.append(b)
                k += 1
                b = int(link[b])
            sizes[fid] = k
        blobs = np.asarray(order, dtype=np.int64)
        ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        frames = table.frame
        start = frames[blobs[ptr[:-1]]] if len(heads) else np.zeros(0, np.int64)
        end = frames[blobs[ptr[1:] - 1]] if len(heads) else np.zeros(0, np.int64)
        tables[kind] = FragmentTable(kind, ptr, blobs, start.astype(np.int64), end.astype(np.int64))
    return Fragments(tables["individual"], tables["crossing"], blob_fragment, is_individual)


@dataclass
class Coexistence:
    """CSR list of fragments sharing at least one frame (self excluded)."""

    ptr: np.ndarray
    idx: np.ndarray

    @classmethod
    def from_intervals(cls, start, end):
        start = np.asarray(start, dtype=np.int64)
        end = np.asarray(end, dtype=np.int64)
        order = np.argsort(start, kind="stable")
        s_sorted = start[order]
        chunks = []
        counts = np.zeros(len(start), dtype=np.int64)
        for i in range(len(start)):
            hi = np.searchsorted(s_sorted, end[i], side="right")
            cand = order[:hi]
            cand = cand[(end[cand] >= start[i]) & (cand != i)]
            cand.sort()
            chunks.append(cand)
            counts[i] = len(cand)
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        idx = np.concatenate(chunks) if chunks else np.zeros(0, np.int64)
        return cls(ptr, idx.astype(np.int64))

    def __getitem__(self, i) -> np.ndarray:
        return self.idx[self.ptr[i]:self.ptr[i + 1]]


@dataclass
class GlobalFragments:
    members: np.ndarray  # (G, n) individual-fragment ids, ascending per row
    core: np.ndarray     # (G,) first frame of the qualifying run

    def __len__(self):
        return len(self.core)


def build_global_fragments(table: BlobTable, fragments: Fragments, n_animals: int) -> GlobalFragments:
    """Global fragments, one per distinct member set, cored at its first frame.

    A frame qualifies when it holds exactly ``n_animals`` blobs, all individual,
    whose fragments each have at least three images.
    """
    ind = fragments.individual
    fp = table.frame_ptr
    counts = np.diff(fp)
    cand = np.flatnonzero(counts == n_animals)
    seen = {}
    size = ind.size
    for f in cand.tolist():
        bl = np.arange(fp[f], fp[f + 1])
        if not fragments.is_individual[bl].all():
            continue
        fr = fragments.blob_fragment[bl]
        if size[fr].min() < MIN_GLOBAL_FRAGMENT_IMAGES:
            continue
        key = tuple(sorted(fr.tolist()))
        if key not in seen:
            seen[key] = f
    if not seen:
        return GlobalFragments(np.zeros((0, n_animals), np.int64), np.zeros(0, np.int64))
    keys = list(seen)
    core = np.array([seen[k] for k in keys], dtype=np.int64)
    members = np.array(keys, dtype=np.int64).reshape(len(keys), n_animals)
    o = np.argsort(core, kind="stable")
    return GlobalFragments(members[o], core[o])


def distance_travelled(centroids) -> float:
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    if len(c) < 2:
        return 0.0
    return float(np.sqrt((np.diff(c, axis=0) ** 2).sum(axis=1)).sum())


def fragment_distances(table: BlobTable, ft: FragmentTable) -> np.ndarray:
    """Distance travelled by every fragment of ``ft``."""
    c = table.centroid[ft.blobs]
    step = np.zeros(len(ft.blobs))
    if len(c) > 1:
        step[1:] = np.sqrt((np.diff(c, axis=0) ** 2).sum(axis=1))
        step[ft.ptr[:-1][ft.size > 0]] = 0.0  # no step across fragment boundaries
    out = np.zeros(len(ft))
    np.add.at(out, ft.owner(), step)
    return out
