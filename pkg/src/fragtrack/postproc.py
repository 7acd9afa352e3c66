"""Speed-based correction of identities, crossing resolution and trajectory output."""
from __future__ import annotations

import bisect
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .blobgraph import Coexistence, FragmentTable, OverlapGraph
from .ingest import BlobTable

log = logging.getLogger(__name__)

IMMUTABLE_P2 = 0.9
EROSION_PASSES = 5
EROSION_ELEMENT = np.ones((3, 3), dtype=bool)


class SpeedModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# speed model
# ---------------------------------------------------------------------------

def nearest_rank_percentile(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if len(v) == 0:
        raise SpeedModelError("no values")
    rank = max(1, int(math.ceil(q / 100.0 * len(v))))
    return float(v[rank - 1])


@dataclass(frozen=True)
class SpeedModel:
    v_max: float

    def __post_init__(self):
        if not self.v_max >= 0:
            raise SpeedModelError("v_max must be >= 0")

    def realistic(self, speed: float) -> bool:
        return speed <= 2.0 * self.v_max


def fragment_speeds(table: BlobTable, ft: FragmentTable) -> np.ndarray:
    """Distances between consecutive centroids inside every fragment."""
    c = table.centroid[ft.blobs]
    if len(c) < 2:
        return np.zeros(0)
    step = np.sqrt((np.diff(c, axis=0) ** 2).sum(axis=1))
    inner = np.ones(len(c) - 1, dtype=bool)
    inner[ft.ptr[1:-1] - 1] = False  # steps that jump from one fragment to the next
    return step[inner]


def fit_speed_model(table: BlobTable, ft: FragmentTable) -> SpeedModel:
    v = fragment_speeds(table, ft)
    if len(v) == 0:
        raise SpeedModelError("no within-fragment steps: v_max undefined")
    return SpeedModel(nearest_rank_percentile(v, 99))


def boundary_speed(end_centroid, end_frame, start_centroid, start_frame) -> float:
    """Speed needed to go from the end of one fragment to the start of the next."""
    if start_frame <= end_frame:
        raise ValueError("fragments are not consecutive")
    d = math.hypot(start_centroid[0] - end_centroid[0], start_centroid[1] - end_centroid[1])
    return d / (start_frame - end_frame)


def rho(size: int, n: int) -> float:
    return 1.0 / size if size > 1 else 1.0 / n


# ---------------------------------------------------------------------------
# correction of unrealistic consecutive fragments
# ---------------------------------------------------------------------------

class _IdentityIndex:
    """Per-identity fragments sorted by start frame (identities never overlap in time)."""

    def __init__(self, identity, start, end):
        self.start = start
        self.end = end
        self.lists = {}
        for f in np.argsort(start, kind="stable").tolist():
            if identity[f] > 0:
                self.lists.setdefault(int(identity[f]), []).append(f)
        self.keys = {i: [int(start[f]) for f in L] for i, L in self.lists.items()}

    def remove(self, f, i):
        L, K = self.lists[i], self.keys[i]
        k = L.index(f)
        del L[k], K[k]

    def add(self, f, i):
        L = self.lists.setdefault(i, [])
        K = self.keys.setdefault(i, [])
        k = bisect.bisect_left(K, int(self.start[f]))
        L.insert(k, f)
        K.insert(k, int(self.start[f]))

    def neighbours(self, i, s, e, exclude=-1):
        """Last fragment of identity ``i`` ending before ``s`` and first starting after ``e``."""
        L, K = self.lists.get(i, []), self.keys.get(i, [])
        k = bisect.bisect_left(K, s)
        prev = nxt = -1
        j = k - 1
        while j >= 0:
            if L[j] != exclude and self.end[L[j]] < s:
                prev = L[j]
                break
            j -= 1
        j = bisect.bisect_right(K, e)
        while j < len(L):
            if L[j] != exclude and self.start[L[j]] > e:
                nxt = L[j]
                break
            j += 1
        return prev, nxt


@dataclass
class CorrectionResult:
    identity: np.ndarray
    reidentified: list = field(default_factory=list)  # (fragment, old, new)
    passes: int = 0


class _Corrector:
    def __init__(self, identity, p2, fixed, ft_start, ft_end, c_start, c_end, sizes,
                 coexist: Coexistence, speed: SpeedModel, n: int):
        self.identity = np.array(identity, dtype=np.int64)
        self.p2 = np.asarray(p2, dtype=np.float64)
        self.fixed = np.asarray(fixed, dtype=bool)
        self.start, self.end = ft_start, ft_end
        self.c_start, self.c_end = c_start, c_end
        self.size = sizes
        self.coexist = coexist
        self.speed = speed
        self.n = n
        self.index = _IdentityIndex(self.identity, ft_start, ft_end)
        self.log = []

    def s(self, a, b) -> float:
        return boundary_speed(self.c_end[a], self.end[a], self.c_start[b], self.start[b])

    def unrealistic(self, a, b) -> bool:
        return a >= 0 and b >= 0 and not self.speed.realistic(self.s(a, b))

    def neighbours(self, f):
        i = int(self.identity[f])
        return self.index.neighbours(i, int(self.start[f]), int(self.end[f]), exclude=f)

    def target(self, f) -> int:
        """Fragment to re-identify around ``f`` (-1 for none)."""
        if self.identity[f] <= 0:
            return -1
        fp, fn = self.neighbours(f)
        if fp < 0 and fn < 0:
            return -1
        bad_p = self.unrealistic(fp, f)
        bad_n = self.unrealistic(f, fn)
        if bad_p and bad_n:
            pp = self.neighbours(fp)[0]
            nn = self.neighbours(fn)[1]
            if self.fixed[fp] or self.fixed[fn] or not (self.unrealistic(pp, fp) or self.unrealistic(fn, nn)):
                return f
            return -1
        if bad_p:
            return f if self.fixed[fp] else fp
        if bad_n:
            return f if self.fixed[fn] else fn
        return -1

    def candidate_speed(self, f, i) -> float:
        """Worst boundary speed if ``f`` took identity ``i`` (0 without neighbours)."""
        fp, fn = self.index.neighbours(i, int(self.start[f]), int(self.end[f]), exclude=f)
        sp = [self.s(fp, f)] if fp >= 0 else []
        if fn >= 0:
            sp.append(self.s(f, fn))
        return max(sp) if sp else 0.0

    def reidentify(self, f) -> int:
        old = int(self.identity[f])
        held = set(self.identity[self.coexist[f]].tolist())
        avail = [i for i in range(1, self.n + 1) if i not in held or i == old]
        if old > 0 and old not in avail:
            avail.append(old)
        if len(avail) == 1:
            new = avail[0]
        else:
            r = rho(int(self.size[f]), self.n)
            speeds = {i: self.candidate_speed(f, i) for i in avail}
            S = {i for i in avail if self.speed.realistic(speeds[i])}
            Q = {i for i in avail if self.p2[f, i - 1] > r}
            C = sorted(Q & S)
            if not C:
                new = 0
            elif len(C) == 1:
                new = C[0]
            else:
                new = min(C, key=lambda i: (speeds[i], i))
        if new != old:
            if old > 0:
                self.index.remove(f, old)
            if new > 0:
                self.index.add(f, new)
            self.identity[f] = new
            self.log.append((int(f), old, new))
        return new

    def sweep(self, order) -> int:
        changes = 0
        for f in order:
            t = self.target(f)
            if t < 0 or self.fixed[t]:
                continue
            before = int(self.identity[t])
            if self.reidentify(t) != before:
                changes += 1
        return changes


def correct_unrealistic(identity, p2, fixed, ft: FragmentTable, table: BlobTable, coexist: Coexistence,
                        speed: SpeedModel, core_frame: int, n: int, max_passes: int = 10) -> CorrectionResult:
    """Re-identify fragments whose hand-off to a same-identity neighbour is too fast.

    Fragments ending before ``core_frame`` are visited first (latest first), the
    rest afterwards (earliest first). Sweeps repeat until nothing changes, since
    a re-identification can make two other fragments consecutive. Immutable
    fragments (``fixed``) are never changed.
    """
    blobs = ft.blobs
    c = table.centroid
    c_start = c[blobs[ft.ptr[:-1]]] if len(ft) else np.zeros((0, 2))
    c_end = c[blobs[ft.ptr[1:] - 1]] if len(ft) else np.zeros((0, 2))
    corr = _Corrector(identity, p2, fixed, ft.start, ft.end, c_start, c_end, ft.size, coexist, speed, n)
    before = np.flatnonzero(ft.end < core_frame)
    after = np.flatnonzero(ft.end >= core_frame)
    order = list(before[np.argsort(-ft.end[before], kind="stable")]) + \
        list(after[np.argsort(ft.start[after], kind="stable")])
    passes = 0
    while passes < max_passes:
        passes += 1
        if corr.sweep(order) == 0:
            break
    return CorrectionResult(corr.identity, corr.log, passes)


def unrealistic_pairs(identity, ft: FragmentTable, table: BlobTable, speed: SpeedModel) -> list:
    """Consecutive same-identity fragment pairs with an unrealistic hand-off."""
    c = table.centroid
    out = []
    identity = np.asarray(identity)
    for i in np.unique(identity[identity > 0]):
        fr = np.flatnonzero(identity == i)
        fr = fr[np.argsort(ft.start[fr], kind="stable")]
        for a, b in zip(fr[:-1], fr[1:]):
            s = boundary_speed(c[ft.blobs[ft.ptr[a + 1] - 1]], ft.end[a], c[ft.blobs[ft.ptr[b]]], ft.start[b])
            if not speed.realistic(s):
                out.append((int(a), int(b), s))
    return out


def immutable_mask(accumulated, residual_assigned, p2) -> np.ndarray:
    """Cascade fragments plus residual assignments with max P2 of at least 0.9."""
    p2 = np.asarray(p2, dtype=np.float64)
    mx = p2.max(axis=1) if p2.size else np.zeros(len(accumulated))
    return np.asarray(accumulated, bool) | (np.asarray(residual_assigned, bool) & (mx >= IMMUTABLE_P2))


# ---------------------------------------------------------------------------
# crossings
# ---------------------------------------------------------------------------

def split_by_erosion(mask: np.ndarray, passes: int = EROSION_PASSES):
    """Erode until the mask falls apart into at least two pieces; returns the piece masks."""
    m = np.asarray(mask, dtype=bool)
    for _ in range(passes):
        m = ndimage.binary_erosion(m, structure=EROSION_ELEMENT)
        if not m.any():
            return []
        lab, k = ndimage.label(m)
        if k >= 2:
            return [lab == j for j in range(1, k + 1)]
    return []


@dataclass
class CrossingResolution:
    positions: dict = field(default_factory=dict)  # (frame, identity) -> (x, y)
    split_blobs: int = 0
    unsplit_blobs: int = 0


def resolve_crossings(table: BlobTable, is_individual, blob_identity, speed: SpeedModel,
                      passes: int = EROSION_PASSES) -> CrossingResolution:
    """Locate identities inside crossing blobs from the pieces left by erosion.

    Frames are visited in order so that pieces resolved in frame ``t-1`` help in
    frame ``t``. A piece takes the identity of the identified blob (or earlier
    piece) it overlaps most in an adjacent frame; failing that, the nearest
    identified centroid within ``2 v_max``.
    """
    is_individual = np.asarray(is_individual, dtype=bool)
    blob_identity = np.asarray(blob_identity, dtype=np.int64)
    fp = table.frame_ptr
    res = CrossingResolution()
    cross = np.flatnonzero(~is_individual)
    if len(cross) == 0:
        return res
    pixset = {}

    def pixels(b):
        if b not in pixset:
            p = table.pixels_of(b)
            pixset[b] = set(zip(p[:, 0].tolist(), p[:, 1].tolist()))
        return pixset[b]

    resolved_prev = []  # (identity, pixel set, centroid) of pieces in the previous frame
    prev_frame = -2
    current = []
    for t in np.unique(table.frame[cross]).tolist():
        if t != prev_frame + 1:
            resolved_prev = []
        elif prev_frame >= 0:
            resolved_prev = current
        current = []
        present = set(blob_identity[fp[t]:fp[t + 1]][is_individual[fp[t]:fp[t + 1]]].tolist())
        refs = []
        for u in (t - 1, t + 1):
            if 0 <= u < table.n_frames:
                for b in range(fp[u], fp[u + 1]):
                    if is_individual[b] and blob_identity[b] > 0:
                        refs.append((int(blob_identity[b]), pixels(b), table.centroid[b]))
        refs += resolved_prev
        for b in range(fp[t], fp[t + 1]):
            if is_individual[b]:
                continue
            p = table.pixels_of(b)
            x0, y0 = p.min(axis=0) - 1
            mask = np.zeros((p[:, 1].max() - y0 + 2, p[:, 0].max() - x0 + 2), dtype=bool)
            mask[p[:, 1] - y0, p[:, 0] - x0] = True
            pieces = split_by_erosion(mask, passes)
            if not pieces:
                res.unsplit_blobs += 1
                continue
            res.split_blobs += 1
            for piece in pieces:
                ys, xs = np.nonzero(piece)
                pts = set(zip((xs + x0).tolist(), (ys + y0).tolist()))
                cen = np.array([xs.mean() + x0, ys.mean() + y0])
                best, best_ov = 0, 0
                for ident, ps, _ in refs:
                    if ident in present:
                        continue
                    ov = len(pts & ps)
                    if ov > best_ov or (ov == best_ov and ov > 0 and ident < best):
                        best, best_ov = ident, ov
                if best == 0:
                    dmin = 2.0 * speed.v_max
                    for ident, _, c in refs:
                        if ident in present:
                            continue
                        d = math.hypot(c[0] - cen[0], c[1] - cen[1])
                        if d <= dmin and (best == 0 or d < dmin or ident < best):
                            best, dmin = ident, d
                if best > 0:
                    present.add(best)
                    res.positions[(t, best)] = (float(cen[0]), float(cen[1]))
                    current.append((best, pts, cen))
        prev_frame = t
    return res


# ---------------------------------------------------------------------------
# trajectories and accuracy
# ---------------------------------------------------------------------------

@dataclass
class Trajectories:
    without_crossings: np.ndarray  # (T, n, 2), NaN where unknown
    with_crossings: np.ndarray

    def write_csv(self, directory) -> None:
        import os
        write_trajectory_csv(os.path.join(directory, "trajectories_wo_gaps.csv"), self.without_crossings)
        write_trajectory_csv(os.path.join(directory, "trajectories.csv"), self.with_crossings)


def write_trajectory_csv(path, arr: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "identity", "x", "y"])
        T, n, _ = arr.shape
        for t in range(T):
            for i in range(n):
                x, y = arr[t, i]
                w.writerow([t, i + 1, "" if np.isnan(x) else f"{x:.4f}", "" if np.isnan(y) else f"{y:.4f}"])


def read_trajectory_csv(path, n_frames=None, n=None) -> np.ndarray:
    rows = []
    with open(path) as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            rows.append((int(row[0]), int(row[1]), float(row[2]) if row[2] else np.nan,
                         float(row[3]) if row[3] else np.nan))
    T = n_frames or (max(r[0] for r in rows) + 1 if rows else 0)
    N = n or (max(r[1] for r in rows) if rows else 0)
    out = np.full((T, N, 2), np.nan)
    for t, i, x, y in rows:
        out[t, i - 1] = (x, y)
    return out


def _fill_gaps(arr: np.ndarray, crossing_gap) -> None:
    """Linear interpolation over gaps flagged by ``crossing_gap(i, g0, g1)``; ends are held."""
    T, n, _ = arr.shape
    for i in range(n):
        known = np.flatnonzero(~np.isnan(arr[:, i, 0]))
        if len(known) == 0:
            continue
        gaps = []
        if known[0] > 0:
            gaps.append((0, known[0] - 1))
        d = np.flatnonzero(np.diff(known) > 1)
        gaps += [(known[k] + 1, known[k + 1] - 1) for k in d]
        if known[-1] < T - 1:
            gaps.append((known[-1] + 1, T - 1))
        for g0, g1 in gaps:
            if not crossing_gap(i, g0, g1):
                continue
            a, b = g0 - 1, g1 + 1
            if a < 0:
                arr[g0:g1 + 1, i] = arr[b, i]
            elif b >= T:
                arr[g0:g1 + 1, i] = arr[a, i]
            else:
                w = ((np.arange(g0, g1 + 1) - a) / (b - a))[:, None]
                arr[g0:g1 + 1, i] = (1 - w) * arr[a, i] + w * arr[b, i]


def assemble_trajectories(table: BlobTable, blob_identity, is_individual, n: int,
                          crossings: Optional[CrossingResolution] = None,
                          graph: Optional[OverlapGraph] = None) -> Trajectories:
    """Both trajectory arrays.

    Gaps in the second array are interpolated when they are caused by a crossing:
    the blob just before the gap overlaps a crossing blob in the next frame, or
    the blob just after it overlaps one in the previous frame.
    """
    blob_identity = np.asarray(blob_identity, dtype=np.int64)
    is_individual = np.asarray(is_individual, dtype=bool)
    T = table.n_frames
    wo = np.full((T, n, 2), np.nan)
    where = np.full((T, n), -1, dtype=np.int64)
    sel = np.flatnonzero(is_individual & (blob_identity > 0))
    fr = table.frame[sel]
    ids = blob_identity[sel] - 1
    if len(sel):
        key = fr * n + ids
        if len(np.unique(key)) != len(key):
            raise AssertionError("an identity appears twice in one frame")
    wo[fr, ids] = table.centroid[sel]
    where[fr, ids] = sel
    wc = wo.copy()
    if crossings is not None:
        for (t, i), xy in crossings.positions.items():
            if np.isnan(wc[t, i - 1, 0]):
                wc[t, i - 1] = xy
                where[t, i - 1] = -2
    if graph is not None:
        def crossing_gap(i, g0, g1):
            b = where[g0 - 1, i] if g0 > 0 else -1
            if b >= 0 and np.any(~is_individual[graph.next(b)]):
                return True
            b = where[g1 + 1, i] if g1 + 1 < T else -1
            if b >= 0 and np.any(~is_individual[graph.prev(b)]):
                return True
            return b == -2 or (g0 > 0 and where[g0 - 1, i] == -2)
        _fill_gaps(wc, crossing_gap)
    return Trajectories(wo, wc)


def estimated_accuracy(sizes, identity, p2) -> float:
    """Image-weighted mean of the P2 of the assigned identity over identified fragments."""
    sizes = np.asarray(sizes, dtype=np.float64)
    identity = np.asarray(identity, dtype=np.int64)
    p2 = np.asarray(p2, dtype=np.float64)
    idf = np.flatnonzero(identity > 0)
    N = sizes[idf].sum()
    if N == 0:
        return 0.0
    return float((p2[idf, identity[idf] - 1] * sizes[idf]).sum() / N)


def write_summary(path, estimated: float, protocol: str, coverage: float, v_max: float,
                  warnings_: list, extra: Optional[dict] = None) -> dict:
    doc = {"estimated_accuracy": round(float(estimated), 10), "protocol_used": protocol,
           "coverage": round(float(coverage), 10), "v_max": round(float(v_max), 10),
           "warnings": list(warnings_)}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc
