"""Synthetic videos with planted identities, fragments and crossings.

Each individual lives in its own square cell of a grid and random-walks there,
so distinct individuals never touch except during a planted crossing: for
``crossing_length`` frames an individual and a free 4-adjacent neighbour are
drawn as one blob (both ellipses joined by a one-pixel L-shaped bridge).
Individual fragments last ``ceil(Gamma(k, theta))`` frames.

Bodies are ellipses whose interior carries a per-individual texture: a coarse
random grid in body coordinates, bilinearly interpolated and optionally
drifting towards a second grid over the video, plus per-pixel noise. The
ratio of texture amplitude to noise is the identity SNR.

Blobs are emitted directly as a :class:`~fragtrack.ingest.BlobTable` in the
exact order segmentation would produce; full frames can be rendered for the
PGM / raw path.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .ingest import BlobTable, CROP_MARGIN


class InfeasibleConfig(ValueError):
    pass


@dataclass
class SynthConfig:
    n_individuals: int = 10
    total_frames: int = 1000
    gamma_theta: float = 2000.0
    gamma_k: float = 0.5
    crossing_length: int = 3
    crossings: bool = True
    snr: float = 4.0
    noise_std: float = 6.0
    drift: float = 0.0          # fraction of the way to the second texture by the last frame
    cell_size: int = 28
    body_semi_major: float = 6.0
    body_semi_minor: float = 2.25
    size_jitter: float = 0.08   # per-individual relative body size spread
    template_grid: tuple = (6, 3)
    body_intensity: float = 70.0
    background: int = 220
    speed: float = 0.8          # px / frame, upper bound of the step
    turn_sd: float = 0.25       # rad / frame
    first_fragment_cap: Optional[int] = None  # shortens every individual's first fragment
    seed: int = 0

    def __post_init__(self):
        self.template_grid = tuple(int(v) for v in self.template_grid)
        if self.n_individuals < 2:
            raise InfeasibleConfig("need at least two individuals")
        if self.total_frames < 1:
            raise InfeasibleConfig("need at least one frame")
        if self.gamma_theta <= 0 or self.gamma_k <= 0:
            raise InfeasibleConfig("gamma theta and k must be positive")
        if self.crossing_length < 1:
            raise InfeasibleConfig("crossing_length must be >= 1")
        if self.body_semi_minor > self.body_semi_major:
            raise InfeasibleConfig("semi-minor axis exceeds semi-major axis")
        if not 0 <= self.size_jitter < 0.5:
            raise InfeasibleConfig("size_jitter must lie in [0, 0.5)")
        if self.speed < 0 or self.speed > self.body_semi_minor * (1 - self.size_jitter) - 0.75:
            # a step this small keeps the previous centre pixel inside the new
            # ellipse, so consecutive images of one individual always overlap
            raise InfeasibleConfig("speed must lie in [0, body_semi_minor - 0.75]")
        room = self.cell_size - 2 * (self.max_reach + 2)
        if room < 1:
            raise InfeasibleConfig("cell too small for the body")
        if min(self.template_grid) < 2:
            raise InfeasibleConfig("template grid needs at least 2x2 nodes")

    @property
    def grid_shape(self):
        cols = math.ceil(math.sqrt(self.n_individuals))
        rows = math.ceil(self.n_individuals / cols)
        return rows, cols

    @property
    def width(self):
        return self.grid_shape[1] * self.cell_size

    @property
    def height(self):
        return self.grid_shape[0] * self.cell_size

    @property
    def max_reach(self) -> int:
        return math.ceil(self.body_semi_major * (1 + self.size_jitter))

    @property
    def body_length(self):
        return 2.0 * self.body_semi_major


@dataclass
class GroundTruth:
    centroids: np.ndarray        # (T, n, 2) planted centres
    in_crossing: np.ndarray      # (T, n) bool
    blob_individual: np.ndarray  # (B,) individual of each emitted blob, -1 for crossings
    blob_members: np.ndarray     # (B, 2) the individuals drawn in each blob (-1 padded)
    individual_fragments: list = field(default_factory=list)  # (individual, start, end)
    crossing_fragments: list = field(default_factory=list)    # (a, b, start, end)
    body_length: float = 12.0

    @property
    def n_frames(self):
        return self.centroids.shape[0]

    @property
    def n_individuals(self):
        return self.centroids.shape[1]

    def to_json(self) -> dict:
        return {
            "centroids": np.round(self.centroids, 4).tolist(),
            "in_crossing": self.in_crossing.astype(int).tolist(),
            "blob_individual": self.blob_individual.tolist(),
            "blob_members": self.blob_members.tolist(),
            "individual_fragments": [list(map(int, f)) for f in self.individual_fragments],
            "crossing_fragments": [list(map(int, f)) for f in self.crossing_fragments],
            "body_length": self.body_length,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(np.asarray(d["centroids"], dtype=np.float64),
                   np.asarray(d["in_crossing"], dtype=bool),
                   np.asarray(d["blob_individual"], dtype=np.int64),
                   np.asarray(d["blob_members"], dtype=np.int64).reshape(-1, 2),
                   [tuple(f) for f in d["individual_fragments"]],
                   [tuple(f) for f in d["crossing_fragments"]],
                   float(d.get("body_length", 12.0)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class SyntheticVideo:
    config: SynthConfig
    blobs: BlobTable
    truth: GroundTruth

    def render_frames(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Full grayscale frames ``[start, stop)`` with every blob pasted on the background."""
        t = self.blobs
        stop = t.n_frames if stop is None else stop
        out = np.full((stop - start, t.height, t.width), self.config.background, dtype=np.uint8)
        fp = t.frame_ptr
        for f in range(start, stop):
            for b in range(fp[f], fp[f + 1]):
                img = t.image_of(b)
                x0, y0 = t.img_origin[b]
                s = slice(t.pix_ptr[b], t.pix_ptr[b + 1])
                px, py = t.pix_x[s], t.pix_y[s]
                out[f - start, py, px] = img[py - y0, px - x0]
        return out


# ---------------------------------------------------------------------------
# schedule of fragments and crossings
# ---------------------------------------------------------------------------

def sample_fragment_lengths(rng, k, theta, size) -> np.ndarray:
    """``ceil(Gamma(k, theta))``, at least 1."""
    return np.maximum(1, np.ceil(rng.gamma(k, theta, size=size))).astype(np.int64)


def _neighbours(cfg: SynthConfig):
    rows, cols = cfg.grid_shape
    nb = []
    for i in range(cfg.n_individuals):
        r, c = divmod(i, cols)
        cand = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
        nb.append(sorted(rr * cols + cc for rr, cc in cand
                         if 0 <= rr < rows and 0 <= cc < cols and rr * cols + cc < cfg.n_individuals))
    return nb


def _schedule(cfg: SynthConfig, rng, positions):
    """Per frame, the partner each individual crosses with (-1 when alone)."""
    T, n = cfg.total_frames, cfg.n_individuals
    partner = np.full((T, n), -1, dtype=np.int64)
    if not cfg.crossings:
        return partner
    nbrs = _neighbours(cfg)
    if all(len(v) == 0 for v in nbrs):
        raise InfeasibleConfig("no two individuals are adjacent; crossings impossible")
    L = cfg.crossing_length
    due = sample_fragment_lengths(rng, cfg.gamma_k, cfg.gamma_theta, n)
    if cfg.first_fragment_cap is not None:
        due = np.minimum(due, cfg.first_fragment_cap)
    busy_until = np.full(n, -1, dtype=np.int64)  # last crossing frame
    for t in range(1, T):
        for i in np.flatnonzero(due <= t):
            if busy_until[i] >= t - 1:  # in a crossing or just left one
                continue
            free = [j for j in nbrs[i] if busy_until[j] < t - 1]
            if not free:
                due[i] = t + 1
                continue
            d = [float(np.hypot(*(positions[t, j] - positions[t, i]))) for j in free]
            j = free[int(np.argmin(d))]
            end = min(T - 1, t + L - 1)
            partner[t:end + 1, i] = j
            partner[t:end + 1, j] = i
            busy_until[i] = busy_until[j] = end
            nxt = end + 1 + sample_fragment_lengths(rng, cfg.gamma_k, cfg.gamma_theta, 2)
            due[i], due[j] = nxt
    return partner


def _trajectories(cfg: SynthConfig, rng):
    T, n = cfg.total_frames, cfg.n_individuals
    rows, cols = cfg.grid_shape
    C = cfg.cell_size
    pad = cfg.max_reach + 2.0  # keeps >= 1 empty px inside the cell border
    cell = np.array([[(i % cols) * C, (i // cols) * C] for i in range(n)], dtype=np.float64)
    lo = cell + pad
    hi = cell + C - 1 - pad
    pos = np.empty((T, n, 2))
    head = np.empty((T, n))
    p = lo + rng.random((n, 2)) * (hi - lo)
    h = rng.uniform(-math.pi, math.pi, n)
    for t in range(T):
        if t:
            h = h + rng.normal(0.0, cfg.turn_sd, n)
            step = cfg.speed * rng.uniform(0.5, 1.0, n)
            q = p + step[:, None] * np.stack([np.cos(h), np.sin(h)], axis=1)
            out = np.any((q < lo) | (q > hi), axis=1)
            if out.any():
                # turn towards the cell centre instead of leaving
                ctr = (lo + hi) / 2
                h[out] = np.arctan2(ctr[out, 1] - p[out, 1], ctr[out, 0] - p[out, 0])
                q[out] = p[out] + step[out, None] * np.stack([np.cos(h[out]), np.sin(h[out])], axis=1)
                q = np.clip(q, lo, hi)
            p = q
        pos[t] = p
        head[t] = h
    return pos, head


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _render_bodies(cfg, rng, pos, head, templates, scale, frames):
    """Ellipse pixels and intensities of every individual in ``frames``.

    Returns ``(f_idx, i_idx, x, y, value)`` sorted by frame, individual, y, x.
    """
    a = cfg.body_semi_major * scale[None, :, None, None]
    b = cfg.body_semi_minor * scale[None, :, None, None]
    R = cfg.max_reach + 1
    off = np.arange(-R, R + 1)
    F = len(frames)
    n = cfg.n_individuals
    c = pos[frames]                      # (F, n, 2)
    base = np.rint(c).astype(np.int64)
    X = base[..., 0, None, None] + off[None, None, None, :]  # (F, n, 1, W)
    Y = base[..., 1, None, None] + off[None, None, :, None]  # (F, n, W, 1)
    dx = X - c[..., 0, None, None]
    dy = Y - c[..., 1, None, None]
    ch = np.cos(head[frames])[..., None, None]
    sh = np.sin(head[frames])[..., None, None]
    u = dx * ch + dy * sh
    v = -dx * sh + dy * ch
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    fi, ii, ry, rx = np.nonzero(inside)
    uu = u[fi, ii, ry, rx] / a[0, ii, 0, 0]
    vv = v[fi, ii, ry, rx] / b[0, ii, 0, 0]
    gu, gv = cfg.template_grid
    s = (uu + 1) / 2 * (gu - 1)
    r = (vv + 1) / 2 * (gv - 1)
    t1, t2 = templates
    tex1 = _sample_templates(t1, ii, s, r)
    if cfg.drift:
        lam = cfg.drift * np.asarray(frames, dtype=np.float64)[fi] / max(cfg.total_frames - 1, 1)
        tex = (1 - lam) * tex1 + lam * _sample_templates(t2, ii, s, r)
    else:
        tex = tex1
    amp = cfg.snr * cfg.noise_std
    val = cfg.body_intensity + amp * tex + rng.normal(0.0, cfg.noise_std, len(tex))
    val = np.clip(np.rint(val), 0, 160).astype(np.uint8)
    x = base[fi, ii, 0] + off[rx]
    y = base[fi, ii, 1] + off[ry]
    return np.asarray(frames)[fi], ii, x, y, val


def _sample_templates(tmpl, ii, s, r):
    gu, gv = tmpl.shape[1:]
    s = np.clip(s, 0, gu - 1)
    r = np.clip(r, 0, gv - 1)
    s0 = np.minimum(np.floor(s).astype(np.int64), gu - 2)
    r0 = np.minimum(np.floor(r).astype(np.int64), gv - 2)
    fs = s - s0
    fr = r - r0
    return ((1 - fs) * (1 - fr) * tmpl[ii, s0, r0] + fs * (1 - fr) * tmpl[ii, s0 + 1, r0]
            + (1 - fs) * fr * tmpl[ii, s0, r0 + 1] + fs * fr * tmpl[ii, s0 + 1, r0 + 1])


def _bridge(p, q, horizontal_first: bool):
    """One-pixel 4-connected L path from pixel ``p`` to pixel ``q``."""
    (x0, y0), (x1, y1) = p, q
    pts = []
    if horizontal_first:
        sx = 1 if x1 >= x0 else -1
        pts += [(x, y0) for x in range(x0, x1 + sx, sx)]
        sy = 1 if y1 >= y0 else -1
        pts += [(x1, y) for y in range(y0, y1 + sy, sy)]
    else:
        sy = 1 if y1 >= y0 else -1
        pts += [(x0, y) for y in range(y0, y1 + sy, sy)]
        sx = 1 if x1 >= x0 else -1
        pts += [(x, y1) for x in range(x0, x1 + sx, sx)]
    return pts


def generate_synthetic_video(config: SynthConfig, chunk: int = 256) -> SyntheticVideo:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n, T = cfg.n_individuals, cfg.total_frames
    gu, gv = cfg.template_grid
    t1 = rng.normal(size=(n, gu, gv))
    t2 = rng.normal(size=(n, gu, gv))
    scale = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, n)
    pos, head = _trajectories(cfg, rng)
    partner = _schedule(cfg, rng, pos)
    cols = cfg.grid_shape[1]
    W, H = cfg.width, cfg.height
    noise_rng = np.random.default_rng([cfg.seed, 1])

    frame_l, pix_ptr_l, px_l, py_l, img_l, org_l, shp_l, ind_l, mem_l = ([] for _ in range(9))
    n_pix = 0
    for s in range(0, T, chunk):
        frames = np.arange(s, min(T, s + chunk))
        fi, ii, x, y, val = _render_bodies(cfg, noise_rng, pos, head, (t1, t2), scale, frames)
        key = (fi - s) * n + ii
        bounds = np.searchsorted(key, np.arange(len(frames) * n + 1))
        for k, f in enumerate(frames.tolist()):
            done = set()
            items = []
            for i in range(n):
                if i in done:
                    continue
                sl = slice(bounds[k * n + i], bounds[k * n + i + 1])
                xs, ys, vs = x[sl], y[sl], val[sl]
                j = int(partner[f, i])
                members = (i, -1)
                if j >= 0:
                    done.add(j)
                    sj = slice(bounds[k * n + j], bounds[k * n + j + 1])
                    same_row = (i // cols) == (j // cols)
                    path = _bridge((int(np.rint(pos[f, i, 0])), int(np.rint(pos[f, i, 1]))),
                                   (int(np.rint(pos[f, j, 0])), int(np.rint(pos[f, j, 1]))), same_row)
                    bx = np.array([p[0] for p in path])
                    by = np.array([p[1] for p in path])
                    xs = np.concatenate([xs, x[sj], bx])
                    ys = np.concatenate([ys, y[sj], by])
                    vs = np.concatenate([vs, val[sj], np.full(len(bx), int(cfg.body_intensity), np.uint8)])
                    code, first = np.unique(ys * W + xs, return_index=True)
                    xs, ys, vs = xs[first], ys[first], vs[first]
                    members = (min(i, j), max(i, j))
                else:
                    o = np.argsort(ys * W + xs, kind="stable")
                    xs, ys, vs = xs[o], ys[o], vs[o]
                items.append((int(ys[0] * W + xs[0]), xs, ys, vs, members))
            items.sort(key=lambda it: it[0])  # raster order of first pixel
            for _, xs, ys, vs, members in items:
                x0, y0 = int(xs.min()) - CROP_MARGIN, int(ys.min()) - CROP_MARGIN
                x1, y1 = int(xs.max()) + CROP_MARGIN, int(ys.max()) + CROP_MARGIN
                crop = np.full((y1 - y0 + 1, x1 - x0 + 1), cfg.background, dtype=np.uint8)
                crop[ys - y0, xs - x0] = vs
                frame_l.append(f)
                pix_ptr_l.append(len(xs))
                px_l.append(xs)
                py_l.append(ys)
                img_l.append(crop.ravel())
                org_l.append((x0, y0))
                shp_l.append(crop.shape)
                ind_l.append(members[0] if members[1] < 0 else -1)
                mem_l.append(members)
                n_pix += len(xs)
    B = len(frame_l)
    img_sizes = np.array([len(v) for v in img_l], dtype=np.int64)
    table = BlobTable(
        width=W, height=H, n_frames=T,
        frame=np.array(frame_l, dtype=np.int64),
        pix_ptr=np.concatenate([[0], np.cumsum(pix_ptr_l)]).astype(np.int64),
        pix_x=np.concatenate(px_l).astype(np.int32) if B else np.zeros(0, np.int32),
        pix_y=np.concatenate(py_l).astype(np.int32) if B else np.zeros(0, np.int32),
        img_ptr=np.concatenate([[0], np.cumsum(img_sizes)]).astype(np.int64),
        img_data=np.concatenate(img_l) if B else np.zeros(0, np.uint8),
        img_origin=np.array(org_l, dtype=np.int64).reshape(B, 2),
        img_shape=np.array(shp_l, dtype=np.int64).reshape(B, 2),
    )
    in_cross = partner >= 0
    truth = GroundTruth(pos, in_cross, np.array(ind_l, dtype=np.int64),
                        np.array(mem_l, dtype=np.int64).reshape(B, 2),
                        _planted_individual_fragments(in_cross),
                        _planted_crossing_fragments(partner),
                        cfg.body_length)
    return SyntheticVideo(cfg, table, truth)


def _runs(mask_1d):
    """(start, end) inclusive of the True runs of a boolean vector."""
    m = np.concatenate([[False], mask_1d, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1) - 1))


def _planted_individual_fragments(in_cross):
    out = []
    for i in range(in_cross.shape[1]):
        out += [(i, int(s), int(e)) for s, e in _runs(~in_cross[:, i])]
    out.sort(key=lambda f: (f[1], f[0]))
    return out


def _planted_crossing_fragments(partner):
    out = []
    T, n = partner.shape
    for i in range(n):
        p = partner[:, i]
        for s, e in _runs(p > i):
            # consecutive crossings with different partners are separated by a free frame
            out.append((i, int(p[s]), int(s), int(e)))
    out.sort(key=lambda f: (f[2], f[0]))
    return out


# ---------------------------------------------------------------------------
# validation against ground truth
# ---------------------------------------------------------------------------

def identity_mapping(blob_identity, truth: GroundTruth, table: BlobTable, core_frame: int) -> dict:
    """Result identity -> true individual, read off the blobs of ``core_frame``."""
    mapping = {}
    for b in range(table.frame_ptr[core_frame], table.frame_ptr[core_frame + 1]):
        ident = int(blob_identity[b])
        g = int(truth.blob_individual[b])
        if ident > 0 and g >= 0:
            mapping[ident] = g
    return mapping


def speed_mask(truth: GroundTruth, min_speed: float) -> np.ndarray:
    """(T, n) frames where the planted individual moves at least ``min_speed`` px/frame."""
    c = truth.centroids
    sp = np.zeros(c.shape[:2])
    if len(c) > 1:
        step = np.hypot(*np.moveaxis(np.diff(c, axis=0), -1, 0))
        sp[1:] = step
        sp[0] = step[0]
    return sp >= min_speed


def speed_corrected_count(truth: GroundTruth, individual: int, start: int, end: int,
                          frame_rate: float = 25.0, body_lengths_per_s: float = 0.75) -> int:
    """Frames of ``[start, end]`` where ``individual`` moves at >= 0.75 body lengths/s."""
    thr = body_lengths_per_s * truth.body_length / frame_rate
    return int(speed_mask(truth, thr)[start:end + 1, individual].sum())


def validation_metrics(blob_identity, truth: GroundTruth, table: BlobTable, core_frame: int,
                       span=None, blob_accumulated=None, individuals=None) -> dict:
    """Accuracy indices over the individual images of ``span`` (inclusive frame range)."""
    blob_identity = np.asarray(blob_identity, dtype=np.int64)
    lo, hi = (0, table.n_frames - 1) if span is None else span
    if hi < lo or lo < 0 or hi >= table.n_frames:
        raise ValueError(f"empty or invalid validation span {span}")
    mapping = identity_mapping(blob_identity, truth, table, core_frame)
    sel = (table.frame >= lo) & (table.frame <= hi) & (truth.blob_individual >= 0)
    idx = np.flatnonzero(sel)
    if len(idx) == 0:
        raise ValueError("no individual images in the span")
    gt = truth.blob_individual[idx]
    ident = blob_identity[idx]
    lut = np.full(max(int(blob_identity.max(initial=0)), 0) + 2, -2, dtype=np.int64)
    for k, v in mapping.items():
        lut[k] = v
    mapped = np.where(ident > 0, lut[np.clip(ident, 0, len(lut) - 1)], -1)
    unassigned = ident <= 0
    correct = (~unassigned) & (mapped == gt)
    wrong = (~unassigned) & ~correct
    N = len(idx)
    out = {
        "images": int(N),
        "accuracy": float(correct.sum() / N),
        "non_identified": float(unassigned.sum() / N),
        "misidentified": float(wrong.sum() / N),
    }
    if blob_accumulated is not None:
        acc = np.asarray(blob_accumulated, dtype=bool)[idx]
        out["accuracy_cascade"] = float(correct[acc].sum() / acc.sum()) if acc.any() else 1.0
        out["cascade_images"] = int(acc.sum())
    if individuals is not None:
        per = {}
        for ident_i in individuals:
            g = mapping.get(int(ident_i))
            m = gt == g if g is not None else np.zeros(N, bool)
            per[int(ident_i)] = float(correct[m].sum() / m.sum()) if m.any() else float("nan")
        out["per_individual"] = per
    return out


def config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["template_grid"] = list(cfg.template_grid)
    return d
