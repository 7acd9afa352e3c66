"""Hot numeric kernels, each with a numba implementation and a numpy fallback.

Every public function takes ``backend=None`` (use the process default chosen by
``FRAGTRACK_NUMBA``), ``"numba"`` or ``"numpy"``. The two paths are required to
return identical arrays; ``tests/test_kernels.py`` checks this.
"""
import numpy as np
from scipy import ndimage

from ._accel import njit, resolve_backend

__all__ = [
    "label_components",
    "overlap_edges",
    "mask_crops",
    "rotate_crop",
]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# ---------------------------------------------------------------------------
# 4-connected component labelling
# ---------------------------------------------------------------------------

@njit
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit
def _label4_numba(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = np.zeros(h * w // 2 + 2, dtype=np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            up = labels[y - 1, x] if y > 0 else 0
            left = labels[y, x - 1] if x > 0 else 0
            if up == 0 and left == 0:
                if nxt >= parent.shape[0]:
                    grown = np.zeros(parent.shape[0] * 2, dtype=np.int32)
                    grown[: parent.shape[0]] = parent
                    parent = grown
                parent[nxt] = nxt
                labels[y, x] = nxt
                nxt += 1
            elif up == 0:
                labels[y, x] = left
            elif left == 0:
                labels[y, x] = up
            else:
                ru = _find(parent, up)
                rl = _find(parent, left)
                if ru < rl:
                    parent[rl] = ru
                    labels[y, x] = ru
                else:
                    parent[ru] = rl
                    labels[y, x] = rl
    # final labels numbered by raster order of each component's first pixel
    remap = np.zeros(nxt, dtype=np.int32)
    count = 0
    for y in range(h):
        for x in range(w):
            lab = labels[y, x]
            if lab == 0:
                continue
            root = _find(parent, lab)
            if remap[root] == 0:
                count += 1
                remap[root] = count
            labels[y, x] = remap[root]
    return labels, count


def _label4_numpy(mask):
    labels, count = ndimage.label(mask, structure=_CROSS)
    if count == 0:
        return labels.astype(np.int32), 0
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    _, first = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    return remap[labels].astype(np.int32), int(count)


def label_components(mask, backend=None):
    """Label 4-connected components of a boolean image.

    Labels run 1..count in row-major order of each component's first pixel;
    background is 0.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if resolve_backend(backend) == "numba":
        labels, count = _label4_numba(mask)
        return labels, int(count)
    return _label4_numpy(mask)


# ---------------------------------------------------------------------------
# Overlap edges between blobs of consecutive frames
# ---------------------------------------------------------------------------

@njit
def _overlap_edges_numba(frame_ptr, pix_ptr, pix, npix):
    owner = np.full(npix, -1, dtype=np.int64)
    cap = 1024
    src = np.empty(cap, dtype=np.int64)
    dst = np.empty(cap, dtype=np.int64)
    k = 0
    n_frames = frame_ptr.shape[0] - 1
    for f in range(n_frames - 1):
        a0, a1 = frame_ptr[f], frame_ptr[f + 1]
        b1 = frame_ptr[f + 2]
        for b in range(a0, a1):
            for q in range(pix_ptr[b], pix_ptr[b + 1]):
                owner[pix[q]] = b
        for b in range(a1, b1):
            k0 = k
            for q in range(pix_ptr[b], pix_ptr[b + 1]):
                o = owner[pix[q]]
                if o < 0:
                    continue
                seen = False
                for t in range(k0, k):
                    if src[t] == o:
                        seen = True
                        break
                if seen:
                    continue
                if k >= cap:
                    cap *= 2
                    s2 = np.empty(cap, dtype=np.int64)
                    d2 = np.empty(cap, dtype=np.int64)
                    s2[:k] = src[:k]
                    d2[:k] = dst[:k]
                    src, dst = s2, d2
                src[k] = o
                dst[k] = b
                k += 1
        for b in range(a0, a1):
            for q in range(pix_ptr[b], pix_ptr[b + 1]):
                owner[pix[q]] = -1
    return src[:k].copy(), dst[:k].copy()


def _overlap_edges_numpy(frame_ptr, pix_ptr, pix, npix):
    owner = np.full(npix, -1, dtype=np.int64)
    n_blobs = len(pix_ptr) - 1
    blob_of_pix = np.repeat(np.arange(n_blobs, dtype=np.int64), np.diff(pix_ptr))
    srcs, dsts = [], []
    for f in range(len(frame_ptr) - 2):
        a0, a1, b1 = frame_ptr[f], frame_ptr[f + 1], frame_ptr[f + 2]
        pa = slice(pix_ptr[a0], pix_ptr[a1])
        pb = slice(pix_ptr[a1], pix_ptr[b1])
        owner[pix[pa]] = blob_of_pix[pa]
        hit = owner[pix[pb]]
        ok = hit >= 0
        if ok.any():
            codes = np.unique(hit[ok] * n_blobs + blob_of_pix[pb][ok])
            srcs.append(codes // n_blobs)
            dsts.append(codes % n_blobs)
        owner[pix[pa]] = -1
    if not srcs:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(srcs), np.concatenate(dsts)


def overlap_edges(frame_ptr, pix_ptr, pix, npix, backend=None):
    """Pixel-overlap edges between blobs in frames ``f`` and ``f + 1``.

    Blobs are stored frame-sorted in CSR form: blob ``b`` owns the flat pixel
    indices ``pix[pix_ptr[b]:pix_ptr[b+1]]`` and frame ``f`` owns blobs
    ``frame_ptr[f]:frame_ptr[f+1]``. Returns ``(src, dst)`` sorted by
    ``(src, dst)``.
    """
    frame_ptr = np.ascontiguousarray(frame_ptr, dtype=np.int64)
    pix_ptr = np.ascontiguousarray(pix_ptr, dtype=np.int64)
    pix = np.ascontiguousarray(pix, dtype=np.int64)
    if len(frame_ptr) < 3:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    if resolve_backend(backend) == "numba":
        src, dst = _overlap_edges_numba(frame_ptr, pix_ptr, pix, int(npix))
    else:
        src, dst = _overlap_edges_numpy(frame_ptr, pix_ptr, pix, int(npix))
    order = np.lexsort((dst, src))
    return src[order], dst[order]


# ---------------------------------------------------------------------------
# Dilated-blob masking of image crops
# ---------------------------------------------------------------------------

@njit
def _mask_crops_numba(img_data, img_ptr, origin, shape, pix_ptr, pix_x, pix_y, radius):
    out = np.zeros_like(img_data)
    for b in range(img_ptr.shape[0] - 1):
        base = img_ptr[b]
        ox, oy = origin[b, 0], origin[b, 1]
        h, w = shape[b, 0], shape[b, 1]
        for q in range(pix_ptr[b], pix_ptr[b + 1]):
            x = pix_x[q] - ox
            y = pix_y[q] - oy
            for dy in range(-radius, radius + 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in range(-radius, radius + 1):
                    xx = x + dx
                    if xx < 0 or xx >= w:
                        continue
                    idx = base + yy * w + xx
                    out[idx] = img_data[idx]
    return out


def _mask_crops_numpy(img_data, img_ptr, origin, shape, pix_ptr, pix_x, pix_y, radius):
    n = len(img_ptr) - 1
    counts = np.diff(pix_ptr)
    owner = np.repeat(np.arange(n), counts)
    lx = pix_x - origin[owner, 0]
    ly = pix_y - origin[owner, 1]
    h = shape[owner, 0]
    w = shape[owner, 1]
    base = img_ptr[owner]
    keep = np.zeros(len(img_data), dtype=bool)
    for dy in range(-radius, radius + 1):
        yy = ly + dy
        for dx in range(-radius, radius + 1):
            xx = lx + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            keep[(base + yy * w + xx)[ok]] = True
    out = np.zeros_like(img_data)
    out[keep] = img_data[keep]
    return out


def mask_crops(img_data, img_ptr, origin, shape, pix_ptr, pix_x, pix_y, radius=2, backend=None):
    """Zero every crop pixel outside the blob dilated by a (2r+1)x(2r+1) square.

    Crops are CSR-packed: crop ``b`` is ``img_data[img_ptr[b]:img_ptr[b+1]]``
    reshaped to ``shape[b] = (h, w)`` with top-left pixel ``origin[b] = (x0, y0)``.
    """
    args = (
        np.ascontiguousarray(img_data),
        np.ascontiguousarray(img_ptr, dtype=np.int64),
        np.ascontiguousarray(origin, dtype=np.int64),
        np.ascontiguousarray(shape, dtype=np.int64),
        np.ascontiguousarray(pix_ptr, dtype=np.int64),
        np.ascontiguousarray(pix_x, dtype=np.int64),
        np.ascontiguousarray(pix_y, dtype=np.int64),
        int(radius),
    )
    if resolve_backend(backend) == "numba":
        return _mask_crops_numba(*args)
    return _mask_crops_numpy(*args)


# ---------------------------------------------------------------------------
# Rotation + square crop + resize (bilinear)
# ---------------------------------------------------------------------------

@njit
def _rotate_crop_numba(img_data, img_ptr, origin, shape, centers, cos_a, sin_a, region, side):
    n = img_ptr.shape[0] - 1
    out = np.zeros((n, side, side), dtype=np.float32)
    for b in range(n):
        base = img_ptr[b]
        ox, oy = origin[b, 0], origin[b, 1]
        h, w = shape[b, 0], shape[b, 1]
        ca = cos_a[b]
        sa = sin_a[b]
        step = region[b] / side
        half = region[b] / 2.0
        cx, cy = centers[b, 0], centers[b, 1]
        for r in range(side):
            v = (r + 0.5) * step - half
            for c in range(side):
                u = (c + 0.5) * step - half
                x = cx + u * ca + v * sa - ox
                y = cy - u * sa + v * ca - oy
                x0 = int(np.floor(x))
                y0 = int(np.floor(y))
                fx = x - x0
                fy = y - y0
                acc = 0.0
                if 0 <= y0 < h:
                    if 0 <= x0 < w:
                        acc += (1.0 - fx) * (1.0 - fy) * img_data[base + y0 * w + x0]
                    if 0 <= x0 + 1 < w:
                        acc += fx * (1.0 - fy) * img_data[base + y0 * w + x0 + 1]
                if 0 <= y0 + 1 < h:
                    if 0 <= x0 < w:
                        acc += (1.0 - fx) * fy * img_data[base + (y0 + 1) * w + x0]
                    if 0 <= x0 + 1 < w:
                        acc += fx * fy * img_data[base + (y0 + 1) * w + x0 + 1]
                out[b, r, c] = acc
    return out


def _rotate_crop_numpy(img_data, img_ptr, origin, shape, centers, cos_a, sin_a, region, side, chunk=8192):
    n = len(img_ptr) - 1
    out = np.zeros((n, side, side), dtype=np.float32)
    grid = np.arange(side, dtype=np.float64) + 0.5
    data = img_data.astype(np.float64)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        step = (region[s:e] / side)[:, None, None]
        half = (region[s:e] / 2.0)[:, None, None]
        u = grid[None, None, :] * step - half
        v = grid[None, :, None] * step - half
        ca = cos_a[s:e, None, None]
        sa = sin_a[s:e, None, None]
        x = centers[s:e, 0, None, None] + u * ca + v * sa - origin[s:e, 0, None, None]
        y = centers[s:e, 1, None, None] - u * sa + v * ca - origin[s:e, 1, None, None]
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        h = shape[s:e, 0, None, None]
        w = shape[s:e, 1, None, None]
        base = img_ptr[s:e, None, None]
        acc = np.zeros(x.shape)
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                yy = y0 + dy
                xx = x0 + dx
                ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                idx = np.where(ok, base + yy * w + xx, 0)
                acc += np.where(ok, wx * wy * data[idx], 0.0)
        out[s:e] = acc
    return out


def rotate_crop(img_data, img_ptr, origin, shape, centers, angles, region, side, backend=None):
    """Sample rotated square crops with bilinear interpolation.

    Output pixel ``(r, c)`` of crop ``b`` sits at offset ``(u, v)`` from
    ``centers[b]`` on a ``region[b]``-wide square grid of ``side`` samples and
    reads the source at ``center + R(-angle) (u, v)``; so a direction at angle
    ``phi`` in the source appears at ``phi + angle`` in the output. Samples
    outside the crop read as 0.
    """
    n = len(img_ptr) - 1
    angles = np.asarray(angles, dtype=np.float64)
    region = np.broadcast_to(np.asarray(region, dtype=np.float64), (n,))
    args = (
        np.ascontiguousarray(img_data),
        np.ascontiguousarray(img_ptr, dtype=np.int64),
        np.ascontiguousarray(origin, dtype=np.int64),
        np.ascontiguousarray(shape, dtype=np.int64),
        np.ascontiguousarray(centers, dtype=np.float64),
        np.cos(angles),
        np.sin(angles),
        np.ascontiguousarray(region),
        int(side),
    )
    if resolve_backend(backend) == "numba":
        return _rotate_crop_numba(*args)
    return _rotate_crop_numpy(*args)
