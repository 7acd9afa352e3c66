import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fragtrack import kernels
from fragtrack._accel import HAVE_NUMBA, resolve_backend
from fragtrack.ingest import BlobTable

from oracles import label4_bfs, overlap_edges_direct

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


@pytest.mark.parametrize("backend", BACKENDS)
@given(mask=arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_labels_match_bfs(backend, mask):
    lab, k = kernels.label_components(mask, backend=backend)
    ref, kr = label4_bfs(mask.tolist())
    assert k == kr
    assert np.array_equal(lab, np.array(ref, dtype=lab.dtype))


def test_label_example_two_components():
    m = np.zeros((5, 5), bool)
    m[1, 1] = m[1, 2] = True
    m[3, 4] = True
    lab, k = kernels.label_components(m)
    assert k == 2
    assert lab[1, 1] == lab[1, 2] == 1 and lab[3, 4] == 2


def _random_table(rng, n_frames=6, w=10, h=8):
    frames = []
    pix_x, pix_y, ptr, fr = [], [], [0], []
    for t in range(n_frames):
        m = rng.random((h, w)) < 0.35
        lab, k = kernels.label_components(m, backend="numpy")
        sets = []
        for j in range(1, k + 1):
            ys, xs = np.nonzero(lab == j)
            order = np.lexsort((xs, ys))
            pix_x.extend(xs[order]); pix_y.extend(ys[order])
            ptr.append(ptr[-1] + len(xs)); fr.append(t)
            sets.append(set(zip(xs.tolist(), ys.tolist())))
        frames.append(sets)
    B = len(fr)
    z = np.zeros((B, 2), np.int64)
    t = BlobTable(w, h, n_frames, np.array(fr, np.int64), np.array(ptr, np.int64),
                  np.array(pix_x, np.int32), np.array(pix_y, np.int32), np.zeros(B + 1, np.int64),
                  np.zeros(0, np.uint8), z, z)
    return t, frames


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(8))
def test_overlap_edges_match_direct(backend, seed):
    t, frames = _random_table(np.random.default_rng(seed))
    src, dst = kernels.overlap_edges(t.frame_ptr, t.pix_ptr, t.flat_pixels, t.width * t.height,
                                     backend=backend)
    assert set(zip(src.tolist(), dst.tolist())) == overlap_edges_direct(frames)
    assert list(zip(src, dst)) == sorted(zip(src, dst))


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba missing")
def test_backends_agree_on_crops(small_video):
    t = small_video.blobs
    args = (t.img_data, t.img_ptr, t.img_origin, t.img_shape, t.pix_ptr, t.pix_x, t.pix_y, 2)
    a = kernels.mask_crops(*args, backend="numpy")
    b = kernels.mask_crops(*args, backend="numba")
    assert np.array_equal(a, b)
    ang = np.linspace(-1.5, 1.5, len(t))
    starts = t.img_ptr
    ra = kernels.rotate_crop(a, starts, t.img_origin, t.img_shape, t.centroid, ang, 12.0, 9, backend="numpy")
    rb = kernels.rotate_crop(a, starts, t.img_origin, t.img_shape, t.centroid, ang, 12.0, 9, backend="numba")
    np.testing.assert_allclose(ra, rb, atol=1e-4)


def test_mask_crops_keeps_dilated_pixels_only():
    # one 1-pixel blob in a 9x9 crop full of 7s: the 5x5 neighbourhood survives
    img = np.full((9, 9), 7, np.uint8)
    t_args = (img.ravel(), np.array([0, 81]), np.array([[0, 0]]), np.array([[9, 9]]),
              np.array([0, 1]), np.array([4], np.int32), np.array([4], np.int32), 2)
    out = kernels.mask_crops(*t_args, backend="numpy").reshape(9, 9)
    assert (out[2:7, 2:7] == 7).all()
    assert out.sum() == 25 * 7


def test_rotate_identity_reproduces_crop():
    img = np.arange(49, dtype=np.uint8).reshape(7, 7)
    out = kernels.rotate_crop(img.ravel(), np.array([0, 49]), np.array([[0, 0]]), np.array([[7, 7]]),
                              np.array([[3.0, 3.0]]), np.array([0.0]), 7.0, 7, backend="numpy")
    np.testing.assert_allclose(out[0], img, atol=1e-4)


def test_backend_resolution(monkeypatch):
    assert resolve_backend("numpy") == "numpy"
    with pytest.raises(ValueError):
        resolve_backend("cuda")
