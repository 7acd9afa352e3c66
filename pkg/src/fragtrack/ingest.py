"""Frame loading, background modelling and blob segmentation.

Three inputs are understood:

* a directory of binary 8-bit PGM (P5) frames with numeric file names,
* a raw ``FTRK`` file (16-byte little-endian header then packed frames),
* a blob stream (JSON lines, one record per frame) holding blobs that were
  segmented elsewhere, e.g. by :mod:`fragtrack.synthgen`.

Blobs are kept in a columnar :class:`BlobTable` because real runs carry
hundreds of thousands of them; :class:`Blob` is the per-blob view.
"""
from __future__ import annotations

import base64
import gzip
import json
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .kernels import label_components

log = logging.getLogger(__name__)

RAW_MAGIC = b"FTRK"
RAW_HEADER = struct.Struct("<4sIII")
# crops carry this many pixels of context around the blob bounding box, which is
# what a 5x5 dilation of the blob can reach
CROP_MARGIN = 2


class IngestError(Exception):
    """Unreadable, inconsistent or unsupported input."""


@dataclass
class SegmentationParams:
    min_intensity: float = 0.0
    max_intensity: float = 255.0
    min_area: int = 1
    max_area: int = 10**9
    roi: Optional[object] = None  # HxW boolean mask or polygon [(x, y), ...]
    subtract_background: bool = False
    background_sample_stride: int = 1
    normalize: bool = True
    reference_intensity: Optional[float] = None  # defaults to the sequence mean
    resolution_reduction: float = 1.0

    def __post_init__(self):
        if not 0 <= self.min_intensity <= self.max_intensity <= 255:
            raise ValueError("need 0 <= min_intensity <= max_intensity <= 255")
        if not 0 <= self.min_area <= self.max_area:
            raise ValueError("need 0 <= min_area <= max_area")
        if self.background_sample_stride < 1:
            raise ValueError("background_sample_stride must be >= 1")
        if not 0 < self.resolution_reduction <= 1:
            raise ValueError("resolution_reduction must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class Blob:
    """One connected set of acceptable pixels in one frame.

    ``pixels`` is a ``(k, 2)`` array of ``(x, y)``; ``image`` is the grayscale
    crop whose top-left pixel sits at ``image_origin``.
    """

    frame_index: int
    pixels: np.ndarray
    image: np.ndarray
    image_origin: tuple

    @property
    def area(self) -> int:
        return int(len(self.pixels))

    @property
    def centroid(self) -> tuple:
        c = self.pixels.mean(axis=0)
        return float(c[0]), float(c[1])

    @property
    def bounding_box(self) -> tuple:
        """``(x0, y0, x1, y1)`` inclusive."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    def pixel_set(self) -> set:
        return {(int(x), int(y)) for x, y in self.pixels}


@dataclass
class BlobTable:
    """Frame-sorted blobs of a whole video in CSR layout."""

    width: int
    height: int
    n_frames: int
    frame: np.ndarray        # (B,) int64, non-decreasing
    pix_ptr: np.ndarray      # (B+1,) int64
    pix_x: np.ndarray        # (P,) int32
    pix_y: np.ndarray        # (P,) int32
    img_ptr: np.ndarray      # (B+1,) int64
    img_data: np.ndarray     # uint8
    img_origin: np.ndarray   # (B, 2) int64, (x0, y0)
    img_shape: np.ndarray    # (B, 2) int64, (h, w)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.frame) and np.any(np.diff(self.frame) < 0):
            raise IngestError("blobs must be sorted by frame")
        if len(self.frame) and (self.frame[0] < 0 or self.frame[-1] >= self.n_frames):
            raise IngestError("blob frame index outside the sequence")

    def __len__(self):
        return len(self.frame)

    @property
    def frame_ptr(self) -> np.ndarray:
        if "frame_ptr" not in self._cache:
            self._cache["frame_ptr"] = np.searchsorted(
                self.frame, np.arange(self.n_frames + 1)).astype(np.int64)
        return self._cache["frame_ptr"]

    @property
    def area(self) -> np.ndarray:
        return np.diff(self.pix_ptr)

    @property
    def centroid(self) -> np.ndarray:
        if "centroid" not in self._cache:
            n = len(self)
            c = np.zeros((n, 2))
            ok = self.area > 0
            starts = self.pix_ptr[:-1][ok]
            if len(starts):
                c[ok, 0] = np.add.reduceat(self.pix_x.astype(np.float64), starts) / self.area[ok]
                c[ok, 1] = np.add.reduceat(self.pix_y.astype(np.float64), starts) / self.area[ok]
            self._cache["centroid"] = c
        return self._cache["centroid"]

    @property
    def bbox(self) -> np.ndarray:
        """``(B, 4)`` inclusive ``x0, y0, x1, y1``."""
        if "bbox" not in self._cache:
            starts = self.pix_ptr[:-1]
            self._cache["bbox"] = np.stack([
                np.minimum.reduceat(self.pix_x, starts),
                np.minimum.reduceat(self.pix_y, starts),
                np.maximum.reduceat(self.pix_x, starts),
                np.maximum.reduceat(self.pix_y, starts),
            ], axis=1).astype(np.int64) if len(self) else np.zeros((0, 4), np.int64)
        return self._cache["bbox"]

    @property
    def flat_pixels(self) -> np.ndarray:
        return self.pix_y.astype(np.int64) * self.width + self.pix_x

    def counts_per_frame(self) -> np.ndarray:
        return np.diff(self.frame_ptr)

    def pixels_of(self, b: int) -> np.ndarray:
        s = slice(self.pix_ptr[b], self.pix_ptr[b + 1])
        return np.stack([self.pix_x[s], self.pix_y[s]], axis=1)

    def image_of(self, b: int) -> np.ndarray:
        h, w = self.img_shape[b]
        return self.img_data[self.img_ptr[b]:self.img_ptr[b + 1]].reshape(h, w)

    def blob(self, b: int) -> Blob:
        return Blob(int(self.frame[b]), self.pixels_of(b), self.image_of(b),
                    (int(self.img_origin[b, 0]), int(self.img_origin[b, 1])))

    def blobs_in_frame(self, f: int) -> list:
        return [self.blob(b) for b in range(self.frame_ptr[f], self.frame_ptr[f + 1])]

    @classmethod
    def from_blobs(cls, blobs: Iterable[Blob], width: int, height: int, n_frames: int) -> "BlobTable":
        blobs = sorted(blobs, key=lambda b: b.frame_index)  # stable: keeps in-frame order
        n = len(blobs)
        pix_counts = np.array([len(b.pixels) for b in blobs], dtype=np.int64)
        img_sizes = np.array([b.image.size for b in blobs], dtype=np.int64)
        pix = np.concatenate([b.pixels for b in blobs]) if n else np.zeros((0, 2), np.int64)
        return cls(
            width=int(width), height=int(height), n_frames=int(n_frames),
            frame=np.array([b.frame_index for b in blobs], dtype=np.int64),
            pix_ptr=np.concatenate([[0], np.cumsum(pix_counts)]).astype(np.int64),
            pix_x=pix[:, 0].astype(np.int32), pix_y=pix[:, 1].astype(np.int32),
            img_ptr=np.concatenate([[0], np.cumsum(img_sizes)]).astype(np.int64),
            img_data=(np.concatenate([b.image.ravel() for b in blobs]).astype(np.uint8)
                      if n else np.zeros(0, np.uint8)),
            img_origin=np.array([b.image_origin for b in blobs], dtype=np.int64).reshape(n, 2),
            img_shape=np.array([b.image.shape for b in blobs], dtype=np.int64).reshape(n, 2),
        )


class FrameSequence:
    """Random access to the grayscale frames of a video (or to its blobs)."""

    def __init__(self, source: str, frame_count: int, width: int, height: int,
                 reader=None, resolution_reduction: float = 1.0, blobs: Optional[BlobTable] = None):
        if source not in ("pgm_directory", "raw_file", "blob_stream", "array"):
            raise IngestError(f"unsupported source {source!r}")
        self.source = source
        self.frame_count = int(frame_count)
        self.resolution_reduction = float(resolution_reduction)
        self._reader = reader
        self.blobs = blobs
        self._native = (int(width), int(height))
        if resolution_reduction < 1:
            width = max(1, int(round(width * resolution_reduction)))
            height = max(1, int(round(height * resolution_reduction)))
        self.width = int(width)
        self.height = int(height)
        self._mean = None

    @classmethod
    def from_array(cls, frames: np.ndarray, resolution_reduction: float = 1.0) -> "FrameSequence":
        frames = np.asarray(frames)
        if frames.ndim != 3:
            raise IngestError("expected a (frames, height, width) grayscale array")
        if frames.dtype != np.uint8:
            frames = np.clip(np.rint(frames), 0, 255).astype(np.uint8)
        return cls("array", frames.shape[0], frames.shape[2], frames.shape[1],
                   reader=lambda i: frames[i], resolution_reduction=resolution_reduction)

    def __len__(self):
        return self.frame_count

    def frame(self, i: int) -> np.ndarray:
        if self._reader is None:
            raise IngestError("this sequence holds pre-segmented blobs only")
        if not 0 <= i < self.frame_count:
            raise IndexError(i)
        img = np.asarray(self._reader(i))
        if img.shape != (self._native[1], self._native[0]):
            raise IngestError(f"frame {i} has shape {img.shape}, expected "
                              f"{(self._native[1], self._native[0])}")
        if self.resolution_reduction < 1:
            zoom = (self.height / img.shape[0], self.width / img.shape[1])
            img = np.clip(np.rint(ndimage.zoom(img.astype(np.float64), zoom, order=1)), 0, 255)
            img = img[: self.height, : self.width].astype(np.uint8)
        return img

    @property
    def mean_intensity(self) -> float:
        """Mean pixel intensity over the whole sequence."""
        if self._mean is None:
            self._mean = float(np.mean([self.frame(i).mean() for i in range(self.frame_count)]))
        return self._mean


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic in (b"P6", b"P3"):
        raise IngestError(f"{path}: color frames are not supported")
    if magic != b"P5":
        raise IngestError(f"{path}: unsupported image format {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise IngestError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise IngestError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM frames are 2-D")
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_pgm_directory(directory, frames: Sequence[np.ndarray]) -> None:
    os.makedirs(directory, exist_ok=True)
    digits = max(6, len(str(len(frames))))
    for i, fr in enumerate(frames):
        write_pgm(Path(directory) / f"{i:0{digits}d}.pgm", fr)


def write_raw(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.uint8)
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, n, w, h))
        fh.write(np.ascontiguousarray(frames).tobytes())


def _open_text(path, mode="rt"):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode.replace("t", "") if "b" in mode else mode)


def write_blob_stream(path, table: BlobTable) -> None:
    """Write blobs as JSON lines, one record per frame (empty frames included)."""
    fp = table.frame_ptr
    with _open_text(path, "wt") as fh:
        for f in range(table.n_frames):
            rec = {"frame": f, "blobs": []}
            if f == 0:
                rec["width"] = table.width
                rec["height"] = table.height
            for b in range(fp[f], fp[f + 1]):
                s = slice(table.pix_ptr[b], table.pix_ptr[b + 1])
                rec["blobs"].append({
                    "pixels": np.stack([table.pix_x[s], table.pix_y[s]], 1).tolist(),
                    "image": base64.b64encode(table.image_of(b).tobytes()).decode("ascii"),
                    "image_origin": [int(v) for v in table.img_origin[b]],
                    "image_shape": [int(v) for v in table.img_shape[b]],
                })
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def read_blob_stream(path) -> BlobTable:
    blobs = []
    width = height = None
    max_x = max_y = -1
    n_frames = 0
    with _open_text(path, "rt") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                f = int(rec["frame"])
                recs = rec["blobs"]
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestError(f"{path}:{lineno}: malformed blob-stream record ({exc})") from None
            width = rec.get("width", width)
            height = rec.get("height", height)
            n_frames = max(n_frames, f + 1)
            for b in recs:
                pixels = np.asarray(b["pixels"], dtype=np.int64).reshape(-1, 2)
                if len(pixels) == 0:
                    raise IngestError(f"{path}:{lineno}: empty blob")
                raw = base64.b64decode(b.get("image", ""))
                if "image_shape" in b:
                    h, w = b["image_shape"]
                    x0, y0 = b["image_origin"]
                else:
                    x0, y0 = pixels.min(0) - CROP_MARGIN
                    x1, y1 = pixels.max(0) + CROP_MARGIN
                    h, w = y1 - y0 + 1, x1 - x0 + 1
                if len(raw) != h * w:
                    raise IngestError(f"{path}:{lineno}: image size does not match its shape")
                img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
                blobs.append(Blob(f, pixels, img, (int(x0), int(y0))))
                max_x = max(max_x, int(pixels[:, 0].max()))
                max_y = max(max_y, int(pixels[:, 1].max()))
    if width is None:
        width = max_x + 1
    if height is None:
        height = max_y + 1
    return BlobTable.from_blobs(blobs, width, height, n_frames)


def _frame_number(name: str) -> int:
    m = re.search(r"(\d+)", name)
    if m is None:
        raise IngestError(f"frame file {name!r} has no frame number")
    return int(m.group(1))


def load_frame_sequence(path, params: Optional[SegmentationParams] = None) -> FrameSequence:
    """Open a PGM directory, raw ``FTRK`` file or blob stream."""
    params = params or SegmentationParams()
    path = Path(path)
    if path.is_dir():
        files = [p for p in path.iterdir() if p.suffix.lower() == ".pgm"]
        if not files:
            others = [p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".png", ".jpg")]
            if others:
                raise IngestError(f"{path}: unsupported frame format {others[0].suffix}")
            raise IngestError(f"{path}: no PGM frames found")
        files.sort(key=lambda p: _frame_number(p.name))
        first = _read_pgm(files[0])
        h, w = first.shape
        return FrameSequence("pgm_directory", len(files), w, h,
                             reader=lambda i: _read_pgm(files[i]),
                             resolution_reduction=params.resolution_reduction)
    if not path.exists():
        raise IngestError(f"{path}: no such file")
    name = path.name.lower()
    if name.endswith((".jsonl", ".jsonl.gz", ".ndjson")):
        if params.resolution_reduction != 1:
            raise IngestError("resolution reduction does not apply to blob streams")
        table = read_blob_stream(path)
        return FrameSequence("blob_stream", table.n_frames, table.width, table.height, blobs=table)
    with open(path, "rb") as fh:
        head = fh.read(RAW_HEADER.size)
    if len(head) == RAW_HEADER.size and head[:4] == RAW_MAGIC:
        _, n, w, h = RAW_HEADER.unpack(head)
        expected = RAW_HEADER.size + n * w * h
        if path.stat().st_size != expected:
            raise IngestError(f"{path}: raw file size {path.stat().st_size} != expected {expected}")
        mm = np.memmap(path, dtype=np.uint8, mode="r", offset=RAW_HEADER.size, shape=(n, h, w))
        return FrameSequence("raw_file", n, w, h, reader=lambda i: np.asarray(mm[i]),
                             resolution_reduction=params.resolution_reduction)
    raise IngestError(f"{path}: unsupported format")


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def compute_background(seq: FrameSequence, stride: int = 1) -> np.ndarray:
    """Per-pixel mean of frames ``0, stride, 2*stride, ...``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if seq.frame_count == 0:
        raise IngestError("cannot build a background from an empty sequence")
    acc = np.zeros((seq.height, seq.width))
    idx = range(0, seq.frame_count, stride)
    for i in idx:
        acc += seq.frame(i)
    return acc / len(idx)


def polygon_mask(vertices, width: int, height: int) -> np.ndarray:
    """Even-odd rasterisation of a polygon at pixel centres."""
    verts = np.asarray(vertices, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    inside = np.zeros((height, width), dtype=bool)
    x1, y1 = verts[-1]
    for x2, y2 in verts:
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < xint)
        x1, y1 = x2, y2
    return inside


def _roi_mask(roi, width, height):
    if roi is None:
        return None
    arr = np.asarray(roi)
    if arr.dtype == bool and arr.shape == (height, width):
        return arr
    if arr.ndim == 2 and arr.shape[1] == 2:
        return polygon_mask(arr, width, height)
    raise ValueError("roi must be a boolean HxW mask or a list of (x, y) vertices")


def normalize_frame(frame: np.ndarray, reference: float) -> np.ndarray:
    """Rescale a frame so its mean intensity equals ``reference`` (clamped to 0..255)."""
    frame = frame.astype(np.float64)
    m = frame.mean()
    if m <= 0:
        return frame
    return np.clip(frame * (reference / m), 0.0, 255.0)


def _crop(frame: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    """Crop ``[x0, x1] x [y0, y1]`` (inclusive), zero-padding outside the frame."""
    h, w = frame.shape
    out = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=np.uint8)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, w - 1), min(y1, h - 1)
    if sx0 <= sx1 and sy0 <= sy1:
        out[sy0 - y0:sy1 - y0 + 1, sx0 - x0:sx1 - x0 + 1] = frame[sy0:sy1 + 1, sx0:sx1 + 1]
    return out


def segment_frame(seq: FrameSequence, frame_index: int, params: SegmentationParams,
                  background: Optional[np.ndarray] = None, backend=None) -> list:
    """Threshold one frame and return its 4-connected blobs in scan order."""
    if not 0 <= frame_index < seq.frame_count:
        raise IndexError(frame_index)
    raw = seq.frame(frame_index)
    if params.normalize:
        ref = params.reference_intensity
        if ref is None:
            ref = seq.mean_intensity
        frame = normalize_frame(raw, ref)
    else:
        frame = raw.astype(np.float64)
    value = frame
    if params.subtract_background:
        if background is None:
            raise ValueError("background subtraction requested without a background")
        value = np.abs(frame - background)
    accept = (value >= params.min_intensity) & (value <= params.max_intensity)
    roi = _roi_mask(params.roi, seq.width, seq.height)
    if roi is not None:
        accept &= roi
    labels, count = label_components(accept, backend=backend)
    if count == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, count + 2))
    image_src = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    blobs = []
    for k in range(count):
        idx = order[bounds[k]:bounds[k + 1]]
        if not params.min_area <= len(idx) <= params.max_area:
            continue
        ys, xs = np.divmod(idx, seq.width)
        pixels = np.stack([xs, ys], axis=1).astype(np.int64)
        x0, y0 = xs.min() - CROP_MARGIN, ys.min() - CROP_MARGIN
        x1, y1 = xs.max() + CROP_MARGIN, ys.max() + CROP_MARGIN
        blobs.append(Blob(frame_index, pixels, _crop(image_src, x0, y0, x1, y1), (int(x0), int(y0))))
    return blobs


def segment_video(seq: FrameSequence, params: SegmentationParams, backend=None) -> BlobTable:
    """Segment every frame (or pass pre-segmented blobs through)."""
    if seq.blobs is not None:
        return seq.blobs
    background = None
    if params.subtract_background:
        background = compute_background(seq, params.background_sample_stride)
    blobs = []
    for i in range(seq.frame_count):
        blobs.extend(segment_frame(seq, i, params, background, backend=backend))
    log.info("segmented %d blobs in %d frames", len(blobs), seq.frame_count)
    return BlobTable.from_blobs(blobs, seq.width, seq.height, seq.frame_count)
