"""Blob images for the two classifiers: masked, axis-aligned, standardised squares."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ingest import Blob, BlobTable, CROP_MARGIN
from .kernels import mask_crops, rotate_crop

DCD_SIDE = 40
TARGET_AXIS_ANGLE = math.pi / 4
DILATION_RADIUS = 2  # 5x5 square


@dataclass
class NormalizedImage:
    side: int
    values: np.ndarray
    blob_id: Optional[int]
    applied_rotation: float


def extract_masked_image(frame: np.ndarray, blob: Blob):
    """Crop the blob bounding box (+2 px) from ``frame`` and zero pixels outside its 5x5 dilation.

    Returns ``(image, origin)``; the crop is zero-padded where it leaves the frame.
    """
    frame = np.asarray(frame)
    x0, y0, x1, y1 = blob.bounding_box
    x0 -= CROP_MARGIN
    y0 -= CROP_MARGIN
    x1 += CROP_MARGIN
    y1 += CROP_MARGIN
    h, w = frame.shape
    crop = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=frame.dtype)
    sx0, sy0, sx1, sy1 = max(x0, 0), max(y0, 0), min(x1, w - 1), min(y1, h - 1)
    if sx0 <= sx1 and sy0 <= sy1:
        crop[sy0 - y0:sy1 - y0 + 1, sx0 - x0:sx1 - x0 + 1] = frame[sy0:sy1 + 1, sx0:sx1 + 1]
    keep = np.zeros(crop.shape, dtype=bool)
    px = blob.pixels[:, 0] - x0
    py = blob.pixels[:, 1] - y0
    r = DILATION_RADIUS
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            keep[py + dy, px + dx] = True
    return np.where(keep, crop, 0), (x0, y0)


def _scaled_moments(pix_x, pix_y, pix_ptr):
    """Per-blob integer second moments scaled by n^2 (exact for realistic sizes)."""
    starts = pix_ptr[:-1]
    n = np.diff(pix_ptr).astype(np.int64)
    x = pix_x.astype(np.int64)
    y = pix_y.astype(np.int64)
    sx = np.add.reduceat(x, starts)
    sy = np.add.reduceat(y, starts)
    sxx = n * np.add.reduceat(x * x, starts) - sx * sx
    syy = n * np.add.reduceat(y * y, starts) - sy * sy
    sxy = n * np.add.reduceat(x * y, starts) - sx * sy
    return sxx, syy, sxy


def principal_angles(pix_x, pix_y, pix_ptr) -> np.ndarray:
    """Angle in (-pi/2, pi/2] of each blob's first principal axis, NaN on an eigenvalue tie."""
    pix_ptr = np.asarray(pix_ptr, dtype=np.int64)
    if len(pix_ptr) < 2:
        return np.zeros(0)
    sxx, syy, sxy = _scaled_moments(np.asarray(pix_x), np.asarray(pix_y), pix_ptr)
    tie = (sxx == syy) & (sxy == 0)
    phi = 0.5 * np.arctan2(2.0 * sxy, (sxx - syy).astype(np.float64))
    phi = np.where(phi <= -math.pi / 2, phi + math.pi, phi)
    phi[tie] = np.nan
    return phi


def rotation_for(phi) -> np.ndarray:
    """Rotation that brings axis angle ``phi`` to pi/4; ties rotate by 0."""
    phi = np.asarray(phi, dtype=np.float64)
    return np.where(np.isnan(phi), 0.0, TARGET_AXIS_ANGLE - phi)


def orient_and_crop(image: np.ndarray, origin, blob_pixels, target_side: int,
                    region: Optional[float] = None, blob_id=None) -> NormalizedImage:
    """Rotate ``image`` about the blob centroid so its principal axis lies at pi/4.

    A square of ``region`` pixels (default ``target_side``) centred on the centroid
    is resampled bilinearly onto ``target_side`` x ``target_side``.
    """
    pix = np.asarray(blob_pixels, dtype=np.int64).reshape(-1, 2)
    if len(pix) < 1:
        raise ValueError("blob has no pixels")
    image = np.asarray(image)
    ptr = np.array([0, len(pix)], dtype=np.int64)
    angle = rotation_for(principal_angles(pix[:, 0], pix[:, 1], ptr))
    region = float(target_side if region is None else region)
    out = rotate_crop(image.astype(np.uint8).ravel(), np.array([0, image.size]),
                      np.array([origin], dtype=np.int64), np.array([image.shape], dtype=np.int64),
                      pix.mean(axis=0, dtype=np.float64)[None, :], angle, region, int(target_side))
    return NormalizedImage(int(target_side), out[0], blob_id, float(angle[0]))


def standardize(image):
    """``(I - mean) / std`` with population std; a constant image maps to zeros."""
    values = image.values if isinstance(image, NormalizedImage) else image
    v = np.asarray(values, dtype=np.float64)
    mu = v.mean()
    sd = v.std()
    if not np.isfinite(sd) or sd == 0:
        out = np.zeros_like(v)
    else:
        out = (v - mu) / sd
    if isinstance(image, NormalizedImage):
        return NormalizedImage(image.side, out, image.blob_id, image.applied_rotation)
    return out


def standardize_batch(images: np.ndarray) -> np.ndarray:
    """Row-wise standardisation of a ``(k, h, w)`` stack, in float32."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    ok = sd[:, 0] > 0
    out = np.zeros_like(flat)
    out[ok] = (flat[ok] - mu[ok]) / sd[ok]
    return out.reshape(images.shape).astype(np.float32)


def _bbox_sides(table: BlobTable, ids) -> np.ndarray:
    bb = table.bbox[np.asarray(ids, dtype=np.int64)]
    return np.stack([bb[:, 2] - bb[:, 0] + 1, bb[:, 3] - bb[:, 1] + 1], axis=1).astype(np.float64)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def identification_image_side(sides) -> int:
    """Identification image side: median bounding-box diagonal / sqrt(2), rounded.

    ``sides`` is an ``(k, 2)`` array of bounding-box ``(width, height)``.
    """
    sides = np.asarray(sides, dtype=np.float64).reshape(-1, 2)
    if len(sides) == 0:
        raise ValueError("no individual blobs to estimate the body length from")
    diag = np.median(np.hypot(sides[:, 0], sides[:, 1]))
    return max(1, _round_half_up(diag / math.sqrt(2)))


def dcd_crop_region(sides) -> int:
    """Side of the square cropped around sure crossings before resizing."""
    sides = np.asarray(sides, dtype=np.float64).reshape(-1, 2)
    if len(sides) == 0:
        raise ValueError("no sure crossings")
    return int(sides.max())


def dcd_image_side(sides) -> int:
    dcd_crop_region(sides)  # validates input
    return DCD_SIDE


class ImagePreparer:
    """Batch preprocessing of blobs of a :class:`BlobTable`.

    Crops are masked once; :meth:`images` then rotates, resamples and
    standardises any subset of blobs.
    """

    def __init__(self, table: BlobTable, backend=None):
        self.table = table
        self.backend = backend
        self.masked = mask_crops(table.img_data, table.img_ptr, table.img_origin, table.img_shape,
                                 table.pix_ptr, table.pix_x, table.pix_y, DILATION_RADIUS,
                                 backend=backend)
        self.angles = rotation_for(principal_angles(table.pix_x, table.pix_y, table.pix_ptr))

    def bbox_sides(self, ids) -> np.ndarray:
        return _bbox_sides(self.table, ids)

    def images(self, ids, region: float, side: int, chunk: int = 20000) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        t = self.table
        out = np.empty((len(ids), side, side), dtype=np.float32)
        for s in range(0, len(ids), chunk):
            sub = ids[s:s + chunk]
            starts = np.append(t.img_ptr[sub], 0)  # kernels read only the start offsets
            raw = rotate_crop(self.masked, starts, t.img_origin[sub], t.img_shape[sub],
                              t.centroid[sub], self.angles[sub], region, side, backend=self.backend)
            out[s:s + chunk] = standardize_batch(raw)
        return out


def rotate180(images: np.ndarray) -> np.ndarray:
    """180-degree copies of a ``(k, h, w)`` stack."""
    return np.ascontiguousarray(images[:, ::-1, ::-1])


def dump_pgm(path, image) -> None:
    """Write a (standardised) image as 8-bit PGM, min-max scaled."""
    from .ingest import write_pgm
    v = np.asarray(image.values if isinstance(image, NormalizedImage) else image, dtype=np.float64)
    lo, hi = v.min(), v.max()
    write_pgm(path, np.zeros_like(v) if hi == lo else (v - lo) * 255.0 / (hi - lo))
