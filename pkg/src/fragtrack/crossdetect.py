"""Crossing detector: a binary classifier trained on sure images.

Labels follow the one-hot convention crossing = class 0, individual = class 1.
Ambiguous blobs are classified by the arg-max of the two softmax outputs, with
ties going to *individual*. When a class of sure images is missing or training
diverges, the area model decides instead.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blobgraph import AMBIGUOUS, SURE_CROSSING, SURE_INDIVIDUAL, AreaModel
from .classifier import (DIVERGED, EPOCH_CAP, ClassifierModel, LabeledDataset, TrainConfig,
                         dcd_train_config, train)
from .imageprep import DCD_SIDE, ImagePreparer, dcd_crop_region

log = logging.getLogger(__name__)

CROSSING = 0
INDIVIDUAL = 1
DEFAULT_MAX_PER_CLASS = 5000


class FallbackRequired(Exception):
    """The detector cannot be trained; use the area model."""


@dataclass
class Detector:
    kind: str  # "dcd" or "area"
    area_model: AreaModel
    model: Optional[ClassifierModel] = None
    region: Optional[int] = None
    outcome: Optional[str] = None
    val_accuracy: Optional[float] = None
    warnings: list = field(default_factory=list)


def build_dcd_dataset(prep: ImagePreparer, sure_individuals, sure_crossings,
                      max_per_class: Optional[int] = DEFAULT_MAX_PER_CLASS, seed=0):
    """Preprocessed 40x40 images of the sure blobs; returns ``(dataset, region)``.

    Blob ids are de-duplicated. ``max_per_class`` bounds memory on long videos
    by a seeded subsample of each class.
    """
    ind = np.unique(np.asarray(sure_individuals, dtype=np.int64))
    cro = np.unique(np.asarray(sure_crossings, dtype=np.int64))
    if len(ind) == 0 or len(cro) == 0:
        raise FallbackRequired("no sure %s images" % ("individual" if len(ind) == 0 else "crossing"))
    region = dcd_crop_region(prep.bbox_sides(cro))
    rng = np.random.default_rng(seed)
    if max_per_class is not None:
        if len(ind) > max_per_class:
            ind = np.sort(rng.choice(ind, max_per_class, replace=False))
        if len(cro) > max_per_class:
            cro = np.sort(rng.choice(cro, max_per_class, replace=False))
    ids = np.concatenate([cro, ind])
    labels = np.concatenate([np.full(len(cro), CROSSING), np.full(len(ind), INDIVIDUAL)])
    images = prep.images(ids, region, DCD_SIDE)
    return LabeledDataset(images, labels, 2), region


def train_crossing_detector(dataset: LabeledDataset, area_model: AreaModel, region: int,
                            config: Optional[TrainConfig] = None, seed=0) -> Detector:
    config = config or dcd_train_config(seed=seed)
    model = ClassifierModel(DCD_SIDE, 2, seed=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = train(model, dataset, config)
    notes = [str(w.message) for w in caught]
    if res.outcome == DIVERGED:
        msg = "crossing detector training diverged; falling back to the area model"
        warnings.warn(msg)
        return Detector("area", area_model, warnings=notes + [msg], outcome=DIVERGED)
    if res.outcome == EPOCH_CAP:
        log.warning("crossing detector stopped at the epoch cap")
    return Detector("dcd", area_model, model, region, res.outcome,
                    res.history.val_accuracy[-1], notes)


def classify_probabilities(probs) -> np.ndarray:
    """True (individual) unless ``s_crossing > s_individual``."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    return ~(probs[:, CROSSING] > probs[:, INDIVIDUAL])


def classify_ambiguous(detector: Detector, prep: ImagePreparer, ambiguous) -> np.ndarray:
    """Per-blob individual flag for ``ambiguous`` blob ids."""
    ambiguous = np.asarray(ambiguous, dtype=np.int64)
    if len(ambiguous) == 0:
        return np.zeros(0, dtype=bool)
    if detector.kind == "area":
        return detector.area_model.is_individual(prep.table.area[ambiguous])
    imgs = prep.images(ambiguous, detector.region, DCD_SIDE)
    return classify_probabilities(detector.model.predict_proba(imgs))


@dataclass
class CrossingDecision:
    is_individual: np.ndarray
    sure: np.ndarray
    detector: Optional[Detector]
    notes: list


def detect_crossings(prep: ImagePreparer, area_model: AreaModel, sure: np.ndarray,
                     config: Optional[TrainConfig] = None, max_per_class=DEFAULT_MAX_PER_CLASS,
                     seed=0) -> CrossingDecision:
    """Final individual/crossing label of every blob.

    Sure labels are kept; only ambiguous blobs go through the detector. If no
    blob is ambiguous the detector is not trained at all.
    """
    is_ind = sure == SURE_INDIVIDUAL
    amb = np.flatnonzero(sure == AMBIGUOUS)
    notes = []
    if len(amb) == 0:
        return CrossingDecision(is_ind, sure, None, notes)
    try:
        ds, region = build_dcd_dataset(prep, np.flatnonzero(sure == SURE_INDIVIDUAL),
                                       np.flatnonzero(sure == SURE_CROSSING), max_per_class, seed)
        if len(ds) < 2:
            raise FallbackRequired("too few sure images")
        det = train_crossing_detector(ds, area_model, region, config, seed)
    except FallbackRequired as exc:
        msg = f"crossing detector not trained ({exc}); using the area model"
        log.warning(msg)
        notes.append(msg)
        det = Detector("area", area_model, warnings=[msg])
    notes += det.warnings
    is_ind = is_ind.copy()
    is_ind[amb] = classify_ambiguous(det, prep, amb)
    return CrossingDecision(is_ind, sure, det, notes)
