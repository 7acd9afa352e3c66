import warnings

import numpy as np
import pytest

from fragtrack.blobgraph import (AMBIGUOUS, SURE_CROSSING, SURE_INDIVIDUAL, AreaModel, build_overlap_graph,
                                 fit_area_model, mark_sure_images)
from fragtrack.classifier import ClassifierModel, class_weights, dcd_train_config
from fragtrack.crossdetect import (CROSSING, INDIVIDUAL, Detector, FallbackRequired, build_dcd_dataset,
                                   classify_ambiguous, classify_probabilities, detect_crossings,
                                   train_crossing_detector)
from fragtrack.imageprep import DCD_SIDE, ImagePreparer
from fragtrack.synthgen import SynthConfig, generate_synthetic_video


@pytest.fixture(scope="module")
def prepared():
    video = generate_synthetic_video(SynthConfig(n_individuals=6, total_frames=1200, gamma_theta=60, seed=2))
    t = video.blobs
    am = fit_area_model(t, 6)
    sure = mark_sure_images(t, am, build_overlap_graph(t))
    return t, am, sure, ImagePreparer(t)


def test_dataset_weights_550(prepared):
    t, am, sure, prep = prepared
    ind = np.flatnonzero(sure == SURE_INDIVIDUAL)[:500]
    cro = np.flatnonzero(sure == SURE_CROSSING)[:50]
    assert len(cro) == 50
    ds, region = build_dcd_dataset(prep, ind, cro)
    assert len(ds) == 550 and ds.images.shape[1:] == (DCD_SIDE, DCD_SIDE)
    np.testing.assert_allclose(class_weights(ds.counts), [500 / 550, 50 / 550])
    assert ds.labels[0] == CROSSING and ds.labels[-1] == INDIVIDUAL


def test_dataset_dedup_and_fallback(prepared):
    t, am, sure, prep = prepared
    ind = np.flatnonzero(sure == SURE_INDIVIDUAL)[:5]
    cro = np.flatnonzero(sure == SURE_CROSSING)[:3]
    ds, _ = build_dcd_dataset(prep, np.concatenate([ind, ind]), cro)
    assert len(ds) == 8
    with pytest.raises(FallbackRequired):
        build_dcd_dataset(prep, ind, [])
    capped, _ = build_dcd_dataset(prep, np.flatnonzero(sure == SURE_INDIVIDUAL), cro, max_per_class=20)
    assert list(capped.counts) == [3, 20]


def test_probability_rule():
    assert list(classify_probabilities([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])) == [False, True, True]


def test_area_fallback_classification(prepared):
    t, am, sure, prep = prepared
    det = Detector("area", AreaModel(float(t.area[0]), 1.0))
    assert classify_ambiguous(det, prep, [0])[0]
    assert len(classify_ambiguous(det, prep, [])) == 0


def test_detector_separates_shapes(prepared):
    t, am, sure, prep = prepared
    ds, region = build_dcd_dataset(prep, np.flatnonzero(sure == SURE_INDIVIDUAL),
                                   np.flatnonzero(sure == SURE_CROSSING), max_per_class=600)
    det = train_crossing_detector(ds, am, region)
    assert det.kind == "dcd"
    assert det.val_accuracy >= 0.99
    # sure images keep their labels through the full decision
    dec = detect_crossings(prep, am, sure)
    assert (dec.is_individual[sure == SURE_INDIVIDUAL]).all()
    assert not (dec.is_individual[sure == SURE_CROSSING]).any()
    assert dec.is_individual.dtype == bool and len(dec.is_individual) == len(t)


def test_divergence_falls_back(prepared):
    t, am, sure, prep = prepared
    ds, region = build_dcd_dataset(prep, np.flatnonzero(sure == SURE_INDIVIDUAL)[:30],
                                   np.flatnonzero(sure == SURE_CROSSING)[:30])
    ds.images[0, 0, 0] = np.nan
    with pytest.warns(UserWarning, match="diverged"):
        det = train_crossing_detector(ds, am, region)
    assert det.kind == "area"


def test_epoch_cap_still_returns_detector(prepared):
    t, am, sure, prep = prepared
    ds, region = build_dcd_dataset(prep, np.flatnonzero(sure == SURE_INDIVIDUAL)[:30],
                                   np.flatnonzero(sure == SURE_CROSSING)[:30])
    det = train_crossing_detector(ds, am, region, dcd_train_config(max_epochs=2))
    assert det.kind == "dcd" and det.outcome == "epoch_cap"
    assert any("cap" in w for w in det.warnings)


def test_no_sure_crossings_uses_area_model(prepared):
    t, am, sure, prep = prepared
    s = sure.copy()
    s[s == SURE_CROSSING] = AMBIGUOUS
    dec = detect_crossings(prep, am, s)
    assert dec.detector.kind == "area"
    amb = np.flatnonzero(s == AMBIGUOUS)
    assert np.array_equal(dec.is_individual[amb], am.is_individual(t.area[amb]))
    assert dec.notes
