"""End-to-end tracking: segmentation to trajectories."""
from __future__ import annotations

import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import blobgraph as bg
from .cascade import (Cascade, IdentificationData, NoGlobalFragment, ProtocolOutcome,
                      coexisting_duplicates, identify_fragments)
from .config import cascade_params, crossing_config, load_config, segmentation_params
from .crossdetect import CrossingDecision, detect_crossings
from .imageprep import ImagePreparer, identification_image_side
from .ingest import BlobTable, load_frame_sequence, segment_video
from .postproc import (Trajectories, assemble_trajectories, correct_unrealistic, estimated_accuracy,
                       fit_speed_model, resolve_crossings, write_summary)
from .residual import ResidualResult, one_hot, residual_identify

log = logging.getLogger(__name__)

FATAL = (bg.NoCompleteFrame, NoGlobalFragment)


@dataclass
class TrackingResult:
    table: BlobTable
    n: int
    fragments: bg.Fragments
    globals_: bg.GlobalFragments
    crossing: CrossingDecision
    outcome: ProtocolOutcome
    residual: ResidualResult
    identity: np.ndarray          # final identity per individual fragment
    p2: np.ndarray                # (F, n)
    fixed: np.ndarray
    v_max: float
    trajectories: Trajectories
    estimated_accuracy: float
    core_frame: int
    reidentified: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def blob_identity(self) -> np.ndarray:
        ft = self.fragments.individual
        out = np.zeros(len(self.table), dtype=np.int64)
        out[ft.blobs] = np.repeat(self.identity, ft.size)
        return out

    def blob_accumulated(self) -> np.ndarray:
        ft = self.fragments.individual
        out = np.zeros(len(self.table), dtype=bool)
        out[ft.blobs] = np.repeat(self.outcome.accumulated, ft.size)
        return out

    def summary(self) -> dict:
        return {"estimated_accuracy": self.estimated_accuracy,
                "protocol_used": self.outcome.status,
                "coverage": self.outcome.coverage,
                "v_max": self.v_max,
                "warnings": self.warnings}


def _unique(seq):
    out = []
    for s in seq:
        if s not in out:
            out.append(s)
    return out


def track(table: BlobTable, cfg: dict, backend=None) -> TrackingResult:
    """Run every stage after segmentation on ``table``."""
    n = int(cfg["n_individuals"])
    seed = int(cfg["seed"])
    timings = {}
    notes = []
    t = time.perf_counter()
    area = bg.fit_area_model(table, n)
    graph = bg.build_overlap_graph(table, backend=backend)
    sure = bg.mark_sure_images(table, area, graph)
    prep = ImagePreparer(table, backend=backend)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        decision = detect_crossings(prep, area, sure, crossing_config(cfg, seed),
                                    cfg["crossing_detector"]["max_per_class"], seed)
    notes += decision.notes + [str(w.message) for w in caught]
    timings["crossings"] = time.perf_counter() - t

    t = time.perf_counter()
    frags = bg.build_fragments(table, graph, decision.is_individual)
    globals_ = bg.build_global_fragments(table, frags, n)
    if len(globals_) == 0:
        raise NoGlobalFragment("no frame shows all %d individuals separated" % n)
    ft = frags.individual
    side = identification_image_side(prep.bbox_sides(np.flatnonzero(decision.is_individual)))
    images = prep.images(ft.blobs, side, side)
    data = IdentificationData(images, ft.ptr, ft.start, ft.end, bg.fragment_distances(table, ft),
                              globals_, n)
    timings["fragmentation"] = time.perf_counter() - t

    t = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        outcome = Cascade(data, cascade_params(cfg)).run()
    notes += outcome.warnings + [str(w.message) for w in caught]
    if coexisting_duplicates(outcome.identity, data.coexist):
        raise AssertionError("cascade produced duplicated identities")
    timings["cascade"] = time.perf_counter() - t

    t = time.perf_counter()
    p1 = np.zeros((len(ft), n))
    todo = np.flatnonzero(~outcome.accumulated)
    dists = identify_fragments(outcome.model, data, todo)
    for f, d in dists.items():
        p1[f] = d.p1
    for f in np.flatnonzero(outcome.accumulated):
        p1[f] = one_hot(outcome.identity[f], n)
    res = residual_identify(p1, outcome.identity, data.coexist)
    timings["residual"] = time.perf_counter() - t

    t = time.perf_counter()
    speed = fit_speed_model(table, ft)
    pp = cfg["postprocessing"]
    mx = res.p2.max(axis=1) if len(ft) else np.zeros(0)
    fixed = outcome.accumulated | (res.assigned & (mx >= pp["immutable_p2"]))
    core = int(globals_.core[outcome.first_global])
    corr = correct_unrealistic(res.identity, res.p2, fixed, ft, table, data.coexist, speed, core, n)
    identity = corr.identity
    if coexisting_duplicates(identity, data.coexist):
        raise AssertionError("post-processing produced duplicated identities")
    blob_id = np.zeros(len(table), dtype=np.int64)
    blob_id[ft.blobs] = np.repeat(identity, ft.size)
    crossings = resolve_crossings(table, decision.is_individual, blob_id, speed, pp["erosion_passes"])
    traj = assemble_trajectories(table, blob_id, decision.is_individual, n, crossings, graph)
    est = estimated_accuracy(ft.size, identity, res.p2)
    timings["postprocessing"] = time.perf_counter() - t
    log.info("tracking done: %s, coverage %.4f, estimated accuracy %.4f",
             outcome.status, outcome.coverage, est)
    return TrackingResult(table, n, frags, globals_, decision, outcome, res, identity, res.p2, fixed,
                          speed.v_max, traj, est, core, corr.reidentified, timings, _unique(notes))


def write_outputs(result: TrackingResult, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    result.trajectories.write_csv(out_dir)
    with open(os.path.join(out_dir, "cascade_log.jsonl"), "w") as fh:
        for rec in result.outcome.log:
            fh.write(json.dumps(rec, sort_keys=True, default=float) + "\n")
    np.savez_compressed(os.path.join(out_dir, "identities.npz"),
                        blob_identity=result.blob_identity(),
                        blob_accumulated=result.blob_accumulated(),
                        blob_frame=result.table.frame,
                        n_frames=np.int64(result.table.n_frames),
                        core_frame=np.int64(result.core_frame))
    extra = {"attempt_coverages": result.outcome.attempt_coverages,
             "protocols_run": result.outcome.protocols_run,
             "n_individuals": result.n,
             "core_frame": result.core_frame,
             "fragments": {"individual": len(result.fragments.individual),
                           "crossing": len(result.fragments.crossing),
                           "global": len(result.globals_)},
             "reidentified": len(result.reidentified)}
    return write_summary(os.path.join(out_dir, "summary.json"), result.estimated_accuracy,
                         result.outcome.status, result.outcome.coverage, result.v_max,
                         result.warnings, extra)


def run_pipeline(config, input_path: Optional[str] = None, out_dir: Optional[str] = None,
                 seed: Optional[int] = None, backend=None) -> TrackingResult:
    cfg = load_config(config) if not isinstance(config, dict) or "segmentation" not in config else config
    if seed is not None:
        cfg["seed"] = int(seed)
    backend = backend or cfg.get("backend")
    src = input_path or cfg.get("input")
    if src is None:
        raise ValueError("no input given")
    seq = load_frame_sequence(src, segmentation_params(cfg))
    t = time.perf_counter()
    table = segment_video(seq, segmentation_params(cfg), backend=backend)
    t_seg = time.perf_counter() - t
    result = track(table, cfg, backend=backend)
    result.timings["segmentation"] = t_seg
    out = out_dir or cfg.get("output")
    if out:
        write_outputs(result, out)
    return result
