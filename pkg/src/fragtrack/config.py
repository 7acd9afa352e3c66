"""Run configuration: one JSON document, validated against a JSON schema."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields

import jsonschema

from .cascade import CascadeParams
from .classifier import TrainConfig, dcd_train_config, identification_train_config
from .crossdetect import DEFAULT_MAX_PER_CLASS
from .ingest import SegmentationParams
from .postproc import EROSION_PASSES, IMMUTABLE_P2
from .synthgen import SynthConfig


class ConfigError(ValueError):
    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


_num = {"type": "number"}
_int = {"type": "integer"}
_prob = {"type": "number", "minimum": 0, "maximum": 1}

_train = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "learning_rate": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["sgd", "adam"]},
        "augment_rotation": {"type": "boolean"},
    },
}

SCHEMA = {
    "type": "object",
    "required": ["n_individuals"],
    "additionalProperties": False,
    "properties": {
        "n_individuals": {"type": "integer", "minimum": 2},
        "input": {"type": "string"},
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "backend": {"enum": ["numba", "numpy"]},
        "segmentation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "min_intensity": {"type": "number", "minimum": 0, "maximum": 255},
                "max_intensity": {"type": "number", "minimum": 0, "maximum": 255},
                "min_area": {"type": "integer", "minimum": 0},
                "max_area": {"type": "integer", "minimum": 0},
                "roi": {"type": ["array", "null"]},
                "subtract_background": {"type": "boolean"},
                "background_sample_stride": {"type": "integer", "minimum": 1},
                "normalize": {"type": "boolean"},
                "reference_intensity": {"type": ["number", "null"]},
                "resolution_reduction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "identification_training": _train,
        "crossing_detector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {**_train["properties"],
                           "max_per_class": {"type": ["integer", "null"], "minimum": 1}},
        },
        "cascade": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "certainty_threshold": _num,
                "protocol1_success": _prob,
                "protocol2_success": _prob,
                "accumulation_stop": _prob,
                "partial_trigger": _prob,
                "max_images_per_identity": {"type": "integer", "minimum": 1},
                "old_images_per_identity": {"type": "integer", "minimum": 0},
                "pretrain_coverage": _prob,
                "parachute_attempts": {"type": "integer", "minimum": 1},
                "max_accumulation_iterations": {"type": "integer", "minimum": 1},
            },
        },
        "postprocessing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "immutable_p2": _prob,
                "erosion_passes": {"type": "integer", "minimum": 1},
            },
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: {} for f in fields(SynthConfig)},
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "segmentation": {k: v for k, v in asdict(SegmentationParams()).items()},
    "identification_training": {"learning_rate": 0.005, "batch_size": 500, "max_epochs": 10000,
                                "optimizer": "sgd", "augment_rotation": True},
    "crossing_detector": {"learning_rate": 0.005, "batch_size": 100, "max_epochs": 100,
                          "optimizer": "adam", "augment_rotation": True,
                          "max_per_class": DEFAULT_MAX_PER_CLASS},
    "cascade": {k: v for k, v in asdict(CascadeParams()).items() if k not in ("seed", "train")},
    "postprocessing": {"immutable_p2": IMMUTABLE_P2, "erosion_passes": EROSION_PASSES},
}


def _path(err) -> str:
    p = "/".join(str(x) for x in err.absolute_path)
    return p or "<root>"


def validate(doc: dict) -> None:
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([f"{_path(e)}: {e.message}" for e in errors])


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path_or_doc) -> dict:
    """Validated config with every default filled in."""
    if isinstance(path_or_doc, dict):
        doc = path_or_doc
    else:
        with open(path_or_doc) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"<root>: invalid JSON ({exc})"])
    validate(doc)
    cfg = _merge(DEFAULTS, doc)
    seg = cfg["segmentation"]
    try:
        SegmentationParams(**seg)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"segmentation: {exc}"])
    return cfg


def segmentation_params(cfg) -> SegmentationParams:
    return SegmentationParams(**cfg["segmentation"])


def identification_config(cfg, seed=0) -> TrainConfig:
    return identification_train_config(seed=seed, **cfg["identification_training"])


def crossing_config(cfg, seed=0) -> TrainConfig:
    d = {k: v for k, v in cfg["crossing_detector"].items() if k != "max_per_class"}
    return dcd_train_config(seed=seed, **d)


def cascade_params(cfg) -> CascadeParams:
    return CascadeParams(seed=cfg["seed"], train=identification_config(cfg), **cfg["cascade"])


def synth_config(cfg) -> SynthConfig:
    d = dict(cfg.get("synth", {}))
    d.setdefault("n_individuals", cfg["n_individuals"])
    d.setdefault("seed", cfg["seed"])
    if "template_grid" in d:
        d["template_grid"] = tuple(d["template_grid"])
    return SynthConfig(**d)
