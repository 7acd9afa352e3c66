"""Command line entry point: ``fragtrack {track,synth,report,validate}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2


def _setup_logging():
    level = os.environ.get("FRAGTRACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _set_threads(n):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_cfg(path):
    from .config import ConfigError, load_config
    try:
        return load_config(path)
    except ConfigError as exc:
        for m in exc.messages:
            print(f"config error: {m}", file=sys.stderr)
        return None
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None


def cmd_validate(args) -> int:
    cfg = _load_cfg(args.config)
    if cfg is None:
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _load_cfg(args.config)
    if cfg is None:
        return EXIT_CONFIG
    from .blobgraph import NoCompleteFrame
    from .cascade import IdentificationDiverged, NoGlobalFragment
    from .ingest import IngestError
    from .pipeline import run_pipeline
    if args.seed is not None:
        cfg["seed"] = args.seed
    src = args.input or cfg.get("input")
    if src and args.config and not os.path.isabs(src) and not os.path.exists(src):
        src = os.path.join(os.path.dirname(os.path.abspath(args.config)), src)
    out = args.out or cfg.get("output") or "fragtrack_out"
    try:
        res = run_pipeline(cfg, src, out, backend=args.backend)
    except (NoCompleteFrame, NoGlobalFragment, IdentificationDiverged, IngestError) as exc:
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    s = res.summary()
    print(f"protocol: {s['protocol_used']}  coverage: {s['coverage']:.4f}  "
          f"estimated accuracy: {s['estimated_accuracy']:.4f}  -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .ingest import write_blob_stream, write_pgm_directory
    from .synthgen import InfeasibleConfig, SynthConfig, config_dict, generate_synthetic_video
    base = {}
    if args.config:
        cfg = _load_cfg(args.config)
        if cfg is None:
            return EXIT_CONFIG
        from .config import synth_config
        base = config_dict(synth_config(cfg))
    over = {"n_individuals": args.n, "total_frames": args.frames, "gamma_theta": args.theta,
            "gamma_k": args.k, "seed": args.seed, "snr": args.snr, "drift": args.drift,
            "first_fragment_cap": args.first_fragment_cap}
    if args.no_crossings:
        over["crossings"] = False
    base.update({k: v for k, v in over.items() if v is not None})
    if "template_grid" in base:
        base["template_grid"] = tuple(base["template_grid"])
    try:
        sc = SynthConfig(**base)
        video = generate_synthetic_video(sc)
    except (InfeasibleConfig, ValueError) as exc:
        print(f"infeasible synthetic config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    if args.format == "pgm":
        write_pgm_directory(os.path.join(args.out, "frames"), video.render_frames())
        inp = "frames"
    else:
        write_blob_stream(os.path.join(args.out, "blobs.jsonl.gz"), video.blobs)
        inp = "blobs.jsonl.gz"
    video.truth.save(os.path.join(args.out, "ground_truth.json"))
    with open(os.path.join(args.out, "synth_config.json"), "w") as fh:
        json.dump(config_dict(sc), fh, indent=2)
    run = {"n_individuals": sc.n_individuals, "input": inp, "seed": sc.seed}
    if args.format == "pgm":
        run["segmentation"] = {"min_intensity": 0, "max_intensity": (sc.background + sc.body_intensity) // 2 + 40,
                               "normalize": False}
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump(run, fh, indent=2)
    print(f"{sc.total_frames} frames, {len(video.blobs)} blobs -> {args.out}")
    return EXIT_OK


class _Frames:
    """Minimal frame index for validation when only identities.npz is at hand."""

    def __init__(self, frame, n_frames):
        import numpy as np
        self.frame = frame
        self.n_frames = int(n_frames)
        self.frame_ptr = np.searchsorted(frame, np.arange(self.n_frames + 1))


def emit_report(run_dir, ground_truth=None, stream=sys.stdout) -> dict:
    """Print the run summary, the cascade iterations and, with ground truth, the accuracy indices."""
    import numpy as np
    path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{run_dir}: summary.json missing")
    with open(path) as fh:
        summary = json.load(fh)
    w = stream.write
    if summary["protocol_used"] == "degraded":
        w("!" * 72 + "\n")
        w("WARNING: degraded run; accumulation attempt coverages: "
          + ", ".join(f"{c:.4f}" for c in summary.get("attempt_coverages", [])) + "\n")
        w("!" * 72 + "\n")
    w(f"protocol used       {summary['protocol_used']}\n")
    w(f"coverage            {summary['coverage']:.4f}\n")
    w(f"estimated accuracy  {summary['estimated_accuracy']:.4f}\n")
    w(f"v_max               {summary['v_max']:.3f} px/frame\n")
    logp = os.path.join(run_dir, "cascade_log.jsonl")
    if os.path.exists(logp):
        w("\nprotocol    attempt  iter  images      coverage  epochs  val_acc\n")
        with open(logp) as fh:
            for line in fh:
                r = json.loads(line)
                if r.get("stage") == "assessment":
                    continue
                imgs = r.get("images_accumulated", r.get("images_used", 0))
                w(f"{r['protocol']:<11} {r.get('attempt', 0):>7}  {r['iteration']:>4}  {imgs:>10}  "
                  f"{r['coverage']:>8.4f}  {r.get('train_epochs', 0):>6}  {r.get('val_accuracy', 0):.4f}"
                  + ("  (pretraining)" if r.get("stage") == "pretraining" else "") + "\n")
    for msg in summary.get("warnings", []):
        w(f"warning: {msg}\n")
    if ground_truth:
        from .synthgen import GroundTruth, validation_metrics
        gt = GroundTruth.load(ground_truth)
        ids = np.load(os.path.join(run_dir, "identities.npz"))
        frames = _Frames(ids["blob_frame"], int(ids["n_frames"]))
        m = validation_metrics(ids["blob_identity"], gt, frames, int(ids["core_frame"]),
                               blob_accumulated=ids["blob_accumulated"])
        w("\nvalidation against ground truth\n")
        w(f"images                 {m['images']}\n")
        w(f"accuracy (cascade)     {m['accuracy_cascade']:.4%}\n")
        w(f"accuracy               {m['accuracy']:.4%}\n")
        w(f"non-identified         {m['non_identified']:.4%}\n")
        w(f"misidentified          {m['misidentified']:.4%}\n")
        summary["validation"] = m
    return summary


def cmd_report(args) -> int:
    try:
        emit_report(args.run, args.ground_truth)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fragtrack", description="Tracking by identification of animals in video.")
    p.add_argument("--threads", type=int, default=None, help="BLAS/numba thread count")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="track a video or blob stream")
    t.add_argument("--config", required=True)
    t.add_argument("--input")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--backend", choices=["numba", "numpy"])
    t.set_defaults(func=cmd_track)

    s = sub.add_parser("synth", help="generate a synthetic video with ground truth")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--k", type=float)
    s.add_argument("--snr", type=float)
    s.add_argument("--drift", type=float)
    s.add_argument("--first-fragment-cap", type=int, dest="first_fragment_cap")
    s.add_argument("--no-crossings", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--format", choices=["blobs", "pgm"], default="blobs")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="summarise a finished run")
    r.add_argument("--run", "--out", dest="run", required=True)
    r.add_argument("--ground-truth")
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("validate", help="check a configuration file")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    _setup_logging()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
