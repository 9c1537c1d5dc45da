"""``weevilwatch`` command line.

Every subcommand takes ``--config`` (YAML) plus any number of
``--override key=value`` edits and runs the matching pipeline stages.
Exit status: 0 success, 2 invalid configuration, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cqcc import export_features_csv, features_to_image, save_features, write_image, cqcc_features
from .errors import ConfigError, WeevilError
from .ingest import RecordListener, jsonl_sink, load_registry, read_wav
from .pipeline import configure_logging, run_pipeline, validate_config

log = logging.getLogger("weevilwatch")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

_SUBCOMMAND_STAGES = {
    "features": ("ingest", "features"),
    "train": ("ingest", "features", "train"),
    "classify": ("ingest", "features", "train", "classify"),
    "eval-detections": ("detections",),
    "map": ("ingest", "features", "train", "classify", "detections", "map"),
    "run-all": ("ingest", "features", "train", "classify", "detections", "map"),
}

_HELP = {
    "features": "compute CQCC features for one WAV file or for the configured audio",
    "train": "train and evaluate the baseline classifier on the labelled manifest",
    "classify": "classify sensor recordings with a trained or freshly trained model",
    "eval-detections": "NMS, rescale and evaluate detections against ground truth",
    "map": "match sensors to detected palms and write the RPW map",
    "ingest-listen": "accept newline-delimited sensor records over TCP",
    "run-all": "run every stage and write the run manifest",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config field, e.g. fusion.radius_m=8 (repeatable)")

    parser = argparse.ArgumentParser(prog="weevilwatch", description="Red palm weevil detection and mapping toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("features", "train", "classify", "eval-detections", "map", "ingest-listen", "run-all"):
        p = sub.add_parser(name, parents=[common], help=_HELP[name], description=_HELP[name])
        if name == "features":
            p.add_argument("--input", type=Path, help="single WAV file to featurize")
            p.add_argument("--output", type=Path, help="feature file for --input")
            p.add_argument("--csv", type=Path, help="also write a CSV export")
            p.add_argument("--image", type=Path, help="also write a grey image (.png or .pgm)")
            p.add_argument("--image-size", type=int, nargs=2, default=(299, 299), metavar=("W", "H"))
        if name == "ingest-listen":
            p.add_argument("--host")
            p.add_argument("--port", type=int)
            p.add_argument("--output", type=Path, help="JSONL file receiving accepted records")
    return parser


def _single_clip_features(args, cfg) -> int:
    F = cqcc_features(read_wav(args.input), cfg.cqcc)
    output = args.output or args.input.with_suffix(".cqcc")
    save_features(F, output)
    if args.csv:
        export_features_csv(F, args.csv)
    if args.image:
        write_image(features_to_image(F, *args.image_size), args.image)
    print(f"{args.input}: {F.shape[0]} frames x {F.shape[1]} coefficients -> {output}")
    return EXIT_OK


def _listen(args, cfg) -> int:
    icfg = cfg["ingest"]
    host = args.host or icfg["host"]
    port = args.port if args.port is not None else icfg["port"]
    output = args.output or (cfg.output_dir / icfg["output"])
    known = None
    if cfg.path("registry"):
        known = set(load_registry(cfg.path("registry")).entries)
    with RecordListener((host, port), jsonl_sink(output), known) as server:
        print(f"listening on {server.server_address[0]}:{server.server_address[1]} -> {output}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = validate_config(args.config, args.override)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "features" and args.input is not None:
            return _single_clip_features(args, cfg)
        if args.command == "ingest-listen":
            return _listen(args, cfg)
    except WeevilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE

    manifest = run_pipeline(cfg, _SUBCOMMAND_STAGES[args.command])
    for s in manifest.stages:
        print(f"{s.name:<11} {s.status:<8} {s.message}")
    if manifest.metrics:
        print(json.dumps(manifest.metrics, indent=1, sort_keys=True))
    return EXIT_OK if manifest.ok else EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
