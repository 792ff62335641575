"""Command line interface.

Verbs: synth, pipeline, train, eval, ablate, plot-roc. Flag values override
config-file values, which override built-in defaults. ``HEADSIM_OUT`` sets
the default output root (``runs/`` otherwise); every run lands in
``<root>/<verb>_<config-hash>`` unless --out is given.
"""

from __future__ import annotations

import argparse
import json
import sys

import yaml

from .config import load_config
from .pipeline import STAGES
from .model import VARIANTS
from .runner import (
    cmd_ablate,
    cmd_eval,
    cmd_pipeline,
    cmd_synth,
    cmd_train,
    default_out_dir,
    plot_roc_curves,
)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML/JSON experiment config file")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--variant", choices=VARIANTS, help="encoder variant override")
    parser.add_argument(
        "--margins",
        help="three comma-separated margins: same-vs-semi,same-vs-diff,semi-vs-diff",
    )
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. --set optimizer.lr=3e-3 (repeatable)",
    )


def _resolve_config(args):
    overrides = {}
    for item in args.sets:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None):
        overrides["encoder.variant"] = args.variant
    if getattr(args, "margins", None):
        parts = [float(x) for x in args.margins.split(",")]
        if len(parts) != 3:
            raise SystemExit("--margins expects three comma-separated values")
        overrides["margins.same_vs_semi"] = parts[0]
        overrides["margins.same_vs_diff"] = parts[1]
        overrides["margins.semi_vs_diff"] = parts[2]
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headsim", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate the synthetic world (images + manifest)")
    _common_flags(p)
    p.add_argument("--frames", action="store_true", help="also emit the video frame world")

    p = sub.add_parser("pipeline", help="dataset-construction pipeline over a frame manifest")
    _common_flags(p)
    p.add_argument("--manifest", required=True, help="frame manifest (jsonl)")
    p.add_argument("--stage", choices=STAGES, default="relations", help="run up to this stage")

    p = sub.add_parser("train", help="train an encoder on a world manifest")
    _common_flags(p)
    p.add_argument("--manifest", required=True, help="world manifest (jsonl)")
    p.add_argument("--face-manifest", help="optional distillation-only sample manifest")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument(
        "--routing-audit",
        action="store_true",
        help="log the ranking-only gradient magnitude on the identity projection",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out identities")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--protocol",
        choices=("identity", "appearance", "both"),
        default="both",
        help="verification pair protocol(s)",
    )
    p.add_argument("--split", help="split.json from training (recomputed from seed if omitted)")

    p = sub.add_parser("ablate", help="train + evaluate all four encoder variants")
    _common_flags(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("plot-roc", help="line plot from roc csv files")
    p.add_argument("--roc", action="append", required=True, help="roc csv (repeatable)")
    p.add_argument("--labels", help="comma-separated curve labels")
    p.add_argument("--out", required=True, help="output png path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.verb == "plot-roc":
        labels = args.labels.split(",") if args.labels else None
        path = plot_roc_curves(args.roc, args.out, labels)
        print(path)
        return 0

    cfg = _resolve_config(args)
    out_dir = default_out_dir(args.verb.replace("-", "_"), cfg, args.out)

    if args.verb == "synth":
        result = cmd_synth(cfg, out_dir, write_frames=args.frames)
    elif args.verb == "pipeline":
        result = cmd_pipeline(cfg, args.manifest, out_dir, stage=args.stage)
    elif args.verb == "train":
        result = cmd_train(
            cfg,
            args.manifest,
            out_dir,
            face_manifest_path=args.face_manifest,
            resume=args.resume,
            routing_audit=args.routing_audit,
        )
        result = {"checkpoint": result["checkpoint"], "log": result["log"], "split": result["split"]}
    elif args.verb == "eval":
        protocols = ("identity", "appearance") if args.protocol == "both" else (args.protocol,)
        result = cmd_eval(
            cfg, args.checkpoint, args.manifest, out_dir, protocols=protocols, split_path=args.split
        )
    elif args.verb == "ablate":
        result = cmd_ablate(cfg, args.manifest, out_dir)
    else:  # pragma: no cover
        raise SystemExit(f"unknown verb {args.verb}")

    print(json.dumps({"out_dir": out_dir, "result_keys": sorted(result)}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
