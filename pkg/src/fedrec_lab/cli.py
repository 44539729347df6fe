"""Command-line entry point.

    fedrec-lab <subcommand> --config cfg.yaml [--set key=value ...] [--out DIR]

Subcommands run pipeline prefixes or individual stages against an output
directory; `replay` re-executes a finished run from its embedded config
snapshot and verifies the reports reproduce byte-for-byte. Exit codes:
0 success, 1 configuration error, 2 runtime failure.

Environment: FEDREC_LAB_WORKERS overrides the client worker-pool size.
"""

from __future__ import annotations

import argparse
import filecmp
import logging
import os
import sys
import tempfile

import yaml

from .config import ConfigError, config_from_dict, load_config, load_preset
from .data import write_synthetic_dataset
from .runner import StageError, run_experiment

log = logging.getLogger("fedrec_lab")

PIPELINE_PREFIX = {
    # running a stage from the CLI implies everything it needs, in order
    "ingest": ["ingest"],
    "train": ["ingest", "train"],
    "attack": ["ingest", "train", "attack"],
    "sweep": ["ingest", "train", "attack", "sweep"],
    "analyze": ["ingest", "train", "attack", "analyze"],
    "report": ["ingest", "train", "attack", "analyze", "report"],
    "run": None,  # use the stages from the config
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrec-lab",
        description="Federated recommender lab: train, attack, defend, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--config", help="experiment YAML")
            src.add_argument("--preset", help="shipped preset name "
                                              "(ml100k-sub, ml100k-full, toy)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field (dot paths)")
        p.add_argument("--out", help="output directory (overrides config)")

    for name in ("run", "ingest", "train", "attack", "sweep", "analyze", "report"):
        p = sub.add_parser(name, help=f"run the {name} pipeline"
                           if name == "run" else f"run stages up to {name}")
        common(p)

    p = sub.add_parser("replay", help="re-run from a snapshot and verify reports")
    p.add_argument("artifacts", help="existing run directory")
    p.add_argument("--scratch", help="directory for the replay (default: temp)")

    p = sub.add_parser("synth", help="write a synthetic MovieLens-shaped dataset")
    p.add_argument("path")
    p.add_argument("--users", type=int, default=943)
    p.add_argument("--items", type=int, default=1682)
    p.add_argument("--interactions", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=20240913)
    return parser


def _resolve_config(args):
    if getattr(args, "preset", None):
        raw = load_preset(args.preset)
        from .config import apply_overrides
        return config_from_dict(apply_overrides(raw, args.set))
    return load_config(args.config, args.set)


def _report_files(root):
    rep = os.path.join(root, "report")
    if not os.path.isdir(rep):
        return []
    return sorted(f for f in os.listdir(rep) if not f.endswith(".png"))


def cmd_replay(args) -> int:
    snap = os.path.join(args.artifacts, "config_snapshot.yaml")
    if not os.path.exists(snap):
        print(f"error: no config snapshot under {args.artifacts}", file=sys.stderr)
        return 1
    with open(snap, "r", encoding="utf-8") as fh:
        cfg = config_from_dict(yaml.safe_load(fh))
    scratch = args.scratch or tempfile.mkdtemp(prefix="fedrec-replay-")
    run_experiment(cfg, out_dir=scratch)
    names = _report_files(args.artifacts)
    if not names:
        print("error: original run has no reports to verify", file=sys.stderr)
        return 2
    mismatched = [n for n in names
                  if not filecmp.cmp(os.path.join(args.artifacts, "report", n),
                                     os.path.join(scratch, "report", n),
                                     shallow=False)]
    if mismatched:
        print(f"REPLAY MISMATCH: {mismatched}", file=sys.stderr)
        return 2
    print(f"replay ok: {len(names)} report files identical ({scratch})")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)

    if args.command == "synth":
        write_synthetic_dataset(args.path, n_users=args.users, n_items=args.items,
                                n_interactions=args.interactions, seed=args.seed)
        print(f"wrote {args.path}")
        return 0
    if args.command == "replay":
        return cmd_replay(args)

    try:
        cfg = _resolve_config(args)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    stages = PIPELINE_PREFIX[args.command]
    if stages is not None:
        cfg.stages = stages
    if args.out:
        cfg.output = args.out
    try:
        art = run_experiment(cfg)
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    print(f"done: stages {art.stages_done} -> {art.root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
