"""Harness CLI.

- ``sdharness run <config.json>``: consume a primary manifest and generate
  frames through the configured model, writing PNGs and report.json.
- ``sdharness correlate <config.json> <frames_dir> [--tau N]``: the
  image-vs-latent flow correlation experiment on real frames.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from latentflow.scene import load_frame_png

from .model import build_adapter
from .pipeline import HarnessConfig, latent_flow_correlation, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdharness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="generate a video from primary artifacts")
    p.add_argument("config", help="harness config JSON")

    p = sub.add_parser("correlate", help="image/latent flow correlation on real frames")
    p.add_argument("config", help="harness config JSON (model settings)")
    p.add_argument("frames_dir", help="directory of numbered PNG frames")
    p.add_argument("--tau", type=int, default=400)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SDHARNESS_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = HarnessConfig.from_json(args.config)
        if args.command == "run":
            report = run_pipeline(config)
            print(json.dumps(report, indent=2, sort_keys=True))
            return 0
        frames = [load_frame_png(p) for p in sorted(Path(args.frames_dir).glob("*.png"))]
        adapter = build_adapter(config.model, config.device)
        result = latent_flow_correlation(frames, args.tau, adapter,
                                         steps=config.steps)
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
        return 0
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
