"""Command-line interface.

Subcommands
-----------
- ``simulate <spec.json> -o DIR``: run the scene's simulator, emit per-frame
  backward flows (.flo) and eta maps (.npy) plus a checksummed manifest.
- ``toy-run <spec.json> <frame.png> -o DIR``: full generation loop with the
  identity codec and the analytic denoiser; writes frame PNGs and metrics.
- ``metrics <dir> [--report out.json]``: motion consistency over numbered
  PNG or NPY frames.
- ``flo info <file>`` / ``flo diff <a> <b>``: inspect or compare flow files.
- ``verify <manifest.json>``: re-check recorded checksums.

Exit codes: 0 success, 2 validation error, 3 runtime error. The only
environment knob is ``LATENTFLOW_LOG`` (log level name).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .grids import FlowField, TensorGrid
from .metrics import motion_consistency
from .scene import (SceneError, load_frame_png, load_scene, run_scene,
                    run_toy_pipeline, verify_manifest)

log = logging.getLogger("latentflow")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentflow",
                                     description="physics flows for latent-space video generation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scene and emit flow/eta files")
    p.add_argument("spec", help="scene spec JSON")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("toy-run", help="end-to-end toy pipeline on a first frame")
    p.add_argument("spec", help="scene spec JSON")
    p.add_argument("frame", help="first frame PNG (latent-resolution)")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("metrics", help="motion consistency for a frame directory")
    p.add_argument("frames_dir", help="directory of numbered .png or .npy frames")
    p.add_argument("--report", help="also write the JSON report here")

    p = sub.add_parser("flo", help="inspect or compare .flo files")
    q = p.add_subparsers(dest="flo_command", required=True)
    info = q.add_parser("info", help="print dimensions and statistics")
    info.add_argument("file")
    diff = q.add_parser("diff", help="compare two flow files")
    diff.add_argument("file_a")
    diff.add_argument("file_b")

    p = sub.add_parser("verify", help="re-check a manifest's checksums")
    p.add_argument("manifest")
    return parser


def _load_frames(frames_dir: Path) -> list[TensorGrid]:
    pngs = sorted(frames_dir.glob("*.png"))
    npys = sorted(frames_dir.glob("*.npy"))
    if pngs:
        return [load_frame_png(p) for p in pngs]
    if npys:
        return [TensorGrid(np.load(p)) for p in npys]
    raise SceneError(f"{frames_dir}: no .png or .npy frames found")


def cmd_metrics(args) -> int:
    frames = _load_frames(Path(args.frames_dir))
    if len(frames) < 2:
        raise SceneError("need at least two frames to score")
    per_pair = [motion_consistency(frames[i:i + 2]) for i in range(len(frames) - 1)]
    report = {"per_pair": per_pair, "mean": float(np.mean(per_pair))}
    payload = json.dumps(report, indent=2, sort_keys=True)
    print(payload)
    if args.report:
        Path(args.report).write_text(payload + "\n")
    return EXIT_OK


def cmd_flo(args) -> int:
    if args.flo_command == "info":
        flow = FlowField.load_flo(args.file)
        mag = flow.magnitude()
        print(f"{args.file}: {flow.width}x{flow.height}")
        print(f"  u: min {flow.u.min():+.4f}  max {flow.u.max():+.4f}")
        print(f"  v: min {flow.v.min():+.4f}  max {flow.v.max():+.4f}")
        print(f"  |f|: mean {mag.mean():.4f}  max {mag.max():.4f}")
        return EXIT_OK
    a = FlowField.load_flo(args.file_a)
    b = FlowField.load_flo(args.file_b)
    if a.shape != b.shape:
        print(f"differ: dimensions {a.width}x{a.height} vs {b.width}x{b.height}")
        return EXIT_OK
    du = np.abs(a.u - b.u).max()
    dv = np.abs(a.v - b.v).max()
    if du == 0.0 and dv == 0.0:
        print("identical")
    else:
        print(f"differ: max |du| {du:.6g}, max |dv| {dv:.6g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    problems = verify_manifest(args.manifest)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        raise RuntimeError(f"{len(problems)} file(s) failed verification")
    print("ok")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LATENTFLOW_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            spec = load_scene(args.spec)
            manifest = run_scene(spec, args.output)
            print(manifest)
        elif args.command == "toy-run":
            spec = load_scene(args.spec)
            manifest = run_toy_pipeline(spec, args.frame, args.output)
            print(manifest)
        elif args.command == "metrics":
            return cmd_metrics(args)
        elif args.command == "flo":
            return cmd_flo(args)
        elif args.command == "verify":
            return cmd_verify(args)
        return EXIT_OK
    except SceneError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
