"""Command line entry point: ``mpf <subcommand> --config FILE [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 configuration error, 2 solver failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .phantom import PhantomSpecError
from .volume import Volume, VolumeFormatError, read_volume

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mpf")


def _phantom_grid(cfg, out: Path) -> Volume:
    return read_volume(out / "phantom.mpfv")


def _cmd_phantom(cfg, out, args):
    pipeline.stage_phantom(cfg, out)


def _cmd_simulate(cfg, out, args):
    pipeline.stage_simulate(cfg, _phantom_grid(cfg, out), out)


def _cmd_reconstruct(cfg, out, args):
    sinos = pipeline.load_sinograms(cfg, out)
    only = set(args.method) if args.method else None
    known = {m.label for m in pipeline.methods(cfg)}
    if only and not only <= known:
        raise ConfigError("--method", f"unknown method(s) {sorted(only - known)}; known: {sorted(known)}")
    results = pipeline.stage_reconstruct(cfg, sinos, _phantom_grid(cfg, out), out, only)
    return EXIT_SOLVER if any(r.error for r in results) else EXIT_OK


def _cmd_evaluate(cfg, out, args):
    table = pipeline.stage_evaluate(cfg, _phantom_grid(cfg, out), out)
    sys.stdout.write(table.to_text())
    return EXIT_SOLVER if table.failed else EXIT_OK


def _cmd_render(cfg, out, args):
    for p in pipeline.stage_render(cfg, out):
        log.info("wrote %s", p)


def _cmd_run_all(cfg, out, args):
    table = pipeline.run_experiment(cfg, out)
    sys.stdout.write(table.to_text())
    return EXIT_SOLVER if table.failed else EXIT_OK


COMMANDS = {
    "phantom": (_cmd_phantom, "rasterize the phantom to phantom.mpfv"),
    "simulate": (_cmd_simulate, "simulate one sinogram per pose from phantom.mpfv"),
    "reconstruct": (_cmd_reconstruct, "run the MBIR, PnP and multi-pose reconstructions"),
    "evaluate": (_cmd_evaluate, "score reconstructions and write results.txt"),
    "render": (_cmd_render, "write PNG slices of the phantom and reconstructions"),
    "run-all": (_cmd_run_all, "all of the above in order"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mpf", description="Joint reconstruction from multiple object poses.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="YAML experiment config")
        p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="noise seed (overrides noise.seed)")
        if name == "reconstruct":
            p.add_argument("--method", action="append", help="restrict to this method label (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        out = args.out if args.out is not None else Path(cfg.output_dir)
        handler = COMMANDS[args.command][0]
        return handler(cfg, out, args) or EXIT_OK
    except (ConfigError, PhantomSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, VolumeFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
