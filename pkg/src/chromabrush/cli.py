"""Command-line front end.

All real work lives in :mod:`chromabrush.colorpipe`; this module only parses
arguments, assembles a :class:`RunConfig`, reports progress on stderr, and
maps outcomes to exit codes:

* 0 -- success
* 1 -- user error (bad flags, missing arguments)
* 2 -- runtime failure (unreadable files, bad weight file, optimizer failure)
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import colorpipe, convnet
from .colorpipe import RunConfig, LossLayerConfig
from .errors import ChromabrushError, UsageError

__all__ = ["CliInvocation", "parse_args", "run", "check_weights", "main"]

WEIGHTS_ENV_VAR = "CHROMABRUSH_WEIGHTS"
PROGRESS_EVERY = 25


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so exit codes stay ours."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class CliInvocation:
    command: str  # "colorize" | "compare" | "check-weights"
    config: RunConfig | None = None
    weights_path: str | None = None
    dry_run: bool = False
    verbosity: int = 1


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--content", required=True, help="grayscale content image (PNG/JPEG)")
    p.add_argument("--style", required=True, help="color style image (PNG/JPEG)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--weights", default=None,
                   help=f"VGGW weight file (default: ${WEIGHTS_ENV_VAR})")
    p.add_argument("--iters", type=int, default=1000, help="outer iterations")
    p.add_argument("--alpha", type=float, default=1.0, help="content weight")
    p.add_argument("--beta", type=float, default=None,
                   help="initial style weight (default 1e3 * alpha)")
    p.add_argument("--decay", type=float, default=0.0025,
                   help="per-iteration fractional style-weight decay")
    p.add_argument("--optimizer", choices=("lbfgs", "sgd"), default="lbfgs")
    p.add_argument("--pooling", choices=("avg", "max"), default="avg")
    p.add_argument("--init", choices=("noise", "content"), default="noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-side", type=int, default=512,
                   help="cap on the longer image side (no upscaling)")
    p.add_argument("--sgd-lr", type=float, default=1.0)
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved run header and exit")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress output")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="progress line every iteration")


def _build_parser() -> _Parser:
    parser = _Parser(prog="chromabrush", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("colorize", help="run one colorization"))
    _add_run_flags(sub.add_parser(
        "compare", help="run the 2x2 optimizer/schedule comparison"
    ))
    cw = sub.add_parser("check-weights", help="validate a VGGW weight file")
    cw.add_argument("--weights", default=None,
                    help=f"VGGW weight file (default: ${WEIGHTS_ENV_VAR})")
    return parser


def parse_args(argv: list[str]) -> CliInvocation:
    """Parse an argv into an invocation; raises :class:`UsageError` otherwise."""
    ns = _build_parser().parse_args(argv)
    weights = ns.weights if ns.weights else os.environ.get(WEIGHTS_ENV_VAR)
    if ns.command == "check-weights":
        if not weights:
            raise UsageError(
                f"check-weights needs --weights or ${WEIGHTS_ENV_VAR}"
            )
        return CliInvocation("check-weights", weights_path=weights)
    config = RunConfig(
        content_path=ns.content,
        style_path=ns.style,
        output_path=ns.out,
        weights_path=weights,
        iterations=ns.iters,
        alpha=ns.alpha,
        beta0=ns.beta,
        decay_per_iter=ns.decay,
        optimizer=ns.optimizer,
        pooling=ns.pooling,
        init=ns.init,
        seed=ns.seed,
        max_side=ns.max_side,
        sgd_lr=ns.sgd_lr,
    )
    verbosity = 0 if ns.quiet else (2 if ns.verbose else 1)
    return CliInvocation(ns.command, config=config, dry_run=ns.dry_run,
                         verbosity=verbosity)


def _print_header(inv: CliInvocation, err) -> None:
    cfg = inv.config
    layers = LossLayerConfig()
    weight_values = sorted(set(layers.layer_weights.values()))
    lines = [
        f"run: {inv.command}",
        f"  content       = {cfg.content_path}",
        f"  style         = {cfg.style_path}",
        f"  out           = {cfg.output_path}",
        f"  weights       = {cfg.weights_path or '(unset)'}",
        f"  iters         = {cfg.iterations}",
        f"  alpha         = {cfg.alpha:g}",
        f"  beta          = {cfg.beta0:g}",
        f"  decay         = {cfg.decay_per_iter:g}",
        f"  optimizer     = {cfg.optimizer}",
        f"  pooling       = {cfg.pooling}",
        f"  init          = {cfg.init}",
        f"  seed          = {cfg.seed}",
        f"  max-side      = {cfg.max_side}",
        f"  sgd-lr        = {cfg.sgd_lr:g}",
        f"  content-layer = {layers.content_layer}",
        f"  style-layers  = {','.join(layers.style_layers)}",
        f"  layer-weights = {','.join('%g' % w for w in weight_values)}",
    ]
    print("\n".join(lines), file=err)


def _progress_printer(inv: CliInvocation, err):
    if inv.verbosity == 0:
        return None
    every = 1 if inv.verbosity >= 2 else PROGRESS_EVERY
    total = inv.config.iterations

    def show(row: colorpipe.TraceRow, panel: str | None = None) -> None:
        k = row.iteration
        if (k + 1) % every and (k + 1) != total:
            return
        tag = f"[{panel}] " if panel else ""
        print(
            f"{tag}iter {k + 1}/{total}  total={row.total:.6g}  "
            f"content={row.content:.6g}  style={row.style:.6g}  "
            f"beta={row.beta:.6g}  step={row.step:.3g}",
            file=err,
        )

    return show


def _trace_path_for(output_path) -> Path:
    out = Path(output_path)
    return out.parent / (out.stem + ".trace.csv")


def check_weights(path, out=None, err=None) -> int:
    """Validate a VGGW file against the standard trunk; print the inventory."""
    out = out or sys.stdout
    err = err or sys.stderr
    topology = convnet.vgg19_topology()
    try:
        store = convnet.load_weights(path, topology)
    except FileNotFoundError:
        print(f"error: weight file not found: {path}", file=err)
        return 2
    except ChromabrushError as exc:
        print(f"error: {path}: {exc}", file=err)
        return 2
    checksums = convnet.layer_checksums(store)
    for spec in topology.conv_layers():
        w, b = store.get(spec.name)
        shape = "x".join(str(e) for e in w.shape)
        print(f"{spec.name:<10} weights {shape:<14} bias {b.shape[0]:<5} "
              f"crc32 {checksums[spec.name]}", file=out)
    print(f"{len(topology.conv_layers())} layers OK: {path}", file=out)
    return 0


def run(inv: CliInvocation, out=None, err=None) -> int:
    """Execute a parsed invocation; returns the process exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    if inv.command == "check-weights":
        return check_weights(inv.weights_path, out, err)

    _print_header(inv, err)
    if inv.dry_run:
        return 0
    cfg = inv.config
    if not cfg.weights_path:
        print(f"error: no weight file; pass --weights or set ${WEIGHTS_ENV_VAR}",
              file=err)
        return 1
    show = _progress_printer(inv, err)
    try:
        if inv.command == "colorize":
            result = colorpipe.run_colorization(cfg, progress=show)
            colorpipe.write_trace_csv(_trace_path_for(cfg.output_path), result.trace)
            if result.failed:
                print(f"error: run failed: {result.message}", file=err)
                return 2
            print(f"wrote {result.output_path}", file=out)
            return 0
        # compare
        progress = (lambda panel, row: show(row, panel)) if show else None
        comp = colorpipe.compare_optimizers(cfg, progress=progress)
        failures = [p for p in colorpipe.COMPARE_PANELS if comp.runs[p].failed]
        for panel in colorpipe.COMPARE_PANELS:
            r = comp.runs[panel]
            status = f"failed: {r.message}" if r.failed else f"final={r.final_total:.6g}"
            print(f"panel {panel}: {comp.image_paths[panel]}  {status}", file=out)
        print(f"wrote {comp.trace_path}", file=out)
        return 2 if failures else 0
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=err)
        return 2
    except (ChromabrushError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        inv = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    return run(inv)


if __name__ == "__main__":
    sys.exit(main())
