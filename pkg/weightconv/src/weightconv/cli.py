"""Command-line wrapper: one conversion per invocation."""

from __future__ import annotations

import argparse
import sys

from .convert import ConversionManifest, MappingError, ShapeError, convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weightconv",
        description="Convert a PyTorch VGG-19 checkpoint to a VGGW weight file.",
    )
    parser.add_argument("--checkpoint", required=True,
                        help="source checkpoint (.pth state dict)")
    parser.add_argument("--out", required=True, help="VGGW file to write")
    parser.add_argument("--manifest", default=None,
                        help="also write a JSON manifest here")
    parser.add_argument(
        "--input-order", choices=("bgr", "keep"), default="bgr",
        help="permute conv1_1 input channels for BGR input (default) or keep "
             "the source order",
    )
    return parser


def print_manifest(manifest: ConversionManifest, out=None) -> None:
    out = out or sys.stdout
    print(f"source  {manifest.source}", file=out)
    print(f"sha256  {manifest.source_sha256}", file=out)
    print(f"output  {manifest.output}  (conv1_1 expects "
          f"{manifest.input_channel_order.upper()} input)", file=out)
    for rec in manifest.layers:
        shape = "x".join(str(v) for v in rec.weight_shape)
        print(f"{rec.name:<10} weights {shape:<14} bias {rec.bias_size:<5} "
              f"crc32 {rec.crc32}", file=out)
    print(f"{len(manifest.layers)} layers written", file=out)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        manifest = convert(
            args.checkpoint, args.out,
            manifest_path=args.manifest,
            input_order=args.input_order,
        )
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MappingError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print_manifest(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
