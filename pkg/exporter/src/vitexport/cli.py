"""Command-line entry point: export a checkpoint and optionally a reference bundle."""

from __future__ import annotations

import argparse
import sys

from .export import DEFAULT_CIRCUITS, ExportSpec, emit_reference, export
from .mapping import DEFAULT_IGNORES, MappingError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitexport")
    parser.add_argument("--checkpoint", required=True, help="torch checkpoint (.pth)")
    parser.add_argument("--output", required=True, help="container file to write")
    parser.add_argument("--bundle", help="also emit a reference bundle here")
    parser.add_argument("--num-heads", type=int, default=12)
    parser.add_argument("--image-side", type=int, default=512)
    parser.add_argument("--layernorm-eps", type=float, default=1e-6)
    parser.add_argument("--circuits", default=",".join(DEFAULT_CIRCUITS),
                        help='comma-separated labels, e.g. "standard,dup_2_5"')
    parser.add_argument("--seed", type=int, default=0, help="reference image seed")
    parser.add_argument("--tolerance", type=float, default=1e-4)
    parser.add_argument("--ignore", default="",
                        help="extra source tensor names to skip, comma-separated")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    ignore = DEFAULT_IGNORES | {s for s in args.ignore.split(",") if s}
    spec = ExportSpec(
        checkpoint=args.checkpoint,
        container_path=args.output,
        bundle_path=args.bundle,
        num_heads=args.num_heads,
        image_side=args.image_side,
        layernorm_eps=args.layernorm_eps,
        circuits=tuple(args.circuits.split(",")),
        reference_seed=args.seed,
        tolerance=args.tolerance,
        ignore=frozenset(ignore),
    )
    try:
        tensors, arch, digest = export(spec)
        print(f"container: {spec.container_path}")
        print(f"fingerprint: {digest}")
        print(f"architecture: {arch}")
        if spec.bundle_path:
            bundle_digest = emit_reference(spec, tensors, arch)
            print(f"bundle: {spec.bundle_path}")
            print(f"bundle fingerprint: {bundle_digest}")
    except (MappingError, OSError, ValueError) as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
