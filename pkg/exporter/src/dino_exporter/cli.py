"""dvk-export command line front end."""

import argparse
import sys

from . import __version__
from .config import ExportConfig
from .errors import ExportError
from .export import export_images, reference_from_cell


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvk-export",
        description="export ViT patch descriptors and attention to DVKEMB01 files",
    )
    parser.add_argument("--version", action="version", version=f"dvk-export {__version__}")
    parser.add_argument("--model", default="vits16", help="vits16, vits8, or local")
    parser.add_argument("--size", type=int, default=224, help="square input size in pixels")
    parser.add_argument("--weights", default=None, help="checkpoint path (ViT models)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--cls", action="store_true", help="also store the CLS embedding")
    parser.add_argument("--in", dest="in_path", default=None, help="image file or directory")
    parser.add_argument("--out", default=None, help="output directory (or reference file path)")
    parser.add_argument(
        "--make-ref", default=None, metavar="GRID",
        help="instead of exporting: write a one-centroid DVKREF01 from GRID",
    )
    parser.add_argument(
        "--cell", default=None, metavar="ROW,COL",
        help="grid cell to turn into the reference (with --make-ref)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.make_ref is not None:
            if args.cell is None or args.out is None:
                raise ExportError("--make-ref needs --cell ROW,COL and --out FILE")
            try:
                row, col = (int(part) for part in args.cell.split(","))
            except ValueError:
                raise ExportError(f"bad --cell {args.cell!r}, expected ROW,COL") from None
            reference_from_cell(args.make_ref, row, col, args.out)
            print(f"reference -> {args.out}")
            return 0
        if args.in_path is None or args.out is None:
            raise ExportError("export mode needs --in and --out")
        config = ExportConfig(
            model=args.model,
            image_size=args.size,
            weights=args.weights,
            device=args.device,
            with_cls=args.cls,
        )
        written = export_images(args.in_path, args.out, config)
        for path in written:
            print(path)
        return 0
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
