"""Command-line front end: ``pointbridge-export export|validate``.

Exit codes: 0 success, 1 validation failures reported, 2 usage errors,
3 export/read errors (bad source, mapping, geometry, or archive).
"""

from __future__ import annotations

import argparse
import sys

from .archive import validate_archive
from .errors import ExportError
from .exporter import ExportSpec, export


def _extent(text: str) -> tuple[int, int]:
    try:
        w, h = (int(part) for part in text.split(","))
        return (w, h)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected WIDTH,HEIGHT (e.g. 512,512), got {text!r}"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointbridge-export",
        description="Convert published transformer checkpoints into portable archives",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="convert a source checkpoint")
    exp.add_argument("--source", required=True, help="source checkpoint (.pt/.pth/.bin/.npz)")
    exp.add_argument(
        "--mapping",
        required=True,
        help="bundled mapping name (clip_text, dinov2) or path to a mapping JSON",
    )
    exp.add_argument("--out", required=True, help="output archive (directory or .zip)")
    exp.add_argument("--n-heads", required=True, type=int, help="source attention head count")
    exp.add_argument("--modality-tag", default="language", help="source modality label")
    exp.add_argument("--line-length", type=int, default=77, help="target 1D table length")
    exp.add_argument(
        "--plane-extent",
        type=_extent,
        default=(512, 512),
        metavar="W,H",
        help="target 2D plane in pixels",
    )
    exp.add_argument("--patch-size", type=int, default=26, help="target 2D patch edge")
    exp.add_argument("--first-block", type=int, default=0, help="first source block to export")
    exp.add_argument("--n-blocks", type=int, default=None, help="block count (default: all)")
    exp.add_argument("--pool", default="cls", choices=("cls", "mean"))

    val = sub.add_parser("validate", help="re-verify an archive's manifest and payloads")
    val.add_argument("path", help="archive directory or .zip")
    return parser


def _cmd_export(args: argparse.Namespace) -> int:
    spec = ExportSpec(
        source=args.source,
        mapping=args.mapping,
        out=args.out,
        n_heads=args.n_heads,
        modality_tag=args.modality_tag,
        line_length=args.line_length,
        plane_extent=args.plane_extent,
        patch_size=args.patch_size,
        first_block=args.first_block,
        n_blocks=args.n_blocks,
        pool=args.pool,
    )
    result = export(spec)
    cfg = result.meta["config"]
    print(
        f"wrote {result.path}: {len(result.tensors)} tensors,"
        f" {cfg['n_blocks']} blocks, dim {cfg['dim']},"
        f" pe_resized={str(result.meta['pe_resized']).lower()},"
        f" cls_synthesized={str(result.meta['cls_synthesized']).lower()}"
    )
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    report = validate_archive(args.path)
    for line in report.lines():
        print(line)
    failed = len(report.failures)
    print(f"{args.path}: {len(report.checks) - failed} ok, {failed} failed")
    return 0 if report.ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        if args.command == "export":
            return _cmd_export(args)
        return _cmd_validate(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
