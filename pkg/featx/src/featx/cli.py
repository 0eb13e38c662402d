"""featx command line: manifest of image paths in, VGNF feature file out."""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .extract import ON_ERROR_POLICIES, ExtractError, extract, read_manifest


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featx", description=__doc__)
    p.add_argument("--manifest", required=True, help="text file, one image path per line")
    p.add_argument("--out", required=True, help="output VGNF path")
    p.add_argument(
        "--model", default="resnet101", choices=["resnet101", "debug-mean"],
        help="feature trunk (debug-mean is a weight-free pipeline check)",
    )
    p.add_argument("--weights", help="local state-dict file for the resnet101 trunk")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--on-error", default="abort", choices=list(ON_ERROR_POLICIES))
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        manifest = read_manifest(args.manifest, args.out, args.model, args.batch_size)
        count, skipped = extract(manifest, weights_path=args.weights, on_error=args.on_error)
    except ExtractError as exc:
        print(f"featx: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        name = getattr(exc, "filename", None)
        detail = f"{exc.strerror}: {name}" if name else str(exc)
        print(f"featx: error: {detail}", file=sys.stderr)
        return 2
    for path in skipped:
        print(f"featx: warning: {args.on_error} policy applied to {path}", file=sys.stderr)
    print(f"wrote {count} rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
