"""Command line for the feature extractor.

Usage: visaff-extract --images <dir> --out-tiled <path> --out-whole <path>
       [--batch N] [--weights imagenet|random] [--backend keras|stub]
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import ExtractionJob, run_extraction


def build_parser():
    parser = argparse.ArgumentParser(
        prog="visaff-extract",
        description="extract tiled and whole-image feature files from a directory of images",
    )
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out-tiled", dest="out_tiled",
                        help="output path for the tiled feature file")
    parser.add_argument("--out-whole", dest="out_whole",
                        help="output path for the whole-image feature file")
    parser.add_argument("--batch", type=int, default=16,
                        help="inference batch size (default 16)")
    parser.add_argument("--weights", choices=("imagenet", "random"),
                        default="imagenet",
                        help="backbone weights; 'random' skips any download")
    parser.add_argument("--backend", choices=("keras", "stub"), default="keras",
                        help="'stub' is a fast deterministic stand-in for tests")
    parser.add_argument("--stub-seed", dest="stub_seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    job = ExtractionJob(
        image_dir=args.images,
        out_tiled=args.out_tiled,
        out_whole=args.out_whole,
        batch_size=args.batch,
        backend=args.backend,
        weights=args.weights,
        stub_seed=args.stub_seed,
    )
    try:
        report = run_extraction(job)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"extracted {len(report.processed)} images "
          f"({len(report.failures)} failures)")
    for image_id, reason in report.failures:
        print(f"  failed {image_id}: {reason}", file=sys.stderr)
    return 0 if not report.failures else 1


if __name__ == "__main__":
    sys.exit(main())
