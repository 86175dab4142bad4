"""Command line for the feature extractor."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .extract import extract

BACKBONES = ("squeezenet1_1", "resnet18", "mobilenet_v3_small", "vgg16")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="kgrec-extract",
        description="Convert a directory of images into a kgrec feature file "
        "using a frozen pretrained backbone (per-class subdirectories give "
        "labels; loose images are labeled '?').",
    )
    parser.add_argument("--images", required=True, help="image directory")
    parser.add_argument("--out", required=True, help="feature file to write")
    parser.add_argument("--backbone", choices=BACKBONES, default="squeezenet1_1")
    parser.add_argument("--batch-size", type=int, default=16)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        manifest = extract(args.images, args.out, args.backbone, args.batch_size)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    manifest_path = Path(str(args.out) + ".manifest.json")
    manifest_path.write_text(
        json.dumps(dataclasses.asdict(manifest), sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    print(
        f"extracted {manifest.image_count} images "
        f"({manifest.skipped} skipped) -> {args.out} "
        f"[{manifest.backbone}, dim={manifest.feature_dim}, "
        f"pretrained={manifest.pretrained}]"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
