#!/usr/bin/env python3
"""Standalone validator for exported training trees.

Checks the directory contract without importing the package: the tree must
hold ``images/source/*.png`` with matching
``labels/source/*_labelTrainIds.png`` pairs, and ``images/pseudo_target/``
with images only. Files must be real PNGs (magic-byte check). Exit status
is nonzero on any violation.
"""

import sys
from pathlib import Path

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(8) == PNG_MAGIC
    except OSError:
        return False


def main(argv):
    if len(argv) != 2:
        print("usage: validate_export.py EXPORT_DIR", file=sys.stderr)
        return 2
    root = Path(argv[1])
    problems = []

    src_images = sorted((root / "images" / "source").glob("*.png"))
    src_labels_dir = root / "labels" / "source"
    pt_images = sorted((root / "images" / "pseudo_target").glob("*.png"))

    if not src_images:
        problems.append("no source images under images/source/")
    if not pt_images:
        problems.append("no pseudo-target images under images/pseudo_target/")

    for image in src_images:
        label = src_labels_dir / f"{image.stem}_labelTrainIds.png"
        if not label.is_file():
            problems.append(f"missing label for source image {image.name}")

    if src_labels_dir.is_dir():
        for label in sorted(src_labels_dir.glob("*.png")):
            if not label.name.endswith("_labelTrainIds.png"):
                problems.append(f"label file without _labelTrainIds suffix: {label.name}")
                continue
            stem = label.name[: -len("_labelTrainIds.png")]
            if not (root / "images" / "source" / f"{stem}.png").is_file():
                problems.append(f"orphan label without source image: {label.name}")

    pt_labels_dir = root / "labels" / "pseudo_target"
    if pt_labels_dir.is_dir() and any(pt_labels_dir.iterdir()):
        problems.append("pseudo_target split must be unlabeled, but labels/pseudo_target/ has files")

    for path in src_images + pt_images + (sorted(src_labels_dir.glob("*.png")) if src_labels_dir.is_dir() else []):
        if not is_png(path):
            problems.append(f"not a PNG file: {path}")

    for problem in problems:
        print(f"EXPORT CONTRACT VIOLATION: {problem}")
    if problems:
        return 1
    print(f"export tree ok: {len(src_images)} labeled source pairs, {len(pt_images)} unlabeled target images")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
