#!/usr/bin/env python3
"""Mirror a PNG dataset tree (MVTec AD layout) as binary PNM for vitad.

RGB and colour images become P6 .ppm, ground-truth masks become P5 .pgm.
Directory structure and file stems are kept, so `*_mask.png` maps to
`*_mask.pgm` next to the same defect folder.
"""

import argparse
import sys
from pathlib import Path

from PIL import Image


def convert(src: Path, dst: Path) -> int:
    count = 0
    for png in sorted(src.rglob("*.png")):
        rel = png.relative_to(src)
        is_mask = "ground_truth" in rel.parts
        out = dst / rel.with_suffix(".pgm" if is_mask else ".ppm")
        out.parent.mkdir(parents=True, exist_ok=True)
        with Image.open(png) as im:
            im.convert("L" if is_mask else "RGB").save(out)
        count += 1
    return count


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", type=Path, help="root of the PNG dataset")
    ap.add_argument("dst", type=Path, help="output root (created if missing)")
    args = ap.parse_args()
    if not args.src.is_dir():
        print(f"not a directory: {args.src}", file=sys.stderr)
        return 2
    n = convert(args.src, args.dst)
    print(f"converted {n} images")
    return 0


if __name__ == "__main__":
    sys.exit(main())
