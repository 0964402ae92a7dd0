#!/usr/bin/env python3
"""Print a summary of a generated dataset and render a few silhouettes as
ASCII art for a quick visual sanity check.

Usage:
    python3 scripts/inspect_dataset.py --dataset /tmp/toy/data [--show 4]
"""

import argparse
from collections import Counter
from pathlib import Path

from buildiff.conditioner import load_pgm
from buildiff.datagen import DatasetManifest
from buildiff.geometry import load_bpc

SHADES = " .:-=+*#%@"


def ascii_image(pixels) -> str:
    rows = []
    for row in pixels:
        rows.append("".join(SHADES[min(int(v * (len(SHADES) - 1) + 0.5),
                                       len(SHADES) - 1)] for v in row))
    return "\n".join(rows)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--show", type=int, default=2,
                    help="number of silhouettes to render as ASCII")
    args = ap.parse_args()

    root = Path(args.dataset)
    manifest = DatasetManifest.load(root / "manifest.json")
    splits = Counter(e["split"] for e in manifest.entries)
    roofs = Counter(e["spec"]["roof_type"] for e in manifest.entries)
    print(f"entries: {len(manifest.entries)}  splits: {dict(splits)}  "
          f"roofs: {dict(roofs)}")

    first = manifest.entries[0]
    cloud = load_bpc(root / first["cloud"])
    print(f"cloud '{first['id']}': {cloud.count} points, "
          f"z range [{cloud.points[:, 2].min():.3f}, "
          f"{cloud.points[:, 2].max():.3f}]")

    for entry in manifest.entries[:args.show]:
        img = load_pgm(root / entry["silhouette"])
        print(f"\n{entry['id']}  roof={entry['spec']['roof_type']}  "
              f"split={entry['split']}")
        print(ascii_image(img.pixels))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
