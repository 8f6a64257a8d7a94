#!/usr/bin/env python3
"""Generate a small synthetic corpus on disk: annotated ultrasound-like
scans for preprocessing demos plus a labeled two-class set for
fine-tuning, with train/val/test splits and 5-fold ids in one manifest.

Usage: python scripts/make_synthetic_corpus.py --out data/synthetic --size 64 --n 40
"""

import argparse
from pathlib import Path

import numpy as np

from sonomae import corpus, imgproc, synthetic
from sonomae.rng import Rng


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--n", type=int, default=40, help="labeled classification images")
    ap.add_argument("--n-annotated", type=int, default=8, help="scans with injected overlays")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    records = []

    for i in range(args.n_annotated):
        img, _ = synthetic.annotated_scan(args.size, rng.child(0, i))
        path = out / "raw" / f"annotated_{i:03d}.png"
        imgproc.write_png(path, img)
        records.append(corpus.SampleRecord(path=str(path), dataset="synth_annotated", split="train"))

    images, labels = synthetic.separable_set(args.n, args.size, rng.child(1))
    splits = ["train"] * (args.n * 6 // 10) + ["val"] * (args.n * 2 // 10)
    splits += ["test"] * (args.n - len(splits))
    for i, (img, label) in enumerate(zip(images, labels)):
        path = out / "raw" / f"labeled_{i:03d}.png"
        imgproc.write_png(path, img)
        records.append(
            corpus.SampleRecord(
                path=str(path),
                dataset="synth_labeled",
                label=f"class{int(label)}",
                split=splits[i],
                fold=i % 5,
            )
        )

    manifest = corpus.Manifest(records=records, source_uri=str(out / "manifest.csv"))
    corpus.save_manifest(manifest, out / "manifest.csv")
    labeled = out / "manifest_labeled.csv"
    corpus.save_manifest(
        corpus.Manifest(records=[r for r in records if r.dataset == "synth_labeled"]), labeled
    )
    print(f"wrote {len(records)} images under {out}/raw, manifests at {out}/manifest.csv and {labeled}")


if __name__ == "__main__":
    main()
