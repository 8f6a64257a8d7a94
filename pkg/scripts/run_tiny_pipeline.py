#!/usr/bin/env python3
"""End-to-end demo at desk scale: synthesize a corpus, clean it, pretrain
the tiny preset, fine-tune a head, evaluate, and render a reconstruction
triptych — all through the CLI so the whole surface gets exercised.

Usage: python scripts/run_tiny_pipeline.py --workdir /tmp/tiny_run
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def sh(*cmd: str) -> None:
    print("+", " ".join(cmd))
    subprocess.run(cmd, check=True)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="/tmp/sonomae_tiny")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    sh(sys.executable, "scripts/make_synthetic_corpus.py", "--out", str(data), "--size", "64", "--n", "40")

    cfg = {
        "preprocess": {"target_size": 64},
        "model": {"preset": "tiny"},
        "pretrain": {"epochs": 20, "batch_size": 16, "base_lr": 0.004, "augment": None},
        "finetune": {"epochs": 20, "batch_size": 16, "base_lr": 0.002, "max_steps": 100},
        "eval": {"split": "test", "svg": True},
    }
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=2))
    seed = str(args.seed)

    sh("sonomae", "--config", str(cfg_path), "--seed", seed, "--out", str(work / "clean"),
       "preprocess", "--manifest", str(data / "manifest.csv"))
    sh("sonomae", "--config", str(cfg_path), "--seed", seed, "--out", str(work / "pretrain"),
       "pretrain", "--manifest", str(data / "manifest_labeled.csv"))
    sh("sonomae", "--config", str(cfg_path), "--seed", seed, "--out", str(work / "finetune"),
       "finetune", "--manifest", str(data / "manifest_labeled.csv"),
       "--checkpoint", str(work / "pretrain" / "pretrained.usfm"))
    sh("sonomae", "--config", str(cfg_path), "--seed", seed, "--out", str(work / "eval"),
       "eval", "--manifest", str(data / "manifest_labeled.csv"),
       "--checkpoint", str(work / "finetune" / "finetuned.usfm"))
    first_image = sorted((data / "raw").glob("labeled_*.png"))[0]
    sh("sonomae", "--config", str(cfg_path), "--seed", seed, "--out", str(work / "recon"),
       "reconstruct", "--checkpoint", str(work / "pretrain" / "pretrained.usfm"),
       "--image", str(first_image))
    print(f"\nall artifacts under {work}")
    print((work / "eval" / "metrics.json").read_text())


if __name__ == "__main__":
    main()
