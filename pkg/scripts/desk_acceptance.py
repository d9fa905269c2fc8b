#!/usr/bin/env python3
"""Desk-scale online-learning gain run.

Offline-trains a small model on synthetic patch pairs and checks that it beats
the degraded chroma on a held-out slice of those pairs. Then online fine-tunes on
held-out frames and checks the mean chroma gain over the baseline model and the
side-information size per frame. Prints one JSON summary; exit code 1 on failure.

The offline learning rate defaults to the ``offline.lr`` config default. Short
runs with few epochs may want ``--lr 1e-3``.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import List

import numpy as np
import orjson

# Ensure project root (containing `oldn/`) is on sys.path
ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))


def build_parser() -> argparse.ArgumentParser:
    from oldn.settings import OfflineConfig

    ap = argparse.ArgumentParser(description="Desk-scale OL-DN online-learning acceptance run")
    ap.add_argument("--n", type=int, default=16, help="Feature channels")
    ap.add_argument("--train-images", type=int, default=50, help="Synthetic 128x128 training images")
    ap.add_argument("--patches", type=int, default=20, help="Patch pairs per image and chroma plane")
    ap.add_argument("--train-qp", type=int, default=27)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--lr", type=float, default=OfflineConfig().lr, help="Offline Adam learning rate")
    ap.add_argument("--holdout", type=float, default=0.1, help="Fraction of patch pairs kept out of offline training")
    ap.add_argument("--frames", type=int, default=10, help="Held-out frames")
    ap.add_argument("--qp", type=int, default=32, help="QP of the held-out frames")
    ap.add_argument("--steps", type=int, default=100, help="Online Adam steps")
    ap.add_argument("--min-gain-db", type=float, default=0.05)
    ap.add_argument("--max-side-bytes", type=int, default=2048)
    ap.add_argument("--checkpoint", type=str, default=None, help="Also save the trained model here")
    ap.add_argument("--seed", type=int, default=0)
    return ap


def main(argv: List[str]) -> int:
    args = build_parser().parse_args(argv)

    from oldn.codec_sim import synthetic_image
    from oldn.harness import simulate_roundtrip
    from oldn.logs import log_event
    from oldn.settings import ModelConfig, OfflineConfig, OnlineConfig
    from oldn.storage import save_model
    from oldn.training import ManifestRecord, build_dataset, evaluate_dataset, split_dataset, train_offline

    t0 = time.monotonic()
    records = [ManifestRecord(f"synthetic:{args.seed + k}:128x128", args.train_qp) for k in range(args.train_images)]
    offline = OfflineConfig(
        epochs=args.epochs,
        batch_size=16,
        lr=args.lr,
        luma_patch=64,
        chroma_patch=32,
        seed=args.seed,
        holdout_fraction=args.holdout,
    )
    dataset = build_dataset(records, args.patches, args.seed, patch=offline.chroma_patch)
    train_set, holdout = split_dataset(dataset, offline.holdout_fraction, offline.seed)
    log_event("desk", "dataset ready", pairs=len(dataset), train=len(train_set), holdout=len(holdout))
    model = train_offline(train_set, offline, ModelConfig(n=args.n, cab_reduction=4))
    if args.checkpoint:
        save_model(args.checkpoint, model)
    holdout_gain = evaluate_dataset(model, holdout, offline.batch_size) if len(holdout) else float("nan")
    log_event("desk", "baseline holdout", gain_db=holdout_gain)

    online = OnlineConfig(steps=args.steps, lr=1e-2)
    gains: List[float] = []
    side_bytes: List[float] = []
    parity = True
    for k in range(args.frames):
        rgb = synthetic_image(100_000 + args.seed + k, 128, 128)
        report = simulate_roundtrip(rgb, args.qp, model, online)
        gains.append(report.enhanced_psnr - report.baseline_psnr)
        side_bytes.append(report.side_bits / 8.0)
        parity = parity and report.parity_ok
        log_event("desk", "frame", frame=k, gain_db=gains[-1], side_bytes=side_bytes[-1])

    summary = {
        "pairs": len(dataset),
        "holdout_pairs": len(holdout),
        "holdout_gain_db": holdout_gain,
        "frames": args.frames,
        "mean_gain_db": float(np.mean(gains)),
        "max_side_bytes": float(np.max(side_bytes)),
        "parity_ok": parity,
        "seconds": round(time.monotonic() - t0, 1),
    }
    passed = (
        holdout_gain > 0
        and summary["mean_gain_db"] >= args.min_gain_db
        and summary["max_side_bytes"] <= args.max_side_bytes
        and parity
    )
    summary["passed"] = passed
    sys.stdout.write(orjson.dumps(summary, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY).decode() + "\n")
    return 0 if passed else 1


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
