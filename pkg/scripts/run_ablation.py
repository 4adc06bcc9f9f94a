#!/usr/bin/env python3
"""Run the glimpse-count ablation and check the MUCov refinement trend."""

import argparse
import sys
import time
from pathlib import Path

from recurseg.experiments import (
    MUCOV_GAP_TOLERANCE,
    AblationConfig,
    ProxyConfig,
    run_ablation,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/ablation")
    parser.add_argument("--threads", type=int, default=4)
    parser.add_argument("--train-count", type=int, default=500)
    parser.add_argument("--val-count", type=int, default=100)
    parser.add_argument("--glimpses", default="1,3,5")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--epochs", default="2,2,2,8", help="per-stage epoch counts a,b,c,d")
    args = parser.parse_args()

    cfg = ProxyConfig(train_count=args.train_count, val_count=args.val_count,
                      threads=args.threads)
    ab = AblationConfig(glimpse_settings=tuple(int(g) for g in args.glimpses.split(",")),
                        seeds=tuple(int(s) for s in args.seeds.split(",")),
                        stage_epochs=tuple(int(p) for p in args.epochs.split(",")))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(glimpses, seed, report):
        print(f"glimpses={glimpses} seed={seed}: mucov {report.mucov:.4f} "
              f"sbd {report.sbd:.4f} |dic| {report.dic_abs:.4f}", flush=True)

    start = time.perf_counter()
    outcome = run_ablation(cfg, ab, out_dir=out_dir, progress=progress)
    minutes = (time.perf_counter() - start) / 60.0

    means = outcome.mean_mucov()
    print("mean mucov by glimpse count:",
          {g: round(v, 4) for g, v in sorted(means.items())})
    print(f"consecutive gaps: {[round(g, 4) for g in outcome.trend_gaps()]} "
          f"(each must be >= {MUCOV_GAP_TOLERANCE})")
    print(f"elapsed: {minutes:.1f} min")
    print("PASS" if outcome.passed else "FAIL")
    return 0 if outcome.passed else 1


if __name__ == "__main__":
    sys.exit(main())
