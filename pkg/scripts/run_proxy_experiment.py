#!/usr/bin/env python3
"""Train the proxy benchmark and report held-out metrics against the pinned bars."""

import argparse
import sys
import time
from pathlib import Path

from recurseg.experiments import (
    PROXY_DIC_MAX,
    PROXY_SBD_MIN,
    ProxyConfig,
    run_proxy,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/proxy")
    parser.add_argument("--threads", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-count", type=int, default=500)
    parser.add_argument("--val-count", type=int, default=100)
    parser.add_argument("--glimpses", type=int, default=5)
    parser.add_argument("--epochs", default="4,4,4,16", help="per-stage epoch counts a,b,c,d")
    args = parser.parse_args()

    stage_epochs = tuple(int(p) for p in args.epochs.split(","))
    cfg = ProxyConfig(train_count=args.train_count, val_count=args.val_count,
                      glimpses=args.glimpses, stage_epochs=stage_epochs,
                      threads=args.threads, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as log:
        outcome = run_proxy(cfg, out_dir=out_dir, log_stream=log)
    minutes = (time.perf_counter() - start) / 60.0

    print(outcome.report.to_json())
    print(f"elapsed: {minutes:.1f} min, steps: {outcome.train_result.global_step}")
    if outcome.train_result.aborted:
        print("FAIL: training diverged", file=sys.stderr)
        return 1
    verdict = "PASS" if outcome.passed else "FAIL"
    print(f"{verdict}: sbd {outcome.report.sbd:.4f} (need >= {PROXY_SBD_MIN}), "
          f"|dic| {outcome.report.dic_abs:.4f} (need <= {PROXY_DIC_MAX})")
    return 0 if outcome.passed else 1


if __name__ == "__main__":
    sys.exit(main())
