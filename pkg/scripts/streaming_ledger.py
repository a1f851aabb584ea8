"""Live-captioning memory and latency ledger: insertion vs CASA over many frames."""

import argparse
from pathlib import Path

import numpy as np

from casa_lab.model import FusionConfig, FusionModel
from casa_lab.streaming import (bucket_medians, min_step_times, per_frame_rows, synthetic_schedule, timed_runs,
                                write_ledger)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--frame-tokens", type=int, default=64)
    ap.add_argument("--text-per-frame", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("runs/ledger"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    d = 64
    sched = synthetic_schedule(args.frames, args.frame_tokens, args.text_per_frame, d, seed=0, dtype=np.float64)
    for mode in ("insertion", "casa-parallel"):
        model = FusionModel(FusionConfig(d_model=d, n_heads=4, n_layers=2, vocab_size=32, mode=mode), seed=0)
        runs = timed_runs(sched, model, args.repeats)
        with open(args.out / f"ledger-{mode}.csv", "w", newline="") as fh:
            write_ledger(runs[0], fh)
        last = per_frame_rows(runs[0])[-1]
        medians = bucket_medians(min_step_times(runs), 20)
        print(f"{mode}: final text KV {last.text_kv_scalars}, window {last.casa_window_scalars}, "
              f"20-frame step ms {[round(m, 2) for m in medians]}")


if __name__ == "__main__":
    main()
