"""Per-block micro-benchmark of every fusion mode at a few image sizes."""

import argparse

from casa_lab.cost import BenchConfig, microbench_layer
from casa_lab.model import MODES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--backward", action="store_true")
    args = ap.parse_args()

    print(f"{'mode':>14} {'img':>5} {'attn ms':>9} {'ffn ms':>9} {'scratch':>10} {'params+':>8}")
    for n in args.sizes:
        for m in MODES:
            r = microbench_layer(m, BenchConfig(img_per_window=n), trials=args.trials, backward=args.backward)
            print(f"{m:>14} {n:>5} {r.attn_ms:9.3f} {r.ffn_ms:9.3f} {r.attn_scratch_scalars:10d} {r.params_added:8d}")


if __name__ == "__main__":
    main()
