"""Symbolic and exact attention cost as image tokens per window grow."""

import argparse
import csv
import sys

from casa_lab.cost import exact_attention_entries, growth_exponent, symbolic_for_layout, synthetic_layout
from casa_lab.model import MODES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--windows", type=int, default=4)
    ap.add_argument("--text", type=int, default=8)
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256, 512, 1024])
    args = ap.parse_args()

    w = csv.writer(sys.stdout)
    w.writerow(["mode", "img_per_window", "symbolic", "exact_entries", "exact_stacked"])
    exact = {m: [] for m in MODES}
    for n in args.sizes:
        layout = synthetic_layout(args.windows, n, args.text)
        for m in MODES:
            e = exact_attention_entries(m, layout)
            exact[m].append(e)
            w.writerow([m, n, symbolic_for_layout(m, layout)["value"], e,
                        exact_attention_entries(m, layout, stack=True)])
    for m in MODES:
        print(f"# {m}: growth exponent in image tokens {growth_exponent(args.sizes, exact[m]):.3f}", file=sys.stderr)


if __name__ == "__main__":
    main()
