"""Flip-flop hybridization and NMR frequencies versus field, written as CSV."""

import argparse

import numpy as np

from endorsim import field_sweep, ti47_field, ti47_system
from endorsim.fileio import write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="hybridization_vs_field.csv")
    ap.add_argument("--b-min", type=float, default=0.2)
    ap.add_argument("--b-max", type=float, default=1.4)
    ap.add_argument("--points", type=int, default=61)
    args = ap.parse_args()

    grid = np.linspace(args.b_min, args.b_max, args.points)
    sw = field_sweep(ti47_system(), ti47_field(), grid)
    labels = ["I", "II", "III", "IV"]
    rows = [[b, c] + [sw.nmr[lab][k] for lab in labels] for k, (b, c) in enumerate(zip(grid, sw.hybridization))]
    write_table(args.out, ["b_z_T", "c_ff"] + [f"f_{lab}_MHz" for lab in labels], rows)

    c = sw.hybridization
    print(f"c_ff: {c[0]:.4f} at {grid[0]:.2f} T, {c[-1]:.4f} at {grid[-1]:.2f} T "
          f"(ratio {c[0] / c[-1]:.1f})")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
