"""Generate the synthetic dataset, run the recursive calibration and compare with truth."""

import argparse
import time

import numpy as np

from endorsim import DatasetConfig, make_dataset, recursive_calibration, ti47_field, ti47_system


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=20240917)
    args = ap.parse_args()

    sys, fld = ti47_system(), ti47_field()
    truth = {
        "g_e_z": sys.g_e[2], "b_tip_z": fld.b_tip * np.cos(fld.phi),
        "a_z": sys.a_hyperfine[2], "kappa": sys.kappa,
    }
    ds = make_dataset(DatasetConfig(noise_fraction=args.noise, seed=args.seed))
    t0 = time.perf_counter()
    res = recursive_calibration(ds.esr, ds.nmr, {"a_z_init": 130.0, "g_n": 0.315})
    dt = time.perf_counter() - t0

    print(f"converged={res.converged} after {res.iterations} iteration(s) in {dt:.1f} s")
    for name, true in truth.items():
        est = getattr(res, name)
        err = 100 * abs(est.value / true - 1)
        print(f"  {name:8s} {est.value:12.6g} +- {est.sigma:.2g}  truth {true:.6g}  ({err:.3f} %)")
    print(f"  phi      {np.rad2deg(res.phi.value):.2f} deg   g_n(apparent) {res.g_n.value:.4f}")
    for w in res.warnings:
        print(f"  warning: {w}")


if __name__ == "__main__":
    main()
