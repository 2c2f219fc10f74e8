"""ENDOR map over ESR and NMR frequency at one field, raw and column-centred."""

import argparse

import numpy as np

from endorsim import PumpConfig, esr_frequencies, synth_endor_map, ti47_field, ti47_system
from endorsim.dataset import weak_nmr_drive
from endorsim.fileio import write_map
from endorsim.lineshapes import column_mean_subtracted


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--b-z", type=float, default=0.45)
    ap.add_argument("--out", default="endor_map.csv")
    args = ap.parse_args()

    sys, fld = ti47_system(), ti47_field(args.b_z)
    pump = PumpConfig(omega_esr=1e6)
    pump = pump.with_(omega_nmr=weak_nmr_drive(sys, fld, pump, 0.1))
    f1 = esr_frequencies(sys, fld)[0].frequency
    f_esr = np.arange(np.round(f1) - 60, np.round(f1) + 61, 2.0)
    f_nmr = np.arange(30.0, 100.01, 0.5)
    m = synth_endor_map(sys, fld, f_esr, f_nmr, pump)
    write_map(args.out, f_nmr, f_esr, m)
    centred = column_mean_subtracted(m)
    write_map(args.out.replace(".csv", "_centered.csv"), f_nmr, f_esr, centred)
    k = np.unravel_index(np.argmin(centred), m.shape)
    print(f"deepest dip at f_esr {f_esr[k[1]]:.1f} MHz, f_nmr {f_nmr[k[0]]:.2f} MHz")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
