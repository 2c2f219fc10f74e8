"""Print the NMR, ESR and double-quantum lines of the 47Ti parameter set at one field."""

import argparse

from endorsim import diagonalize, double_quantum_frequencies, esr_frequencies, nmr_lines, ti47_field, ti47_system


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--b-z", type=float, default=0.45, help="field along z in tesla")
    ap.add_argument("--a-perp", type=float, default=25.0, help="in-plane hyperfine in MHz")
    args = ap.parse_args()

    sys = ti47_system(args.a_perp)
    fld = ti47_field(args.b_z)
    sol = diagonalize(sys, fld)

    print(f"B_z = {args.b_z:.3f} T")
    print("\nNMR (dm_I = 1)")
    lines = sorted(nmr_lines(sys, fld, sol).values(), key=lambda ln: ln.frequency)
    for ln in lines:
        print(f"  {ln.label:>5}  {ln.frequency:9.3f} MHz  weight {ln.weight:.3e}  "
              f"{ln.from_state} -> {ln.to_state}")
    print("\nESR")
    for ln in esr_frequencies(sys, fld, sol):
        print(f"  m_I = {ln.m_i:+.1f}  {ln.frequency:10.2f} MHz")
    print("\nDouble quantum")
    for ln in double_quantum_frequencies(sol):
        print(f"  {ln.label:>9}  {ln.frequency:9.3f} MHz  weight {ln.weight:.2e}")


if __name__ == "__main__":
    main()
