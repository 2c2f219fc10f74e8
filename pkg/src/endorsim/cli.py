"""Command-line front end.

Exit codes: 0 success, 2 input or configuration error, 3 numerical
non-convergence.
"""

import argparse
import glob
import os
import sys

import numpy as np

from . import config as config_mod
from .calibration import (
    ESR_MODES, fit_esr_peaks, fit_nmr_peaks, recursive_calibration,
)
from .config import ConfigError
from .dataset import DatasetConfig, make_dataset
from .errors import CalibrationStageError, DegenerateSpectrumError, DegenerateSteadyStateError, FitNotConverged
from .fileio import atomic_write_text, read_spectrum, write_json, write_map, write_spectrum, write_table
from .lineshapes import (
    add_noise, boltzmann_populations, column_mean_subtracted, synth_endor_map, synth_endor_spectrum,
    synth_esr_spectrum,
)
from .calibration import _jsonable
from .spinmodel import diagonalize, esr_frequencies, field_sweep, transition_catalog

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 2, 3


class InputError(Exception):
    pass


def _grid(text):
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise InputError(f"grid {text!r} must look like START:STOP:STEP") from None
    if step <= 0 or stop <= start:
        raise InputError(f"grid {text!r} must be ascending with a positive step")
    return np.round(np.arange(start, stop + step / 2, step), 10)


def _out(cfg, path, default):
    return path or os.path.join(cfg.output_dir, default)


def _field(cfg, b_z):
    return cfg.field if b_z is None else cfg.field.with_bz(b_z)


def _mi_text(m):
    return f"{int(round(2 * m))}/2"


# -- commands ----------------------------------------------------------------

def cmd_predict(cfg, args):
    fld = _field(cfg, args.b_z)
    sol = diagonalize(cfg.spin_system, fld)
    rows = []
    for ln in transition_catalog(sol, args.channel, args.weight_floor):
        label = ln.label
        if label is None and args.channel == "esr":
            label = f"esr m_I={_mi_text(ln.m_i)}"
        rows.append([label or "", ln.frequency, ln.oriented_frequency, ln.weight,
                     ln.from_state[0], ln.from_state[1], ln.to_state[0], ln.to_state[1]])
    path = _out(cfg, args.out, f"lines_{args.channel}.csv")
    write_table(path, ["label", "frequency_MHz", "oriented_MHz", "weight", "from_ms", "from_mi",
                       "to_ms", "to_mi"], rows)
    print(f"{len(rows)} line(s) at b_z={fld.b_z} T -> {path}")
    return EXIT_OK


def cmd_sweep(cfg, args):
    if not args.b_start < args.b_end:
        raise InputError("b_start must be below b_end")
    if args.steps < 2:
        raise InputError("steps must be at least 2")
    grid = np.linspace(args.b_start, args.b_end, args.steps)
    sw = field_sweep(cfg.spin_system, cfg.field, grid)
    header = ["b_z_T"] + [f"E[{_mi_text(ms)},{_mi_text(mi)}]_MHz" for ms, mi in sw.labels]
    nmr_tags = list(sw.nmr)
    header += [f"nmr_{t}_MHz" for t in nmr_tags] + [f"esr_mI={_mi_text(m)}_MHz" for m in sw.esr]
    header += ["hybridization"]
    rows = []
    for k, b in enumerate(grid):
        row = [float(b)] + list(sw.energies[k])
        row += [sw.nmr[t][k] for t in nmr_tags] + [sw.esr[m][k] for m in sw.esr]
        row.append(sw.hybridization[k])
        rows.append(row)
    path = _out(cfg, args.out, "sweep.csv")
    write_table(path, header, rows)
    print(f"{len(rows)} field point(s) -> {path}")
    return EXIT_OK


def cmd_simulate(cfg, args):
    s, fld, ls = cfg.spin_system, _field(cfg, args.b_z), cfg.lineshape
    pump = cfg.pump if args.nmr_drive is None else cfg.pump.with_(omega_nmr=args.nmr_drive)
    seed = cfg.seed if args.seed is None else args.seed
    lines = esr_frequencies(s, fld)
    transfer = cfg.transfer()
    meta = {"seed": seed}
    if args.mode == "esr":
        f0 = np.mean([ln.frequency for ln in lines])
        grid = _grid(args.grid) if args.grid else np.arange(np.round(f0) - 450, np.round(f0) + 451, 1.0)
        pops = boltzmann_populations(s.i_nuclear, args.temperature_k, s.a_hyperfine[2])
        spec = synth_esr_spectrum(s, fld, pops, grid, ls.esr_fwhm_mhz, ls.esr_shape, ls.fano_q,
                                  meta=meta)
    elif args.mode == "endor":
        grid = _grid(args.grid or "30:100:0.25")
        f_esr = lines[0].frequency if args.f_esr is None else args.f_esr
        try:
            spec = synth_endor_spectrum(s, fld, f_esr, grid, pump, ls.esr_fwhm_mhz, ls.nmr_fwhm_mhz,
                                        args.off_resonant, meta=meta, transfer=transfer)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    else:
        f_nmr = _grid(args.grid or "30:100:0.5")
        if args.f_esr_grid:
            f_esr = _grid(args.f_esr_grid)
        else:
            f_esr = np.arange(np.floor(lines[0].frequency) - 40, np.ceil(lines[2].frequency) + 41, 2.0)
        m = synth_endor_map(s, fld, f_esr, f_nmr, pump, ls.esr_fwhm_mhz, ls.nmr_fwhm_mhz, transfer)
        if args.noise_sigma:
            rng = np.random.default_rng(seed)
            m = m + args.noise_sigma * rng.standard_normal(m.shape)
        path = _out(cfg, args.out, "endor_map.csv")
        root, ext = os.path.splitext(path)
        write_map(path, f_nmr, f_esr, m)
        write_map(f"{root}_centered{ext or '.csv'}", f_nmr, f_esr, column_mean_subtracted(m))
        print(f"map {m.shape[0]}x{m.shape[1]} -> {path}")
        return EXIT_OK
    if args.noise_sigma:
        spec = add_noise(spec, args.noise_sigma, seed)
    path = _out(cfg, args.out, f"{args.mode}.csv")
    write_spectrum(path, spec)
    print(f"{args.mode} spectrum with {len(spec)} points -> {path}")
    return EXIT_OK


def _peak_report(kind, peaks, extra=None):
    if kind == "esr":
        table = [{"center_MHz": p.center, "width_MHz": p.width, "q": p.asymmetry_q,
                  "amplitude": p.amplitude, "center_sigma_MHz": s}
                 for p, s in zip(peaks.fano_params, peaks.center_sigmas)]
        rep = {"kind": "esr", "b_z": peaks.b_z, "mode": peaks.mode, "f0_MHz": peaks.center_f0,
               "f0_sigma_MHz": peaks.f0_sigma, "spacing_MHz": peaks.spacing,
               "residual_rms": peaks.fit_quality, "noise_estimate": peaks.noise,
               "background": list(peaks.background), "converged": peaks.converged, "peaks": table}
    else:
        table = [{"label": lab, "center_MHz": p.center, "fwhm_MHz": p.fwhm, "amplitude": p.amplitude,
                  "center_sigma_MHz": u}
                 for lab, p, u in zip(peaks.labels, peaks.lorentzian_params, peaks.uncertainties)]
        rep = {"kind": "nmr", "b_z": peaks.b_z, "residual_rms": peaks.fit_quality,
               "noise_estimate": peaks.noise, "background": list(peaks.background),
               "converged": peaks.converged, "peaks": table}
    rep.update(extra or {})
    return _jsonable(rep)


def cmd_fit(cfg, args):
    try:
        spec = read_spectrum(args.input)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    path = _out(cfg, args.out, f"fit_{args.kind}.json")
    warnings = []
    try:
        if args.kind == "esr":
            n = args.n_peaks or int(round(2 * cfg.spin_system.i_nuclear + 1))
            peaks = fit_esr_peaks(spec, n, args.mode, spacing_guess=args.spacing_guess)
        else:
            n = args.n_peaks or 4
            sys_ = fld = None
            if "b_z" in spec.meta:
                sys_, fld = cfg.spin_system, cfg.field.with_bz(float(spec.meta["b_z"]))
            peaks = fit_nmr_peaks(spec, n, sys_, fld)
    except FitNotConverged as exc:
        best = exc.result
        rep = {"kind": args.kind, "converged": False, "message": str(exc)}
        if best is not None and hasattr(best, "b_z"):
            rep = _peak_report(args.kind, best, {"converged": False, "message": str(exc)})
        write_json(path, _jsonable(rep))
        print(f"fit did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    if peaks.noise > 0 and peaks.fit_quality > 3 * peaks.noise:
        warnings.append(f"residual rms {peaks.fit_quality:.3g} exceeds 3x the noise estimate "
                        f"{peaks.noise:.3g}; the peak count may be wrong")
    write_json(path, _peak_report(args.kind, peaks, {"warnings": warnings}))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{args.kind} fit -> {path}")
    return EXIT_OK


def _load_spectra(pattern, what):
    files = sorted(glob.glob(pattern)) if pattern else []
    out = []
    for fn in files:
        try:
            spec = read_spectrum(fn)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
        if "b_z" not in spec.meta:
            raise InputError(f"{fn}: missing b_z metadata")
        out.append(spec)
    if pattern and not files and what == "ESR":
        raise InputError(f"no {what} files match {pattern!r}")
    return out


def _calibrated_config(cfg, res):
    s = cfg.spin_system
    g = res.g_e_z.value
    ax, ay, az = s.a_hyperfine
    s = s.with_(g_e=(g, g, g), a_hyperfine=(ax, ay, res.a_z.value if res.a_z else az),
                kappa=res.kappa.value if res.kappa else s.kappa)
    f = cfg.field
    if res.b_tip is not None:
        f = f.with_(b_tip=res.b_tip.value, phi=res.phi.value)
    return config_mod.RunConfig(s, f, cfg.pump, cfg.lineshape, cfg.transfer_table, cfg.output_dir,
                                cfg.seed)


def cmd_calibrate(cfg, args):
    esr = _load_spectra(args.esr, "ESR")
    nmr = _load_spectra(args.nmr, "NMR")
    out_dir = args.out_dir or cfg.output_dir
    lit = {"a_z_init": args.a_z_init, "g_n": args.g_n, "kappa_init": args.kappa_init}
    try:
        res = recursive_calibration(esr, nmr, lit, template=cfg.spin_system, field_template=cfg.field,
                                    esr_mode=args.mode)
    except CalibrationStageError as exc:
        rep = exc.partial.to_dict() if exc.partial is not None else {}
        rep.update(failed_stage=exc.stage, message=str(exc.cause))
        write_json(os.path.join(out_dir, "calibration.json"), rep)
        print(f"calibration stopped: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    rep = res.to_dict()
    write_json(os.path.join(out_dir, "calibration.json"), rep)
    for stage, rows in res.stage_residuals.items():
        if rows:
            keys = list(rows[0])
            write_table(os.path.join(out_dir, f"residuals_{stage}.csv"), keys,
                        [[_cell(r[k]) for k in keys] for r in rows])
    if res.g_e_z is not None:
        atomic_write_text(os.path.join(out_dir, "calibrated_config.yaml"),
                          config_mod.dump(_calibrated_config(cfg, res)))
    status = "converged" if res.converged else ("partial" if res.partial else "not converged")
    print(f"calibration {status} after {res.iterations} iteration(s) -> {out_dir}")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def _cell(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(str(x) for x in np.asarray(v).tolist())
    return v


def cmd_make_dataset(cfg, args):
    dcfg = DatasetConfig(noise_fraction=args.noise_fraction, seed=args.seed)
    ds = make_dataset(dcfg, cfg.spin_system, cfg.field)
    out_dir = args.out_dir or os.path.join(cfg.output_dir, "dataset")
    for spec in ds.esr:
        write_spectrum(os.path.join(out_dir, f"esr_{spec.meta['b_z']:.3f}T.csv"), spec)
    for spec in ds.nmr:
        write_spectrum(os.path.join(out_dir, f"endor_{spec.meta['b_z']:.3f}T.csv"), spec)
    print(f"{len(ds.esr)} ESR + {len(ds.nmr)} ENDOR spectra -> {out_dir}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="endorsim", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"YAML run configuration (default: ${config_mod.CONFIG_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("predict", help="transition table at one field")
    sp.add_argument("--channel", choices=("esr", "nmr", "all"), default="nmr")
    sp.add_argument("--b-z", type=float, help="external field along z (T)")
    sp.add_argument("--weight-floor", type=float, default=1e-3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("sweep", help="energies and transitions over a field range")
    sp.add_argument("--b-start", type=float, default=0.2)
    sp.add_argument("--b-end", type=float, default=1.4)
    sp.add_argument("--steps", type=int, default=25)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("simulate", help="synthetic ESR, ENDOR or ENDOR-map data")
    sp.add_argument("--mode", choices=("esr", "endor", "endor-map"), default="esr")
    sp.add_argument("--b-z", type=float)
    sp.add_argument("--grid", help="frequency grid START:STOP:STEP in MHz (f_nmr for ENDOR)")
    sp.add_argument("--f-esr", type=float, help="fixed ESR frequency for ENDOR (MHz)")
    sp.add_argument("--f-esr-grid", help="f_esr axis of an ENDOR map, START:STOP:STEP")
    sp.add_argument("--off-resonant", action="store_true", help="allow an f_esr away from every line")
    sp.add_argument("--nmr-drive", type=float, help="NMR drive rate (1/s), overrides the config")
    sp.add_argument("--temperature-k", type=float, default=0.025,
                    help="effective temperature of the ESR line heights")
    sp.add_argument("--noise-sigma", type=float, default=0.0)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="peak fit of one spectrum file")
    sp.add_argument("--kind", choices=("esr", "nmr"), required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--n-peaks", type=int)
    sp.add_argument("--mode", choices=ESR_MODES, default=ESR_MODES[0])
    sp.add_argument("--spacing-guess", type=float, default=130.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("calibrate", help="recursive calibration from spectrum files")
    sp.add_argument("--esr", required=True, help="glob of ESR spectrum files")
    sp.add_argument("--nmr", help="glob of ENDOR spectrum files")
    sp.add_argument("--a-z-init", type=float, default=130.0)
    sp.add_argument("--g-n", type=float, default=0.315)
    sp.add_argument("--kappa-init", type=float, default=-50.0)
    sp.add_argument("--mode", choices=ESR_MODES, default=ESR_MODES[0])
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("make-dataset", help="write the synthetic multi-field dataset")
    sp.add_argument("--out-dir")
    sp.add_argument("--noise-fraction", type=float, default=DatasetConfig.noise_fraction)
    sp.add_argument("--seed", type=int, default=DatasetConfig.seed)
    sp.set_defaults(func=cmd_make_dataset)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = config_mod.load(args.config)
        return args.func(cfg, args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateSpectrumError, DegenerateSteadyStateError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
