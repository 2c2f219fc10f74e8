"""YAML run configuration with units in key names.

Every section is optional; missing keys take the fitted parameter set of the
model atom. Unknown keys are rejected with their full path.
"""

from dataclasses import dataclass, field as dc_field
import os

import numpy as np
import yaml

from .lineshapes import ESR_FWHM, NMR_FWHM, load_transfer_table
from .pumping import PumpConfig
from .spinmodel import FieldConfig, SpinSystem, ti47_field, ti47_system

CONFIG_ENV = "ENDOR_CONFIG"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class LineshapeDefaults:
    esr_fwhm_mhz: float = ESR_FWHM
    nmr_fwhm_mhz: float = NMR_FWHM
    esr_shape: str = "fano"
    fano_q: float = 2.0

    def __post_init__(self):
        if not (self.esr_fwhm_mhz > 0 and self.nmr_fwhm_mhz > 0):
            raise ValueError("linewidths must be positive")
        if self.esr_shape not in ("fano", "lorentzian"):
            raise ValueError(f"esr_shape must be 'fano' or 'lorentzian', got {self.esr_shape!r}")


@dataclass(frozen=True)
class RunConfig:
    spin_system: SpinSystem = dc_field(default_factory=ti47_system)
    field: FieldConfig = dc_field(default_factory=ti47_field)
    pump: PumpConfig = dc_field(default_factory=lambda: PumpConfig(omega_esr=1e6))
    lineshape: LineshapeDefaults = dc_field(default_factory=LineshapeDefaults)
    transfer_table: str = None
    output_dir: str = "."
    seed: int = 0

    def transfer(self):
        return None if self.transfer_table is None else load_transfer_table(self.transfer_table)


_SPIN_KEYS = {
    "s_electron": "s_electron", "i_nuclear": "i_nuclear", "g_e": "g_e", "g_n": "g_n",
    "a_hyperfine_mhz": "a_hyperfine", "kappa_mhz": "kappa", "eta": "eta",
}
_FIELD_KEYS = {"b_ext_tesla", "b_tip_tesla", "phi_deg", "theta_deg", "tip_couples_nucleus"}
_PUMP_KEYS = {
    "gamma_e_down_per_s": "gamma_e_down", "gamma_e_up_per_s": "gamma_e_up",
    "gamma_ff_per_s": "gamma_ff", "ff_asymmetry": "ff_asymmetry",
    "omega_esr_per_s": "omega_esr", "omega_nmr_per_s": "omega_nmr",
    "esr_pair": "esr_pair", "nmr_pair": "nmr_pair",
}
_TOP_KEYS = {"spin_system", "field", "pump", "lineshape", "transfer_table", "output_dir", "seed"}


def _check_keys(section, data, allowed):
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")
    return data


def _build(section, cls, kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _pair(section, value):
    if value is None:
        return None
    try:
        (a, b), (c, d) = value
        return ((float(a), float(b)), (float(c), float(d)))
    except (TypeError, ValueError):
        raise ConfigError(f"{section}: expected [[m_s, m_I], [m_s, m_I]]") from None


def from_dict(data):
    data = _check_keys("config", data or {}, _TOP_KEYS)
    base = RunConfig()

    spin = _check_keys("spin_system", data.get("spin_system"), _SPIN_KEYS)
    spin_kw = {_SPIN_KEYS[k]: v for k, v in spin.items()}
    spin_sys = _build("spin_system", SpinSystem, {**base.spin_system.__dict__, **spin_kw})

    fld = _check_keys("field", data.get("field"), _FIELD_KEYS)
    f = base.field
    field_kw = {
        "b_ext": fld.get("b_ext_tesla", f.b_ext),
        "b_tip": fld.get("b_tip_tesla", f.b_tip),
        "phi": np.deg2rad(fld["phi_deg"]) if "phi_deg" in fld else f.phi,
        "theta": np.deg2rad(fld["theta_deg"]) if "theta_deg" in fld else f.theta,
        "tip_couples_nucleus": bool(fld.get("tip_couples_nucleus", f.tip_couples_nucleus)),
    }
    field_cfg = _build("field", FieldConfig, field_kw)

    pump = _check_keys("pump", data.get("pump"), _PUMP_KEYS)
    pump_kw = {**base.pump.__dict__}
    for k, v in pump.items():
        name = _PUMP_KEYS[k]
        pump_kw[name] = _pair(f"pump.{k}", v) if name.endswith("_pair") else v
    pump_cfg = _build("pump", PumpConfig, pump_kw)

    shape = _check_keys("lineshape", data.get("lineshape"), LineshapeDefaults.__dataclass_fields__)
    shape_cfg = _build("lineshape", LineshapeDefaults, {**base.lineshape.__dict__, **shape})

    table = data.get("transfer_table")
    if table is not None:
        if not os.path.exists(table):
            raise ConfigError(f"transfer_table: file {table!r} not found")
        try:
            load_transfer_table(table)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"transfer_table: {exc}") from None
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a nonnegative integer")
    return RunConfig(spin_sys, field_cfg, pump_cfg, shape_cfg, table,
                     str(data.get("output_dir", ".")), seed)


def to_dict(cfg):
    s, f, p, ls = cfg.spin_system, cfg.field, cfg.pump, cfg.lineshape
    return {
        "spin_system": {
            "s_electron": s.s_electron, "i_nuclear": s.i_nuclear, "g_e": list(s.g_e),
            "g_n": s.g_n, "a_hyperfine_mhz": list(s.a_hyperfine), "kappa_mhz": s.kappa,
            "eta": s.eta,
        },
        "field": {
            "b_ext_tesla": list(f.b_ext), "b_tip_tesla": f.b_tip,
            "phi_deg": float(np.rad2deg(f.phi)), "theta_deg": float(np.rad2deg(f.theta)),
            "tip_couples_nucleus": f.tip_couples_nucleus,
        },
        "pump": {
            "gamma_e_down_per_s": p.gamma_e_down, "gamma_e_up_per_s": p.gamma_e_up,
            "gamma_ff_per_s": p.gamma_ff, "ff_asymmetry": p.ff_asymmetry,
            "omega_esr_per_s": p.omega_esr, "omega_nmr_per_s": p.omega_nmr,
            "esr_pair": None if p.esr_pair is None else [list(x) for x in p.esr_pair],
            "nmr_pair": None if p.nmr_pair is None else [list(x) for x in p.nmr_pair],
        },
        "lineshape": dict(ls.__dict__),
        "transfer_table": cfg.transfer_table,
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
    }


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def dump(cfg):
    return yaml.safe_dump(_plain(to_dict(cfg)), sort_keys=False)


def load(path=None):
    """Load ``path``, else the file named by $ENDOR_CONFIG, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path!r} is not valid YAML: {exc}") from None
    return from_dict(data)


__all__ = ["CONFIG_ENV", "ConfigError", "LineshapeDefaults", "RunConfig", "dump", "from_dict",
           "load", "to_dict"]
