"""INI configuration files with unit suffixes.

Keys live in sections ``[model]``, ``[grid]``, ``[md]``, ``[scp]``,
``[vdmft]`` and ``[rabi]``; keys before the first header belong to
``[model]``. Values may carry a unit suffix::

    [model]
    a = 3 Angstrom
    omega_m = 440 meV
    Omega_m = 215 meV
    g = 4.3          # multiples of omega_m^3
    T = 300 K

Energies accept ``meV``, ``eV``, ``Ha``/``au``; lengths ``Angstrom``/``A``/
``bohr``/``au``; times ``fs``/``au``; temperatures ``K``. Bare numbers are
taken in the default unit listed in :data:`SCHEMA`.
"""

import configparser
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import units
from .errors import ConfigurationError
from .md import MdOptions
from .model import ModelParams
from .stencil import SUPPORTED_ORDERS
from .vdmft import VdmftOptions

# per-quantity unit tables: suffix -> factor to atomic units
_ENERGY = {"mev": units.mev_to_hartree(1.0), "ev": units.mev_to_hartree(1000.0), "ha": 1.0, "au": 1.0}
_LENGTH = {"angstrom": units.angstrom_to_bohr(1.0), "a": units.angstrom_to_bohr(1.0),
           "å": units.angstrom_to_bohr(1.0), "bohr": 1.0, "au": 1.0}
_TIME = {"fs": units.fs_to_au(1.0), "au": 1.0}
_RATE = {"1/fs": 1.0 / units.fs_to_au(1.0), "au": 1.0, "1/au": 1.0}
_TEMP = {"k": 1.0}
_NONE = {}

# (section, key) -> (kind, default unit or None, default value, required)
SCHEMA = {
    ("model", "a"): ("float", _LENGTH, "angstrom", None, True),
    ("model", "omega_m"): ("float", _ENERGY, "mev", None, True),
    ("model", "Omega_m"): ("float", _ENERGY, "mev", None, True),
    ("model", "g"): ("float", _NONE, None, None, True),
    ("model", "T"): ("float", _TEMP, "k", None, True),
    ("model", "omega_0"): ("float", _ENERGY, "mev", None, False),
    ("model", "eta"): ("float", _NONE, None, 0.0, False),
    ("model", "n_sites"): ("int", _NONE, None, 128, False),
    ("model", "stencil_order"): ("int", _NONE, None, 2, False),
    ("model", "matter_only"): ("bool", _NONE, None, False, False),
    ("grid", "n_omega"): ("int", _NONE, None, 4096, False),
    ("grid", "omega_max_factor"): ("float", _NONE, None, 3.0, False),
    ("grid", "delta"): ("float", _ENERGY, "mev", units.mev_to_hartree(1.0), False),
    ("grid", "n_k_path"): ("int", _NONE, None, 201, False),
    ("grid", "nk_local"): ("int", _NONE, None, 2048, False),
    ("md", "dt"): ("float", _TIME, "au", 4.0, False),
    ("md", "n_equil_steps"): ("int", _NONE, None, 8192, False),
    ("md", "n_prod_steps"): ("int", _NONE, None, 2**15, False),
    ("md", "n_trajectories"): ("int", _NONE, None, 100, False),
    ("md", "friction"): ("float", _RATE, "au", 1e-3, False),
    ("md", "seed"): ("int", _NONE, None, 20240901, False),
    ("md", "stride"): ("int", _NONE, None, 2, False),
    ("md", "window"): ("str", _NONE, None, "exponential", False),
    ("md", "batch_size"): ("int", _NONE, None, 25, False),
    ("md", "k_stride"): ("int", _NONE, None, 8, False),
    ("scp", "tol"): ("float", _NONE, None, 1e-8, False),
    ("scp", "mixing"): ("float", _NONE, None, 0.5, False),
    ("scp", "max_iter"): ("int", _NONE, None, 500, False),
    ("vdmft", "n_bath"): ("int", _NONE, None, 300, False),
    ("vdmft", "bath_tol"): ("float", _NONE, None, None, False),
    ("vdmft", "mixing"): ("float", _NONE, None, 0.5, False),
    ("vdmft", "max_iter"): ("int", _NONE, None, 8, False),
    ("vdmft", "min_iter"): ("int", _NONE, None, 1, False),
    ("vdmft", "tol_sigma"): ("float", _NONE, None, 1e-3, False),
    ("vdmft", "tol_spectrum"): ("float", _NONE, None, 0.05, False),
    ("vdmft", "smoothing_window"): ("int", _NONE, None, 41, False),
    ("vdmft", "smoothing_order"): ("int", _NONE, None, 3, False),
    ("vdmft", "dt"): ("float", _TIME, "au", 3.0, False),
    ("vdmft", "n_trajectories"): ("int", _NONE, None, 800, False),
    ("vdmft", "n_equil_steps"): ("int", _NONE, None, 2048, False),
    ("vdmft", "n_prod_steps"): ("int", _NONE, None, 2**15, False),
    ("rabi", "etas"): ("str", _NONE, None, "0.0:0.1:0.01", False),
    ("rabi", "tuning"): ("str", _NONE, None, "bare", False),
}
SECTIONS = tuple(dict.fromkeys(s for s, _ in SCHEMA))
REQUIRED = tuple(f"{s}.{k}" for (s, k), spec in SCHEMA.items() if spec[4])

_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(.*?)\s*$")


@dataclass
class RunConfig:
    """Resolved configuration: model parameters plus per-stage options."""

    params: ModelParams
    md: MdOptions
    vdmft: VdmftOptions
    scp: dict
    grid: dict
    rabi: dict
    resolved: dict = field(default_factory=dict)
    path: str = None

    def with_seed(self, seed):
        md = replace(self.md, seed=int(seed))
        vd = replace(self.vdmft, md=replace(self.vdmft.md, seed=int(seed)))
        resolved = {s: dict(v) if isinstance(v, dict) else v for s, v in self.resolved.items()}
        resolved["md"]["seed"] = int(seed)
        return replace(self, md=md, vdmft=vd, resolved=resolved)

    def with_threads(self, threads):
        md = replace(self.md, threads=int(threads))
        vd = replace(self.vdmft, md=replace(self.vdmft.md, threads=int(threads)))
        return replace(self, md=md, vdmft=vd)


def _line_numbers(text):
    """Map ``(section, key)`` to its 1-based line number."""
    lines = {}
    section = "model"
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip()
        lines[(section, key)] = n  # the last occurrence wins, as in the parser
    return lines


def _convert(section, key, raw, line):
    kind, table, default_unit, _, _ = SCHEMA[(section, key)]
    where = dict(key=f"{section}.{key}", line=line)
    if kind == "str":
        return raw.strip()
    if kind == "bool":
        val = raw.strip().lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}", **where)
    m = _NUMBER.match(raw)
    if not m:
        raise ConfigurationError(f"cannot parse number from {raw!r}", **where)
    number, suffix = m.group(1), m.group(2).lower()
    if kind == "int":
        if suffix or not re.fullmatch(r"[-+]?\d+", number):
            raise ConfigurationError(f"expected an integer, got {raw!r}", **where)
        return int(number)
    value = float(number)
    if suffix:
        if suffix not in table:
            allowed = ", ".join(sorted(table)) or "none (dimensionless)"
            raise ConfigurationError(f"bad unit {suffix!r}; allowed: {allowed}", **where)
        return value * table[suffix]
    return value * table[default_unit] if default_unit else value


def _parse_etas(spec, line):
    """``start:stop:step`` (inclusive stop) or a comma-separated list."""
    try:
        if ":" in spec:
            start, stop, step = (float(x) for x in spec.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return np.round(start + step * np.arange(n), 12)
        return np.array([float(x) for x in spec.split(",") if x.strip()])
    except ValueError:
        raise ConfigurationError(f"bad coupling list {spec!r}", key="rabi.etas", line=line) from None


def parse_etas(spec):
    return _parse_etas(spec, None)


def parse_config_text(text, path=None):
    lines = _line_numbers(text)
    # leading keys belong to [model]; strict=False merges a repeated header
    text = "[model]\n" + text
    cp = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"),
        strict=False,
        interpolation=None,
        default_section="\0defaults",
    )
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from None

    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigurationError(
                f"unknown section [{section}]; allowed: {', '.join(SECTIONS)}", key=section
            )
        for key, raw in cp.items(section):
            line = lines.get((section, key))
            if (section, key) not in SCHEMA:
                raise ConfigurationError(
                    f"unknown key {key!r} in [{section}]", key=f"{section}.{key}", line=line
                )
            values[(section, key)] = _convert(section, key, raw, line)

    missing = [f"{s}.{k}" for (s, k), spec in SCHEMA.items() if spec[4] and (s, k) not in values]
    if missing:
        raise ConfigurationError(f"missing required keys: {', '.join(missing)}", key=missing[0])
    for (s, k), spec in SCHEMA.items():
        values.setdefault((s, k), spec[3])

    def get(s, k):
        return values[(s, k)]

    def check(ok, s, k, msg):
        if not ok:
            raise ConfigurationError(f"{msg}, got {get(s, k)!r}", key=f"{s}.{k}", line=lines.get((s, k)))

    order = get("model", "stencil_order")
    check(order in SUPPORTED_ORDERS, "model", "stencil_order", f"stencil_order must be one of {SUPPORTED_ORDERS}")
    for s, k in [("model", "a"), ("model", "omega_m"), ("model", "T"), ("grid", "delta"),
                 ("md", "dt"), ("vdmft", "dt"), ("md", "friction")]:
        check(get(s, k) > 0, s, k, f"{k} must be positive")
    for s, k in [("model", "Omega_m"), ("model", "g"), ("model", "eta")]:
        check(get(s, k) >= 0, s, k, f"{k} must be non-negative")
    for s, k in [("model", "n_sites"), ("md", "n_trajectories"), ("vdmft", "n_trajectories"),
                 ("vdmft", "n_bath"), ("vdmft", "max_iter"), ("grid", "n_omega")]:
        check(get(s, k) >= 1, s, k, f"{k} must be at least 1")
    for s, k in [("scp", "mixing"), ("vdmft", "mixing")]:
        check(0 < get(s, k) <= 1, s, k, "mixing must lie in (0, 1]")
    check(get("md", "window") in ("exponential", "hann", "none"), "md", "window",
          "window must be exponential, hann or none")
    check(get("rabi", "tuning") in ("bare", "scp", "vdmft"), "rabi", "tuning",
          "tuning must be bare, scp or vdmft")
    win = get("vdmft", "smoothing_window")
    check(win == 0 or (win % 2 == 1 and win > get("vdmft", "smoothing_order")), "vdmft",
          "smoothing_window", "smoothing_window must be 0 (off) or odd and above the order")

    omega_m = get("model", "omega_m")
    params = ModelParams(
        a=get("model", "a"),
        omega_m=omega_m,
        Omega_m=get("model", "Omega_m"),
        g=get("model", "g") * omega_m**3,
        omega_0=get("model", "omega_0") or omega_m,
        eta=get("model", "eta"),
        T=get("model", "T"),
        n_sites=get("model", "n_sites"),
        stencil_order=order,
        matter_only=get("model", "matter_only"),
    )
    md = MdOptions(
        dt=get("md", "dt"),
        n_equil_steps=get("md", "n_equil_steps"),
        n_prod_steps=get("md", "n_prod_steps"),
        n_trajectories=get("md", "n_trajectories"),
        friction=get("md", "friction"),
        seed=get("md", "seed"),
        stride=get("md", "stride"),
        window=get("md", "window"),
        batch_size=get("md", "batch_size"),
    )
    imp_md = replace(
        md,
        dt=get("vdmft", "dt"),
        n_trajectories=get("vdmft", "n_trajectories"),
        n_equil_steps=get("vdmft", "n_equil_steps"),
        n_prod_steps=get("vdmft", "n_prod_steps"),
        batch_size=100,
    )
    smoothing = None
    if win:
        smoothing = {"window": win, "order": get("vdmft", "smoothing_order")}
    vd = VdmftOptions(
        n_omega=get("grid", "n_omega"),
        omega_max_factor=get("grid", "omega_max_factor"),
        delta=get("grid", "delta"),
        n_bath=get("vdmft", "n_bath"),
        bath_tol=get("vdmft", "bath_tol"),
        mixing=get("vdmft", "mixing"),
        max_iter=get("vdmft", "max_iter"),
        min_iter=get("vdmft", "min_iter"),
        tol_sigma=get("vdmft", "tol_sigma"),
        tol_spectrum=get("vdmft", "tol_spectrum"),
        nk_local=get("grid", "nk_local"),
        smoothing=smoothing,
        md=imp_md,
    )
    resolved = {s: {} for s in SECTIONS}
    for (s, k), v in values.items():
        resolved[s][k] = v
    resolved["model"]["omega_0"] = params.omega_0
    resolved["_units"] = "atomic units (Hartree, bohr, a.u. time); g in multiples of omega_m^3"
    return RunConfig(
        params=params,
        md=md,
        vdmft=vd,
        scp={"tol": get("scp", "tol"), "mixing": get("scp", "mixing"), "max_iter": get("scp", "max_iter")},
        grid={"n_k_path": get("grid", "n_k_path"), "delta": get("grid", "delta"),
              "k_stride": get("md", "k_stride")},
        rabi={"etas": _parse_etas(get("rabi", "etas"), lines.get(("rabi", "etas"))),
              "tuning": get("rabi", "tuning")},
        resolved=resolved,
        path=path,
    )


def parse_config(path):
    """Read and validate a configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


DEFAULT_CONFIG = """\
# Matter chain and cavity lattice at room temperature.
[model]
a = 3 Angstrom
omega_m = 440 meV
Omega_m = 215 meV
g = 4.3            # multiples of omega_m^3
T = 300 K
eta = 0.1
omega_0 = 440 meV

[grid]
n_omega = 4096
delta = 1 meV

[md]
n_trajectories = 100
seed = 20240901

[vdmft]
n_trajectories = 800

[rabi]
etas = 0.0:0.1:0.01
tuning = bare
"""
