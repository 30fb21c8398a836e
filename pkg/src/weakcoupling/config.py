"""Run configuration: ``[section]`` headers with flat ``key = value`` lines.

Every section and key has a documented type, default and range. Parsing
fills the defaults, so ``render`` echoes the complete configuration and
``parse_config(render(cfg)) == cfg``.
"""

import configparser
from dataclasses import dataclass, field
import re


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


SUBCOMMANDS = ("simulate-micro", "sample-shell", "tabulate-z", "estimate-gk",
               "tabulate-coefficients", "simulate-meso", "stationarity",
               "decay-rate", "converge")

# key: (kind, default, check); kinds: int, float, bool, str, floats, strs, or a
# tuple of allowed strings
_POS = ("> 0", lambda x: x > 0)
_NONNEG = (">= 0", lambda x: x >= 0)
_POS_ALL = ("all > 0", lambda xs: len(xs) > 0 and all(x > 0 for x in xs))
_NONNEG_ALL = ("all >= 0", lambda xs: len(xs) > 0 and all(x >= 0 for x in xs))
_SOURCES = ("harmonic", "table")

SCHEMA = {
    "run": {
        "command": (("",) + SUBCOMMANDS, "", None),
        "seed": ("int", 0, _NONNEG),
        "output_dir": ("str", "out", None),
    },
    "potential": {
        "ubar": (("harmonic", "softened"), "harmonic", None),
        "v": (("harmonic_v", "cosine_v"), "harmonic_v", None),
        "lam": ("float", 1.0, _POS),
        "kappa": ("float", 2.0, _POS),
    },
    "lattice": {
        "extents": ("ints", [2], _POS_ALL),
    },
    "simulate-micro": {
        "eps": ("float", 0.1, _NONNEG),
        "sigma": ("float", 1.0, _POS),
        "h": ("float", 1e-3, _POS),
        "t": ("float", 1.0, _POS),
        "record_stride": ("int", 10, _POS),
        "n_traj": ("int", 1, _POS),
        "energies": ("floats", [1.0, 1.0], _NONNEG_ALL),
        "observers": ("strs", ["E[0]", "E[1]", "H"], None),
        "checkpoint": ("bool", False, None),
    },
    "sample-shell": {
        "a": ("float", 1.0, _POS),
        "n": ("int", 10 ** 6, _POS),
    },
    "tabulate-z": {
        "grid": ("floats", [1.0], _NONNEG_ALL),
        "n": ("int", 10 ** 6, _POS),
        "method": (("mc", "quadrature"), "mc", None),
    },
    "estimate-gk": {
        "a1": ("float", 1.0, _NONNEG),
        "a2": ("float", 1.0, _NONNEG),
        "sigma": ("float", 1.0, _POS),
        "n_traj": ("int", 10000, _POS),
        "t_max": ("float", 20.0, _POS),
        "h": ("float", 1e-3, _POS),
        "record_stride": ("int", 20, _POS),
        "direct": ("bool", False, None),
        "tail_extrapolation": ("bool", False, None),
    },
    "tabulate-coefficients": {
        "grid": ("floats", [0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0], _NONNEG_ALL),
        "sigma": ("float", 1.0, _POS),
        "n_traj": ("int", 10000, _POS),
        "t_max": ("float", 20.0, _POS),
        "h": ("float", 1e-3, _POS),
        "record_stride": ("int", 20, _POS),
        "tail_extrapolation": ("bool", False, None),
    },
    "simulate-meso": {
        "e0": ("floats", [1.0, 1.0], _NONNEG_ALL),
        "source": (_SOURCES, "harmonic", None),
        "sigma": ("float", 1.0, _POS),
        "table": ("str", "", None),
        "h": ("float", 1e-3, _POS),
        "t": ("float", 1.0, _POS),
        "n_paths": ("int", 1, _POS),
        "record_stride": ("int", 10, _POS),
    },
    "stationarity": {
        "total": ("float", 2.0, _NONNEG),
        "beta": ("float", 1.0, _POS),
        "source": (_SOURCES, "harmonic", None),
        "sigma": ("float", 1.0, _POS),
        "table": ("str", "", None),
        "h": ("float", 1e-3, _POS),
        "n_samples": ("int", 10 ** 5, _POS),
        "n_paths": ("int", 1000, _POS),
    },
    "decay-rate": {
        "sigmas": ("floats", [0.25, 0.5, 1.0], _POS_ALL),
        "a": ("float", 1.0, _POS),
        "n_traj": ("int", 2000, _POS),
        "h": ("float", 1e-3, _POS),
    },
    "converge": {
        "eps_list": ("floats", [0.4, 0.2, 0.1], _POS_ALL),
        "t_macro": ("float", 1.0, _POS),
        "n_paths": ("int", 2000, _POS),
        "sigma": ("float", 1.0, _POS),
        "start": ("floats", [1.0, 1.0], _NONNEG_ALL),
        "source": (_SOURCES, "harmonic", None),
        "table": ("str", "", None),
        "h": ("float", 1e-3, _POS),
        "meso_h": ("float", 1e-3, _POS),
    },
}


@dataclass
class RunConfig:
    """Validated configuration: ``sections[name][key]`` with every default filled."""

    sections: dict = field(default_factory=dict)

    @property
    def command(self):
        return self.sections["run"]["command"]

    @property
    def seed(self):
        return self.sections["run"]["seed"]

    def __getitem__(self, name):
        return self.sections[name]


def defaults():
    return RunConfig({s: {k: (list(v[1]) if isinstance(v[1], list) else v[1])
                          for k, v in keys.items()} for s, keys in SCHEMA.items()})


def _convert(kind, raw, key, line):
    raw = raw.strip()
    try:
        if isinstance(kind, tuple):
            if raw not in kind:
                raise ConfigError(f"{key}: {raw!r} is not one of {[k for k in kind if k]}", line)
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "floats":
            return [float(x) for x in raw.split(",") if x.strip()]
        if kind == "ints":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "strs":
            return raw.split()
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}", line) from None
    raise AssertionError(kind)


def _line_map(text):
    """``(section, key) -> line`` and ``section -> line`` from the raw text."""
    lines, section = {}, None
    for n, row in enumerate(text.splitlines(), start=1):
        m = re.match(r"^\s*\[([^\]]+)\]", row)
        if m:
            section = m.group(1).strip()
            lines.setdefault(section, n)
            continue
        m = re.match(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]", row)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip()), n)
    return lines


def parse_config(text):
    """Parse and validate; raises ``ConfigError`` with the offending line."""
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    where = _line_map(text)
    cfg = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", where.get(section))
        for key, raw in parser.items(section):
            line = where.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line)
            kind, _, check = SCHEMA[section][key]
            value = _convert(kind, raw, key, line)
            if check is not None and not check[1](value):
                raise ConfigError(f"{key} = {raw.strip()} violates the range {check[0]}", line)
            cfg.sections[section][key] = value
    return cfg


def _render_value(kind, value):
    if kind == "float":
        return repr(float(value))
    if kind in ("floats", "ints"):
        return ", ".join(repr(v) for v in value)
    if kind == "strs":
        return " ".join(value)
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def render(cfg):
    """Complete text form; parses back to an equal ``RunConfig``."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (kind, _, _) in keys.items():
            out.append(f"{key} = {_render_value(kind, cfg.sections[section][key])}".rstrip())
        out.append("")
    return "\n".join(out)
