"""Flat INI-style experiment configuration with strict validation.

Example::

    [experiment]
    name = corrector

    [lattice]
    dim = 2
    side = 32
    boundary = periodic

    [law]
    law = bernoulli(0.75)
    alpha = 0.5

    [seeds]
    base = 1
    count = 4

    [params]
    tolerance = 1e-8

    [output]
    dir = runs/corrector
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field

from ..env import parse_law

EXPERIMENTS = ("percolation", "corrector", "clt", "heatkernel", "nash", "distances")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, check, description of the valid range)
_pos = (lambda v: v > 0, "> 0")
_nonneg = (lambda v: v >= 0, ">= 0")
_unit = (lambda v: 0 <= v <= 1, "in [0, 1]")
_any = (lambda v: True, "")

COMMON = {
    "lattice": {
        "dim": (int, 2, (lambda v: 1 <= v <= 4, "in [1, 4]")),
        "side": (int, 32, (lambda v: v >= 2, ">= 2")),
        "boundary": (str, "periodic", (lambda v: v in ("periodic", "free"), "periodic or free")),
    },
    "law": {
        "law": (str, None, _any),
        "alpha": (float, 0.5, (lambda v: 0 <= v <= 1, "in [0, 1]")),
    },
    "seeds": {
        "base": (int, 0, _nonneg),
        "count": (int, 1, (lambda v: v >= 1, ">= 1")),
    },
    "output": {
        "dir": (str, "rcmlab-out", _any),
        "dump_fields": (_bool, False, _any),
    },
}

PARAMS = {
    "percolation": {
        "tail_mode": (str, "site", (lambda v: v in ("site", "origin"), "site or origin")),
        "block_size": (int, 0, _nonneg),
    },
    "corrector": {
        "tolerance": (float, 1e-8, (lambda v: 0 < v <= 1e-2, "in (0, 1e-2]")),
        "epsilons": (_floats, [0.05, 0.1], (lambda v: len(v) > 0 and all(e > 0 for e in v), "positive list")),
        "eps_delta": (_floats, [0.1, 0.5], (lambda v: len(v) == 2 and all(e > 0 for e in v), "two positive numbers")),
        "cocycle_pairs": (int, 4, _nonneg),
    },
    "clt": {
        "steps": (int, 1000, (lambda v: v >= 1, ">= 1")),
        "walks": (int, 1000, (lambda v: v >= 1, ">= 1")),
        "t": (float, 1.0, (lambda v: 0 < v <= 1, "in (0, 1]")),
        "tolerance": (float, 1e-8, (lambda v: 0 < v <= 1e-2, "in (0, 1e-2]")),
    },
    "heatkernel": {
        "n_list": (_ints, [10, 30, 100], (lambda v: len(v) > 0 and all(n >= 1 for n in v), "positive integers")),
        "samples": (int, 10000, (lambda v: v >= 1, ">= 1")),
    },
    "nash": {
        "t_max": (float, 10.0, _pos),
        "t_points": (int, 101, (lambda v: v >= 3, ">= 3")),
        "t_min": (float, 0.05, _pos),
        "nu": (float, 0.25, (lambda v: 0 < v < 0.5, "in (0, 1/2)")),
        "tolerance": (float, 1e-6, _pos),
    },
    "distances": {
        "radii": (_ints, [1, 2, 4], (lambda v: len(v) > 0 and all(r >= 1 for r in v), "positive integers")),
        "rho": (float, 0.1, _pos),
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    dim: int
    side: int
    boundary: str
    law: str
    alpha: float
    base_seed: int
    seed_count: int
    params: dict
    out_dir: str
    dump_fields: bool = False
    text: str = field(default="", repr=False)

    def as_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "lattice": {"dim": self.dim, "side": self.side, "boundary": self.boundary},
            "law": {"law": self.law, "alpha": self.alpha},
            "seeds": {"base": self.base_seed, "count": self.seed_count},
            "params": dict(sorted(self.params.items())),
            "output": {"dir": self.out_dir, "dump_fields": self.dump_fields},
        }

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.seed_count)]

    def law_object(self):
        return parse_law(self.law)


def _read(parser, section, key, spec, problems, where):
    conv, default, (check, desc) = spec
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        try:
            value = conv(raw)
        except (ValueError, TypeError):
            problems.append(f"{where}.{key}: cannot parse {raw!r}")
            return default
    else:
        if default is None:
            problems.append(f"{where}.{key}: missing required key")
            return None
        value = default
    if not check(value):
        problems.append(f"{where}.{key} = {value!r} out of range ({desc})")
    return value


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Validate a config; every violation is collected before raising."""
    parser = configparser.ConfigParser(strict=True, interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError([f"duplicate entry: {exc.message if hasattr(exc, 'message') else exc}"]) from None
    except configparser.Error as exc:
        raise ConfigError([f"syntax error: {exc}"]) from None
    problems: list[str] = []
    name = parser.get("experiment", "name", fallback=None) if parser.has_section("experiment") else None
    if experiment is not None:
        if name is not None and name != experiment:
            problems.append(f"experiment.name = {name!r} conflicts with requested {experiment!r}")
        name = experiment
    if name is None:
        problems.append("experiment.name: missing required key")
    elif name not in EXPERIMENTS:
        problems.append(f"experiment.name = {name!r} is not one of {', '.join(EXPERIMENTS)}")
    known = {"experiment": {"name"}, "params": set(PARAMS.get(name, {}))}
    known.update({s: set(keys) for s, keys in COMMON.items()})
    for section in parser.sections():
        if section not in known:
            problems.append(f"unknown section [{section}]")
            continue
        for key in parser.options(section):
            if key not in known[section]:
                problems.append(f"{section}.{key}: unknown key")
    values = {}
    for section, keys in COMMON.items():
        for key, spec in keys.items():
            values[(section, key)] = _read(parser, section, key, spec, problems, section)
    params = {}
    for key, spec in PARAMS.get(name, {}).items():
        params[key] = _read(parser, "params", key, spec, problems, "params")
    law = values[("law", "law")]
    if law is not None:
        try:
            parse_law(law)
        except ValueError as exc:
            problems.append(f"law.law: {exc}")
    if name == "nash" and params.get("t_min", 1) >= params.get("t_max", 0):
        problems.append("params.t_min must be below params.t_max")
    if name in ("corrector", "clt") and values[("lattice", "boundary")] != "periodic":
        problems.append(f"lattice.boundary must be periodic for the {name} experiment")
    if name == "percolation" and params.get("block_size"):
        k, side = params["block_size"], values[("lattice", "side")]
        if values[("lattice", "boundary")] != "free":
            problems.append("params.block_size needs lattice.boundary = free")
        elif side is not None and 3 * k > side - 1:
            problems.append(f"params.block_size = {k} too large: need 3 * block_size <= side - 1")
    if name == "distances" and params.get("radii") and values[("lattice", "side")]:
        quarter = values[("lattice", "side")] // 4
        if max(params["radii"]) > quarter:
            problems.append(f"params.radii must not exceed side // 4 = {quarter}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        experiment=name,
        dim=values[("lattice", "dim")],
        side=values[("lattice", "side")],
        boundary=values[("lattice", "boundary")],
        law=law,
        alpha=values[("law", "alpha")],
        base_seed=values[("seeds", "base")],
        seed_count=values[("seeds", "count")],
        params=params,
        out_dir=values[("output", "dir")],
        dump_fields=values[("output", "dump_fields")],
        text=text,
    )


def config_from_dict(d: dict) -> ExperimentConfig:
    """Rebuild a config from ``ExperimentConfig.as_dict`` output (used by replay)."""
    lines = [f"[experiment]\nname = {d['experiment']}\n"]
    for section in ("lattice", "law", "seeds", "params", "output"):
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            if isinstance(v, list):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return parse_config("\n".join(lines))
