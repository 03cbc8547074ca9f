"""Sectioned key = value run-configuration files.

The format is diff-friendly plain text: `[section]` headers, one `key = value`
per line, `#` comments. Values round-trip exactly (floats are written with
shortest round-trip repr); the strings `auto` for alpha, lambda and
smoothing_h mean "derive at run time". ``config_hash`` is the sha256 of the
canonical serialization, so equal hashes mean equal configs.
"""

from __future__ import annotations

import configparser
import hashlib
import math

from .core import RunConfig

__all__ = ["config_to_text", "parse_config", "load_config", "save_config",
           "config_hash"]

_SCHEMA = {
    "scenario": [("kind", "scenario", str), ("eps0", "eps0", float),
                 ("m", "M", float), ("q", "q", float), ("seed", "seed", int)],
    "constants": [("beta", "beta", float), ("alpha", "alpha", "auto_float"),
                  ("lambda", "lam", "auto_float")],
    "discretization": [
        ("particles_per_shell", "particles_per_shell", int),
        ("k_max", "k_max", int),
        ("t_final", "t_final", float),
        ("n_t", "n_t", int),
        ("box_radius", "box_radius", float),
        ("n_x", "n_x", int),
        ("ode_tol", "ode_tol", float),
        ("push_step", "push_step", float),
        ("root_tol", "root_tol", float),
        ("knot_spacing", "knot_spacing", float),
        ("sphere_nodes_polar", "sphere_nodes_polar", int),
        ("sphere_nodes_azimuth", "sphere_nodes_azimuth", int),
        ("v_nodes_radial", "v_nodes_radial", int),
        ("v_nodes_polar", "v_nodes_polar", int),
        ("v_nodes_azimuth", "v_nodes_azimuth", int),
        ("r_min_factor", "r_min_factor", float),
        ("smoothing_h", "smoothing_h", "auto_float"),
        ("support_cfactor", "support_cfactor", float),
        ("field_extension", "field_extension", str),
        ("tail_tol", "tail_tol", float),
    ],
    "iteration": [
        ("max_iterations", "max_iterations", int),
        ("convergence_threshold", "convergence_threshold", float),
        ("norm_probes", "norm_probes", int),
        ("pair_probes", "pair_probes", int),
    ],
    "output": [("decay_times", "decay_times", "floats")],
}


def _fmt(value, kind) -> str:
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "auto_float":
        return "auto" if (isinstance(value, float) and math.isnan(value)) else repr(float(value))
    if kind is float:
        return repr(float(value))
    return str(value)


def _parse(text: str, kind):
    text = text.strip()
    if kind == "floats":
        return tuple(float(v) for v in text.split(",") if v.strip())
    if kind == "auto_float":
        return float("nan") if text.lower() == "auto" else float(text)
    if kind is float:
        return float(text)
    if kind is int:
        return int(text)
    return text


def config_to_text(cfg: RunConfig) -> str:
    lines = ["# rvm run configuration"]
    for section, entries in _SCHEMA.items():
        lines.append("")
        lines.append(f"[{section}]")
        for key, attr, kind in entries:
            lines.append(f"{key} = {_fmt(getattr(cfg, attr), kind)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string(text)
    kwargs = {}
    for section, entries in _SCHEMA.items():
        if not parser.has_section(section):
            continue
        known = {key: (attr, kind) for key, attr, kind in entries}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown config key [{section}] {key}")
            attr, kind = known[key]
            try:
                kwargs[attr] = _parse(raw, kind)
            except ValueError as exc:
                raise ValueError(f"bad value for [{section}] {key}: {raw!r}") from exc
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()
