"""Experiment configuration: a TOML file with one table per concern.

Sections: ``experiment`` (kind, output), ``triple`` (grid), ``admissibility``
(Morrey exponents), ``coefficients``, ``forcing``, ``initial``, ``noise``,
``scheme``, ``reports``.  ``load_config`` parses and validates; errors carry
the offending section and key.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

KINDS = ("resolvent-suite", "morrey-suite", "ito-suite", "energy",
         "stability", "gaussian-benchmark", "lp", "w1p", "sweep")

FIELD_KINDS = ("none", "constant", "gaussian_bump", "sin_mode",
               "band_limited", "inverse_norm_scalar", "inverse_norm_drift",
               "file")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names section and field."""


@dataclass
class ExperimentConfig:
    kind: str
    output_dir: str
    raw: dict = field(default_factory=dict)
    source_path: str | None = None
    source_bytes: bytes | None = None

    def section(self, name: str, required: bool = False) -> dict:
        sec = self.raw.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"missing required section [{name}]")
            return {}
        if not isinstance(sec, dict):
            raise ConfigError(f"section [{name}] must be a table")
        return sec

    def get(self, section: str, key: str, default=None, required: bool = False):
        sec = self.section(section, required=False)
        if key not in sec:
            if required:
                raise ConfigError(f"missing required field {section}.{key}")
            return default
        return sec[key]


_REQUIRED = {
    "resolvent-suite": [("triple", "dim")],
    "morrey-suite": [("triple", "dim"), ("admissibility", "r")],
    "ito-suite": [("noise", "dt")],
    "energy": [("triple", "dim"), ("noise", "dt"), ("noise", "t_final")],
    "stability": [("triple", "dim"), ("noise", "dt"), ("noise", "t_final"),
                  ("stability", "epsilons")],
    "gaussian-benchmark": [("benchmark", "dim"), ("benchmark", "times")],
    "lp": [("triple", "dim"), ("noise", "dt"), ("noise", "t_final"),
           ("reports", "p")],
    "w1p": [("triple", "dim"), ("noise", "dt"), ("noise", "t_final"),
            ("reports", "p")],
}


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Full structural validation; returns informational notes."""
    notes = []
    if cfg.kind not in KINDS:
        raise ConfigError(
            f"experiment.kind '{cfg.kind}' not one of {', '.join(KINDS)}")
    if cfg.kind == "sweep":
        base = cfg.get("sweep", "base_kind", required=True)
        if base not in KINDS or base == "sweep":
            raise ConfigError(f"sweep.base_kind '{base}' invalid")
        kind = base
    else:
        kind = cfg.kind
    for section, key in _REQUIRED.get(kind, []):
        cfg.get(section, key, required=True)
    tri = cfg.section("triple")
    if tri:
        m = tri.get("grid_points", 16)
        if m % 2 or m < 2:
            raise ConfigError("triple.grid_points must be even and >= 2")
        if tri.get("order", 1) not in (1, 2):
            raise ConfigError("triple.order must be 1 or 2")
    noise = cfg.section("noise")
    if noise:
        dt = noise.get("dt")
        t_final = noise.get("t_final")
        if dt is not None and t_final is not None:
            steps = t_final / dt
            if abs(steps - round(steps)) > 1e-9:
                raise ConfigError(
                    f"noise.t_final={t_final} is not an integer multiple of "
                    f"noise.dt={dt}")
    specs: list[tuple[str, dict]] = []
    initial = cfg.section("initial")
    if initial:
        specs.append(("initial", initial))
    for chan, spec in cfg.section("forcing").items():
        if isinstance(spec, dict):
            specs.append((f"forcing.{chan}", spec))
    for chan, spec in cfg.section("coefficients").items():
        if isinstance(spec, dict):
            if "kind" in spec:
                specs.append((f"coefficients.{chan}", spec))
            for part in ("singular", "bounded"):
                sub = spec.get(part)
                if isinstance(sub, dict):
                    specs.append((f"coefficients.{chan}.{part}", sub))
    for label, spec in specs:
        kind = spec.get("kind", "none")
        if kind not in FIELD_KINDS:
            raise ConfigError(f"{label}.kind '{kind}' unknown")
        if kind == "file":
            path = spec.get("path")
            if not path or not Path(path).exists():
                raise ConfigError(f"{label}: field file '{path}' does not exist")
            notes.append(f"{label} <- {path}")
    return notes


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(blob.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from exc
    exp = raw.get("experiment")
    if not isinstance(exp, dict):
        raise ConfigError(f"{path}: missing [experiment] table")
    kind = exp.get("kind")
    if kind is None:
        raise ConfigError(f"{path}: missing experiment.kind")
    cfg = ExperimentConfig(kind=kind, output_dir=exp.get("output_dir", "out"),
                           raw=raw, source_path=str(path), source_bytes=blob)
    validate_config(cfg)
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    exp = raw.get("experiment", {})
    cfg = ExperimentConfig(kind=exp.get("kind"),
                           output_dir=exp.get("output_dir", "out"), raw=raw)
    validate_config(cfg)
    return cfg


def override(raw: dict, dotted: str, value) -> dict:
    """Return a deep-copied dict with ``section.key[.subkey]`` replaced."""
    import copy

    out = copy.deepcopy(raw)
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out
