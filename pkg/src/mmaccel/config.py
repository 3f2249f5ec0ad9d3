"""Experiment configuration: JSON ingestion, validation, default resolution.

Every output artifact echoes the fully resolved configuration in its header,
so any result can be reproduced from the artifact alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .acceleration import AccelConfig
from .matching import MatchConfig
from .models import FeneModel, ornstein_uhlenbeck

KINDS = (
    "snapshot-matching",
    "moment-error-vs-L",
    "stress-error-vs-dt",
    "full-acceleration",
    "reference-run",
    "convergence-study",
)

DEFAULTS = {
    "dt_micro": 2e-4,
    "dt_macro_max": 1e-3,
    "micro_steps_per_burst": 1,
    "moments": 3,
    "horizon": 6.0,
    "particles": 10000,
    "replicates": 20,
    "seed": 0,
    "step_down": 0.5,
    "step_up": 1.2,
    "degeneracy_threshold": None,
    "degeneracy_check_interval": 10,
    "matching": {"operator": "KLD", "tolerance": 1e-9, "max_iterations": 5},
    "model": {"type": "fene", "b": 49.0, "weissenberg": 1.0,
              "kappa": {"kind": "constant", "value": 2.0}},
    "snapshot": {
        "prior_time": 1.0,
        "dt_grid": [1e-3, 5e-3, 2.5e-2, 5e-2, 7.5e-2, 1e-1],
        "moment_counts": [3, 5, 7],
        "operators": ["KLD", "L2D"],
        "max_moment_order": 20,
    },
    "convergence": {
        "dt_micro_grid": [2 ** -k for k in range(4, 9)],
        "dt_macro_grid": [0.2 / 2 ** k for k in range(5)],
        "initial_moments": [1.0, 2.0],
    },
}


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


def _merge(defaults, given):
    if not isinstance(given, dict):
        return given
    out = dict(defaults)
    for key, value in given.items():
        if key in defaults and isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value)
        else:
            out[key] = value
    return out


def build_model(model_cfg: dict):
    mtype = model_cfg.get("type")
    if mtype == "fene":
        kappa_cfg = model_cfg.get("kappa", {"kind": "constant", "value": 0.0})
        kind = kappa_cfg.get("kind")
        if kind == "constant":
            value = float(kappa_cfg["value"])
            kappa = lambda t: value
        elif kind == "sin-drive":
            scale = float(kappa_cfg.get("scale", 2.0))
            offset = float(kappa_cfg.get("offset", 1.1))
            kappa = lambda t: scale * (offset + np.sin(np.pi * t))
        else:
            raise ConfigError(f"model.kappa.kind: unknown kind {kind!r}")
        return FeneModel(float(model_cfg["b"]), float(model_cfg["weissenberg"]), kappa)
    if mtype == "ou":
        return ornstein_uhlenbeck()
    raise ConfigError(f"model.type: unknown model {mtype!r}")


@dataclass
class ExperimentSpec:
    kind: str
    resolved: dict  # full configuration after defaults, echoed in artifacts

    @property
    def replicates(self) -> int:
        return self.resolved["replicates"]

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    @property
    def particles(self) -> int:
        return self.resolved["particles"]

    def model(self):
        return build_model(self.resolved["model"])

    def match_config(self) -> MatchConfig:
        m = self.resolved["matching"]
        return MatchConfig(operator_kind=m["operator"], tolerance=m["tolerance"],
                           max_iterations=m["max_iterations"])

    def accel_config(self, **overrides) -> AccelConfig:
        r = self.resolved
        kwargs = dict(
            dt_micro=r["dt_micro"],
            dt_macro_max=r["dt_macro_max"],
            micro_steps=r["micro_steps_per_burst"],
            n_moments=r["moments"],
            horizon=r["horizon"],
            seed=r["seed"],
            match_config=self.match_config(),
            step_down=r["step_down"],
            step_up=r["step_up"],
            degeneracy_threshold=r["degeneracy_threshold"],
            degeneracy_check_interval=r["degeneracy_check_interval"],
        )
        kwargs.update(overrides)
        return AccelConfig(**kwargs)

    def header_lines(self) -> list:
        return [
            "# config: " + json.dumps(self.resolved, sort_keys=True),
            f"# seed: {self.seed}",
        ]


def validate_spec(resolved: dict) -> None:
    kind = resolved.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r}")
    if resolved["replicates"] < 1:
        raise ConfigError("replicates: must be at least 1")
    if resolved["particles"] < 1:
        raise ConfigError("particles: must be at least 1")
    if resolved["dt_micro"] <= 0:
        raise ConfigError("dt_micro: must be positive")
    K = resolved["micro_steps_per_burst"]
    if K < 1:
        raise ConfigError("micro_steps_per_burst: must be at least 1")
    if K * resolved["dt_micro"] > resolved["dt_macro_max"] * (1 + 1e-12):
        raise ConfigError("dt_macro_max: burst K*dt_micro exceeds dt_macro_max")
    if not (resolved["step_down"] < 1.0 < resolved["step_up"]):
        raise ConfigError("step_down/step_up: need step_down < 1 < step_up")
    if resolved["horizon"] <= 0:
        raise ConfigError("horizon: must be positive")
    m = resolved["matching"]
    if m["operator"] not in ("L2N", "KLD", "L2D"):
        raise ConfigError(f"matching.operator: unknown operator {m['operator']!r}")
    if m["operator"] == "L2D" and kind in ("full-acceleration",) \
            and resolved["degeneracy_threshold"] is None:
        raise ConfigError(
            "degeneracy_threshold: required for L2D runs (no standard default)")
    build_model(resolved["model"])


def resolve(config: dict) -> ExperimentSpec:
    if "kind" not in config:
        raise ConfigError("kind: missing required field")
    resolved = _merge(DEFAULTS, config)
    resolved["kind"] = config["kind"]
    validate_spec(resolved)
    return ExperimentSpec(kind=resolved["kind"], resolved=resolved)


def load_config(path) -> ExperimentSpec:
    with open(path) as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a JSON object")
    return resolve(raw)
