"""Experiment configuration: a JSON document with a fixed schema.

Example::

    {
      "model": {"kind": "gaussian-mixture", "weights": [0.9, 0.1],
                "means": [[-4, 0], [4, 0]], "scales": [0.5, 0.5]},
      "energy": {"terms": [{"kind": "mixture-class", "component": 1}],
                 "weights": [1.0]},
      "guidance": {"rho_mode": "beta", "rho_base": 0.04},
      "schedule": {"T": 1000, "beta_min": 1e-4, "beta_max": 0.02},
      "seeds": [0, 1],
      "n_samples": 200,
      "trace_chains": 1,
      "out_dir": "runs/bimodal",
      "arms": {"r1": {}, "r3": {"travel_repeats": 3}},
      "thresholds": {"max_mean_energy": 5.0}
    }

Only ``model`` is required. ``energy`` may be omitted for unguided runs.
The config hash is the SHA-256 of the canonical encoding (sorted keys, no
whitespace) and is written into every output header.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .energy import EnergyError, EnergyStack, stack_from_dict
from .sampler import ConfigError, GuidanceConfig
from .schedule import NoiseSchedule, ScheduleError, make_linear_schedule
from .scores import ModelError, ScoreModel, model_from_dict

TOP_KEYS = {
    "model", "energy", "guidance", "schedule", "seeds", "n_samples",
    "trace_chains", "out_dir", "arms", "thresholds",
}
SCHEDULE_KEYS = {"T", "beta_min", "beta_max"}
GUIDANCE_KEYS = {
    "rho_mode", "rho_base", "travel_repeats", "stage_bounds", "repeats",
    "ddim_steps", "eta_ddim", "jacobian",
}
THRESHOLD_KEYS = {"max_mean_energy", "min_fraction_below", "energy_level"}


class ConfigurationError(ValueError):
    """Invalid configuration; ``key`` is a dotted path to the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(raw: dict) -> str:
    """sha256 of the canonical JSON; ``out_dir`` is excluded since it only
    says where results go, not what they are."""
    content = {k: v for k, v in raw.items() if k != "out_dir"}
    return hashlib.sha256(canonical_json(content).encode()).hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    model: ScoreModel
    stack: EnergyStack | None
    guidance: GuidanceConfig
    schedule: NoiseSchedule
    seeds: tuple = (0,)
    n_samples: int = 100
    trace_chains: int = 1
    out_dir: str = "out"
    arms: dict = field(default_factory=dict)  # name -> GuidanceConfig
    thresholds: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        if seed is not None:
            raw["seeds"] = [int(seed)]
        if out_dir is not None:
            raw["out_dir"] = str(out_dir)
        return parse_config(raw)

    def arm_configs(self) -> dict:
        return dict(self.arms) if self.arms else {"main": self.guidance}


def _check_keys(obj, allowed, prefix):
    if not isinstance(obj, dict):
        raise ConfigurationError(prefix or "<root>", "expected an object")
    for k in obj:
        if k not in allowed:
            raise ConfigurationError(f"{prefix}.{k}" if prefix else k, "unknown key")


def _guidance(spec, key, base: GuidanceConfig | None = None) -> GuidanceConfig:
    _check_keys(spec, GUIDANCE_KEYS, key)
    kw = dict(spec)
    if "stage_bounds" in kw:
        kw["stage_bounds"] = tuple(kw["stage_bounds"])
    if "repeats" in kw and kw["repeats"] is not None:
        kw["repeats"] = tuple(int(r) for r in kw["repeats"])
    try:
        return base.replace(**kw) if base is not None else GuidanceConfig(**kw)
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigurationError(key, str(exc)) from None


def _int(raw, key, default, lo=0):
    v = raw.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigurationError(key, f"expected an integer >= {lo}, got {v!r}")
    return v


def parse_config(raw: dict) -> ExperimentConfig:
    _check_keys(raw, TOP_KEYS, "")
    if "model" not in raw:
        raise ConfigurationError("model", "missing required key")
    try:
        model = model_from_dict(raw["model"])
    except (ModelError, KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError("model", _msg(exc)) from None

    stack = None
    if raw.get("energy") is not None:
        try:
            stack = stack_from_dict(raw["energy"], model)
        except (EnergyError, KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError("energy", _msg(exc)) from None
        if stack.dim != model.dim:
            raise ConfigurationError("energy", "term dimension does not match the model")

    sch = raw.get("schedule", {})
    _check_keys(sch, SCHEDULE_KEYS, "schedule")
    try:
        schedule = make_linear_schedule(**sch)
    except (ScheduleError, TypeError, ValueError) as exc:
        raise ConfigurationError("schedule", str(exc)) from None

    guidance = _guidance(raw.get("guidance", {}), "guidance")
    if guidance.repeats is not None and len(guidance.repeats) != schedule.T:
        raise ConfigurationError("guidance.repeats", f"needs {schedule.T} entries")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigurationError("seeds", "expected a nonempty list of integers")
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int) or not (0 <= s < 2**64):
            raise ConfigurationError(f"seeds[{i}]", f"expected a 64-bit unsigned integer, got {s!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError("seeds", "duplicate seeds")

    arms = {}
    arms_raw = raw.get("arms", {})
    if not isinstance(arms_raw, dict):
        raise ConfigurationError("arms", "expected an object mapping arm names to overrides")
    for name, over in arms_raw.items():
        if not name or any(c in name for c in "/\\ "):
            raise ConfigurationError(f"arms.{name}", "arm names must be nonempty without spaces or slashes")
        arms[name] = _guidance(over, f"arms.{name}", guidance)

    thr = raw.get("thresholds", {})
    _check_keys(thr, THRESHOLD_KEYS, "thresholds")
    if thr and stack is None:
        raise ConfigurationError("thresholds", "thresholds need an energy stack")

    out_dir = raw.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigurationError("out_dir", "expected a nonempty path string")

    return ExperimentConfig(
        raw=raw,
        model=model,
        stack=stack,
        guidance=guidance,
        schedule=schedule,
        seeds=tuple(seeds),
        n_samples=_int(raw, "n_samples", 100, lo=1),
        trace_chains=_int(raw, "trace_chains", 1),
        out_dir=out_dir,
        arms=arms,
        thresholds=dict(thr),
    )


def _msg(exc: Exception) -> str:
    if isinstance(exc, KeyError):
        return f"missing key {exc.args[0]!r}"
    return str(exc)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigurationError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)
