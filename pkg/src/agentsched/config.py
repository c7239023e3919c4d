"""Experiment configuration: one JSON file describing workload, engine,
policy, controller, scheduler constants, ablations, and seeds.

Every output artifact embeds the configuration hash so downstream tooling
can refuse to compare runs that were not produced by compatible setups.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .baselines import POLICY_KINDS
from .control import ControllerConfig
from .metrics import GoodputConfig
from .scheduler import MlfqConfig, RetentionConfig
from .sim import EngineParams
from .telemetry import PressureConfig
from .workload import RegimeConfig, WorkloadConfigError, regime_preset


class ConfigError(ValueError):
    """A configuration file is missing a section or carries a bad field."""


@dataclass(frozen=True)
class AblationFlags:
    coordinator: bool = True
    coscheduler: bool = True
    control_plane: bool = True


@dataclass
class ExperimentConfig:
    engine: EngineParams
    policy_kind: str
    regime: Optional[RegimeConfig] = None
    trace_path: Optional[str] = None
    policy_params: Dict[str, object] = field(default_factory=dict)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    mlfq: MlfqConfig = field(default_factory=MlfqConfig)
    retention: RetentionConfig = field(default_factory=RetentionConfig)
    pressure: PressureConfig = field(default_factory=PressureConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    goodput: GoodputConfig = field(default_factory=lambda: GoodputConfig(slo_slack_alpha=3.0, window_s=60.0))
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: Optional[str] = None

    def validate(self) -> None:
        if self.regime is None and self.trace_path is None:
            raise ConfigError("config needs a 'regime' section or a 'trace_path'")
        if self.policy_kind not in POLICY_KINDS:
            raise ConfigError(
                f"policy.kind {self.policy_kind!r} unknown; expected one of {POLICY_KINDS}"
            )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if self.regime is not None:
            try:
                self.regime.validate()
            except WorkloadConfigError as exc:
                raise ConfigError(f"regime: {exc}") from exc


_SECTION_TYPES = {
    "engine": EngineParams,
    "controller": ControllerConfig,
    "mlfq": MlfqConfig,
    "retention": RetentionConfig,
    "pressure": PressureConfig,
    "ablation": AblationFlags,
}
_TUPLE_FIELDS = {
    "prompt_volume_range",
    "rounds_range",
    "decode_tokens_range",
    "level_boundaries_tokens",
    "level_quotas_tokens",
}
_KNOWN_TOP_LEVEL = {
    "regime",
    "trace_path",
    "engine",
    "policy",
    "controller",
    "mlfq",
    "retention",
    "pressure",
    "ablation",
    "goodput",
    "seeds",
    "output_dir",
}


def _build_section(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _build_regime(data: dict) -> RegimeConfig:
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        base = regime_preset(
            preset,
            arrival_rate=data.pop("arrival_rate", 0.25),
            request_count=data.pop("request_count", 200),
            seed=data.pop("seed", 0),
            rounds_range=tuple(data.pop("rounds_range", (2, 6))),
        )
        if not data:
            return base
        for key in data:
            if key in _TUPLE_FIELDS and isinstance(data[key], list):
                data[key] = tuple(data[key])
        try:
            return dataclasses.replace(base, **data)
        except TypeError as exc:
            raise ConfigError(f"regime: {exc}") from exc
    return _build_section(RegimeConfig, data, "regime")


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - _KNOWN_TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level section(s) {sorted(unknown)}")
    if "engine" not in raw:
        raise ConfigError("config needs an 'engine' section")
    if "policy" not in raw:
        raise ConfigError("config needs a 'policy' section")
    policy = raw["policy"]
    if "kind" not in policy:
        raise ConfigError("policy: missing 'kind'")

    cfg = ExperimentConfig(
        engine=_build_section(EngineParams, raw["engine"], "engine"),
        policy_kind=policy["kind"],
        policy_params=dict(policy.get("params", {})),
        regime=_build_regime(raw["regime"]) if "regime" in raw else None,
        trace_path=raw.get("trace_path"),
        controller=_build_section(ControllerConfig, raw.get("controller", {}), "controller"),
        mlfq=_build_section(MlfqConfig, raw.get("mlfq", {}), "mlfq"),
        retention=_build_section(RetentionConfig, raw.get("retention", {}), "retention"),
        pressure=_build_section(PressureConfig, raw.get("pressure", {}), "pressure"),
        ablation=_build_section(AblationFlags, raw.get("ablation", {}), "ablation"),
        goodput=_build_section(
            GoodputConfig,
            raw.get("goodput", {"slo_slack_alpha": 3.0, "window_s": 60.0}),
            "goodput",
        ),
        seeds=list(raw.get("seeds", [0])),
        output_dir=raw.get("output_dir"),
    )
    cfg.validate()
    return cfg


def load_experiment_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return experiment_from_dict(raw)


def _canonical(obj) -> object:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        for f in dataclasses.fields(obj):
            if f.name == "observer":
                continue
            out[f.name] = _canonical(getattr(obj, f.name))
        return out
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


def config_hash(config: ExperimentConfig) -> str:
    """Stable digest of the full experiment configuration."""
    blob = json.dumps(_canonical(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def substrate_hash(config: ExperimentConfig) -> str:
    """Digest of only the parts two runs must share to be comparable:
    workload source and engine geometry (policy and ablations excluded)."""
    part = {
        "engine": _canonical(config.engine),
        "regime": _canonical(config.regime) if config.regime else None,
        "trace_path": config.trace_path,
        "seeds": config.seeds,
    }
    blob = json.dumps(part, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
