"""Scenario configuration: dataclasses, JSON loading and the E1/E2/E3 presets.

A scenario is one JSON document. Every section is optional; missing keys fall
back to the dataclass defaults below. See ``README.md`` for the full schema.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid scenario configuration. ``where`` names the offending field."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class ControlParams:
    w_sep: float = 1.0
    w_coh: float = 0.3
    w_align: float = 0.6
    w_goal: float = 0.5
    r_sep: float = 60.0
    r_coh: float = 150.0
    r_comm: float = 350.0
    v_max: float = 5.0
    a_max: float = 1.0
    slot_phase: float = 0.0  # radians added to every slot angle

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ConfigError("must be finite", f"control.{f.name}")
        for name in ("w_sep", "w_coh", "w_align", "w_goal"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"control.{name}")
        if not 0 < self.r_sep <= self.r_coh <= self.r_comm:
            raise ConfigError("need 0 < r_sep <= r_coh <= r_comm", "control")
        if self.v_max <= 0 or self.a_max <= 0:
            raise ConfigError("v_max and a_max must be > 0", "control")


@dataclass(frozen=True)
class TargetConfig:
    center: tuple[float, float, float] = (0.0, 0.0, 300.0)
    radius: float = 500.0
    height: float = 300.0
    n_slots: int = 10


@dataclass(frozen=True)
class DisturbanceConfig:
    kind: str = "none"  # none | storm | adversarial
    wind_base: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gust_theta: float = 0.1
    gust_sigma: float = 0.0
    gust_vertical: float = 1.0  # scale of the z-axis gust noise
    rain_drag: float = 0.0
    p_infect: float = 0.0
    spoof_offset_scale: float = 0.0
    spoof_speed: float = 10.0  # magnitude of the spoofed broadcast velocity
    malicious_ids: tuple[int, ...] = ()
    # the malicious aircraft chases a point orbiting the formation center
    malicious_orbit_radius: float = 420.0
    malicious_orbit_period: float = 500.0


@dataclass(frozen=True)
class ScoringParams:
    beta: float = 0.2
    gamma: float = 1.0


@dataclass(frozen=True)
class AdaptConfig:
    enabled: bool = True
    theta_deg: float = 60.0
    window: int = 150
    theta_accept: float = 70.0
    horizon: int = 200
    budget: int = 6
    backups: int = 2
    top_k_cases: int = 3
    cooldown: int = 100
    validation_latency: int = 5  # live frames that elapse while shadows run
    workers: int = 1


@dataclass(frozen=True)
class ModeratorConfig:
    kind: str = "scripted"  # scripted | external
    endpoint: str | None = None
    timeout: float = 30.0
    headers: dict[str, str] = field(default_factory=dict)
    max_request_bytes: int = 262_144


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str = "custom"
    n_aircraft: int = 10
    seed: int = 0
    target: TargetConfig = field(default_factory=TargetConfig)
    spawn_low: tuple[float, float, float] = (-450.0, -450.0, 260.0)
    spawn_high: tuple[float, float, float] = (450.0, 450.0, 340.0)
    goal_gain: float = 0.05  # desired speed per meter of slot error
    control: ControlParams = field(default_factory=ControlParams)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    scoring: ScoringParams = field(default_factory=ScoringParams)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    moderator: ModeratorConfig = field(default_factory=ModeratorConfig)
    use_ek: bool = True
    use_pc: bool = True
    eval_window: int = 500

    def validate(self) -> None:
        if self.scenario_id not in ("E1", "E2", "E3", "custom"):
            raise ConfigError(f"unknown scenario {self.scenario_id!r}", "scenario_id")
        if self.n_aircraft < 2:
            raise ConfigError("need at least 2 aircraft", "n_aircraft")
        t = self.target
        if t.n_slots != self.n_aircraft:
            raise ConfigError(
                f"n_slots={t.n_slots} but n_aircraft={self.n_aircraft}", "target.n_slots"
            )
        if not t.radius > 0:
            raise ConfigError("radius must be > 0", "target.radius")
        if any(lo > hi for lo, hi in zip(self.spawn_low, self.spawn_high)):
            raise ConfigError("spawn_low must not exceed spawn_high", "spawn")
        self.control.validate()
        d = self.disturbance
        if d.kind not in ("none", "storm", "adversarial"):
            raise ConfigError(f"unknown kind {d.kind!r}", "disturbance.kind")
        if not 0 <= d.p_infect <= 1:
            raise ConfigError("must be in [0, 1]", "disturbance.p_infect")
        if not 0 <= d.rain_drag < 1:
            raise ConfigError("must be in [0, 1)", "disturbance.rain_drag")
        if d.kind == "none" and (
            any(d.wind_base) or d.gust_sigma or d.rain_drag or d.p_infect
            or d.spoof_offset_scale or d.malicious_ids
        ):
            raise ConfigError("kind 'none' requires zero disturbance", "disturbance")
        for m in d.malicious_ids:
            if not 0 <= m < self.n_aircraft:
                raise ConfigError(f"malicious id {m} out of range", "disturbance.malicious_ids")
        if self.scoring.beta <= 0 or self.scoring.gamma <= 0:
            raise ConfigError("beta and gamma must be > 0", "scoring")
        a = self.adapt
        if a.theta_accept <= a.theta_deg:
            raise ConfigError("theta_accept must exceed theta_deg", "adapt.theta_accept")
        if a.window < 1 or a.horizon < 1 or a.budget < 1 or a.backups < 0:
            raise ConfigError("window, horizon, budget >= 1 and backups >= 0", "adapt")
        if self.eval_window < a.window:
            raise ConfigError("eval_window must be >= adapt.window", "eval_window")
        if self.moderator.kind not in ("scripted", "external"):
            raise ConfigError(f"unknown moderator {self.moderator.kind!r}", "moderator.kind")
        if self.moderator.kind == "external" and not self.moderator.endpoint:
            raise ConfigError("external moderator needs an endpoint", "moderator.endpoint")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# The storm's mean wind (~0.76 m/frame^2) beats the default goal authority
# (w_goal = 0.5), so an unadapted swarm is blown off station.
E2_DISTURBANCE = DisturbanceConfig(
    kind="storm",
    wind_base=(0.7, 0.3, 0.0),
    gust_sigma=0.25,
    gust_vertical=0.6,
    rain_drag=0.02,
)

E3_DISTURBANCE = DisturbanceConfig(
    kind="adversarial",
    p_infect=0.02,
    spoof_offset_scale=100.0,
    malicious_ids=(0,),
)

PRESETS: dict[str, ScenarioConfig] = {
    "E1": ScenarioConfig(scenario_id="E1"),
    # the storm catches the swarm still in transit, spread well outside the ring
    "E2": ScenarioConfig(
        scenario_id="E2",
        disturbance=E2_DISTURBANCE,
        spawn_low=(-1200.0, -1200.0, 200.0),
        spawn_high=(1200.0, 1200.0, 400.0),
    ),
    "E3": ScenarioConfig(scenario_id="E3", disturbance=E3_DISTURBANCE),
}


def _tuple(v: Any) -> Any:
    return tuple(v) if isinstance(v, list) else v


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", where)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError("unknown field", f"{where}.{key}" if where else key)
        kwargs[key] = _tuple(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), where) from exc


_SECTIONS = {
    "target": TargetConfig,
    "control": ControlParams,
    "disturbance": DisturbanceConfig,
    "scoring": ScoringParams,
    "adapt": AdaptConfig,
    "moderator": ModeratorConfig,
}


def config_from_dict(data: dict[str, Any]) -> ScenarioConfig:
    """Build a config. A ``base`` key ("E1"/"E2"/"E3") starts from that preset."""
    data = copy.deepcopy(data)
    base_name = data.pop("base", None)
    if base_name is not None:
        if base_name not in PRESETS:
            raise ConfigError(f"unknown preset {base_name!r}", "base")
        base = PRESETS[base_name]
    else:
        base = ScenarioConfig()
    updates: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            merged = {**asdict(getattr(base, key)), **value} if isinstance(value, dict) else value
            updates[key] = _build(_SECTIONS[key], merged, key)
        elif key in {f.name for f in fields(ScenarioConfig)}:
            updates[key] = _tuple(value)
        else:
            raise ConfigError("unknown field", key)
    cfg = replace(base, **updates)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("file not found", str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} col {exc.colno}", str(path)) from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(str(exc), str(path)) from exc


def preset(name: str, **overrides: Any) -> ScenarioConfig:
    key = name.upper()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", "scenario")
    cfg = replace(PRESETS[key], **overrides)
    cfg.validate()
    return cfg
