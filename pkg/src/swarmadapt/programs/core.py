"""Symbolic programs: templates, pipelines, the edit operators and interpretation.

A program is data: a template name plus parameters (and an optional guard).
Programs are grouped into one ordered :class:`Pipeline` per logical primitive;
the set of deployed pipelines is a versioned :class:`Mapping`.

Edit operators (``compose``):

* ``AND`` appends a program unconditionally.
* ``OR`` appends a guarded program; it only takes effect while its guard holds.
* ``ADD`` is ``AND`` restricted to programs present in the program pool.
* ``DEL`` removes a stage by ``program_id``.
* ``MOD`` patches parameters of an existing stage in place.

Interpretation folds stages left to right. Scalars follow last-writer-wins;
quarantine sets are merged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from ..config import ConfigError, ControlParams
from .effects import DefendEffects
from .guards import GuardError, Observation, Predicate, guard_from_json

FORMATION = "FormationControl"
DEFEND = "Defend"
PRIMITIVES = (FORMATION, DEFEND)


class ProgramError(ValueError):
    """A program, pipeline or edit is invalid."""


class ParseError(ValueError):
    """Malformed serialized pipeline. ``position`` is a character offset when known."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class Op(str, Enum):
    AND = "AND"
    OR = "OR"
    ADD = "ADD"
    DEL = "DEL"
    MOD = "MOD"


# --------------------------------------------------------------------- registry

@dataclass(frozen=True)
class ParamRange:
    kind: str  # real | int | ids
    min: float
    max: float


@dataclass(frozen=True)
class Template:
    name: str
    primitive: str
    params: dict[str, ParamRange]
    required: tuple[str, ...]
    min_params: int


@dataclass(frozen=True)
class Registry:
    templates: dict[str, Template]
    pool: dict[str, "ProgramSpec"]
    primitives: dict[str, dict]

    def template(self, name: str) -> Template:
        try:
            return self.templates[name]
        except KeyError:
            raise ProgramError(f"unknown template {name!r}") from None


def _registry_from_dict(data: dict) -> Registry:
    templates = {}
    for name, t in data["templates"].items():
        params = {p: ParamRange(r["kind"], r["min"], r["max"]) for p, r in t["params"].items()}
        templates[name] = Template(name, t["primitive"], params, tuple(t["required"]),
                                   int(t["min_params"]))
    reg = Registry(templates, {}, dict(data["primitives"]))
    for entry in data.get("pool", []):
        t = reg.template(entry["template"])
        spec = ProgramSpec(entry["program_id"], t.primitive, entry["template"], entry["params"])
        validate_spec(spec, reg)
        reg.pool[spec.program_id] = spec
    return reg


@lru_cache(maxsize=None)
def _default_registry() -> Registry:
    text = resources.files("swarmadapt.data").joinpath("registry.json").read_text("utf-8")
    return _registry_from_dict(json.loads(text))


def load_registry(path: str | Path | None = None) -> Registry:
    """The program pool registry (the shipped one when ``path`` is None)."""
    if path is None:
        return _default_registry()
    return _registry_from_dict(json.loads(Path(path).read_text("utf-8")))


# --------------------------------------------------------------- program specs

def _norm_value(v: Any) -> Any:
    if isinstance(v, (list, tuple, set, frozenset)):
        return tuple(sorted({int(x) for x in v}))
    if isinstance(v, bool):
        raise ProgramError("boolean parameters are not supported")
    if isinstance(v, int):
        return v
    return float(v)


@dataclass(frozen=True)
class ProgramSpec:
    program_id: str
    primitive: str
    template: str
    params: dict[str, Any] = field(default_factory=dict)
    guard: Predicate | None = None

    def __post_init__(self):
        if not isinstance(self.params, dict):
            raise ProgramError("params must be a mapping")
        object.__setattr__(self, "params", {k: _norm_value(v) for k, v in self.params.items()})

    def with_params(self, patch: dict[str, Any]) -> "ProgramSpec":
        return replace(self, params={**self.params, **patch})

    def to_json(self) -> dict:
        out = {
            "program_id": self.program_id,
            "primitive": self.primitive,
            "template": self.template,
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in sorted(self.params.items())},
        }
        if self.guard is not None:
            out["guard"] = self.guard.to_json()
        return out

    def describe(self) -> str:
        """Compact human-readable form, e.g. ``P1.1 WeightSet(w_goal=3)``."""
        args = ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        g = " if " + json.dumps(self.guard.to_json()) if self.guard is not None else ""
        return f"{self.program_id} {self.template}({args}){g}"


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return "{" + ",".join(str(x) for x in v) + "}"
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def _numeric_in_range(name: str, value: Any, r: ParamRange) -> None:
    if r.kind == "ids":
        if not isinstance(value, tuple):
            raise ProgramError(f"{name} must be a list of aircraft ids")
        for x in value:
            if not r.min <= x <= r.max:
                raise ProgramError(f"{name}: id {x} outside [{r.min}, {r.max}]")
        return
    if isinstance(value, tuple):
        raise ProgramError(f"{name} must be a number")
    if r.kind == "int" and (not isinstance(value, int) and not float(value).is_integer()):
        raise ProgramError(f"{name} must be an integer")
    if not math.isfinite(value) or not r.min <= value <= r.max:
        raise ProgramError(f"{name}={value} outside [{r.min:g}, {r.max:g}]")


def validate_spec(spec: ProgramSpec, registry: Registry | None = None) -> None:
    """Raise :class:`ProgramError` unless ``spec`` is a complete, in-range instance."""
    registry = registry or load_registry()
    t = registry.template(spec.template)
    if spec.primitive != t.primitive:
        raise ProgramError(
            f"{spec.program_id}: template {spec.template} belongs to {t.primitive}, "
            f"not {spec.primitive}"
        )
    if not spec.program_id or not isinstance(spec.program_id, str):
        raise ProgramError("program_id must be a non-empty string")
    unknown = set(spec.params) - set(t.params)
    if unknown:
        raise ProgramError(f"{spec.program_id}: unknown parameters {sorted(unknown)}")
    missing = set(t.required) - set(spec.params)
    if missing:
        raise ProgramError(f"{spec.program_id}: missing parameters {sorted(missing)}")
    if len(spec.params) < t.min_params:
        raise ProgramError(f"{spec.program_id}: {spec.template} needs >= {t.min_params} params")
    for name, value in spec.params.items():
        _numeric_in_range(f"{spec.program_id}.{name}", value, t.params[name])


# ------------------------------------------------------------ pipelines/mapping

@dataclass(frozen=True)
class Pipeline:
    primitive: str
    stages: tuple[ProgramSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.primitive not in PRIMITIVES:
            raise ProgramError(f"unknown primitive {self.primitive!r}")
        ids = [s.program_id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise ProgramError(f"duplicate program ids in pipeline: {ids}")
        for s in self.stages:
            if s.primitive != self.primitive:
                raise ProgramError(f"{s.program_id} is a {s.primitive} program, "
                                   f"pipeline is {self.primitive}")

    def ids(self) -> list[str]:
        return [s.program_id for s in self.stages]

    def get(self, program_id: str) -> ProgramSpec:
        for s in self.stages:
            if s.program_id == program_id:
                return s
        raise ProgramError(f"no stage {program_id!r} in {self.primitive} pipeline")

    def to_json(self) -> dict:
        return {"primitive": self.primitive, "stages": [s.to_json() for s in self.stages]}

    def describe(self) -> list[str]:
        return [s.describe() for s in self.stages]


@dataclass(frozen=True)
class Mapping:
    """The deployed pipeline per primitive. ``version`` bumps on every swap."""

    pipelines: dict[str, Pipeline]
    version: int = 0

    def __post_init__(self):
        if set(self.pipelines) != set(PRIMITIVES):
            raise ProgramError(f"mapping needs exactly the primitives {PRIMITIVES}")

    def __getitem__(self, primitive: str) -> Pipeline:
        return self.pipelines[primitive]

    def swapped(self, pipeline: Pipeline) -> "Mapping":
        return Mapping({**self.pipelines, pipeline.primitive: pipeline}, self.version + 1)

    def candidate(self, pipeline: Pipeline) -> "Mapping":
        """Same as :meth:`swapped` but keeps the version (for shadow runs)."""
        return Mapping({**self.pipelines, pipeline.primitive: pipeline}, self.version)

    def control(self, base: ControlParams, obs: Observation | None = None) -> ControlParams:
        return interpret(self.pipelines[FORMATION], base, obs)

    def defend(self, obs: Observation | None = None) -> DefendEffects:
        return interpret(self.pipelines[DEFEND], None, obs)


def default_mapping(control: ControlParams) -> Mapping:
    """Initial mapping: L1 spells out ``control`` as three programs, L2 is empty."""
    l1 = Pipeline(FORMATION, (
        ProgramSpec("P1.1", FORMATION, "WeightSet", {
            "w_sep": control.w_sep, "w_coh": control.w_coh,
            "w_align": control.w_align, "w_goal": control.w_goal}),
        ProgramSpec("P1.2", FORMATION, "DistanceSet", {
            "r_sep": control.r_sep, "r_coh": control.r_coh, "r_comm": control.r_comm}),
        ProgramSpec("P1.3", FORMATION, "SpeedCap", {
            "v_max": control.v_max, "a_max": control.a_max}),
    ))
    return Mapping({FORMATION: l1, DEFEND: Pipeline(DEFEND)}, 0)


# ---------------------------------------------------------------- composition

@dataclass(frozen=True)
class ParamPatch:
    program_id: str
    patch: dict[str, Any]


def compose(pipeline: Pipeline, op: Op | str, arg: Any,
            registry: Registry | None = None) -> Pipeline:
    """Apply one edit operator; returns a new pipeline."""
    registry = registry or load_registry()
    try:
        op = Op(op)
    except ValueError:
        raise ProgramError(f"unknown operator {op!r}") from None

    if op in (Op.AND, Op.OR, Op.ADD):
        if op is Op.ADD and isinstance(arg, str):
            if arg not in registry.pool:
                raise ProgramError(f"{arg!r} is not in the program pool")
            arg = registry.pool[arg]
        if not isinstance(arg, ProgramSpec):
            raise ProgramError(f"{op.value} takes a program")
        if op is Op.OR and arg.guard is None:
            raise ProgramError("OR needs a guarded program")
        if op is Op.ADD:
            ref = registry.pool.get(arg.program_id)
            if ref is None or ref.template != arg.template:
                raise ProgramError(f"{arg.program_id!r} ({arg.template}) is not in the program pool")
        if arg.primitive != pipeline.primitive:
            raise ProgramError(f"cannot add a {arg.primitive} program to a "
                               f"{pipeline.primitive} pipeline")
        if arg.program_id in pipeline.ids():
            raise ProgramError(f"{arg.program_id!r} already in pipeline")
        validate_spec(arg, registry)
        return Pipeline(pipeline.primitive, pipeline.stages + (arg,))

    if op is Op.DEL:
        if not isinstance(arg, str):
            raise ProgramError("DEL takes a program_id")
        pipeline.get(arg)
        return Pipeline(pipeline.primitive,
                        tuple(s for s in pipeline.stages if s.program_id != arg))

    # MOD
    if not isinstance(arg, ParamPatch):
        raise ProgramError("MOD takes a ParamPatch")
    old = pipeline.get(arg.program_id)
    new = old.with_params(arg.patch)
    validate_spec(new, registry)
    return Pipeline(pipeline.primitive,
                    tuple(new if s.program_id == arg.program_id else s for s in pipeline.stages))


def spec_from_json(data: Any) -> ProgramSpec:
    if not isinstance(data, dict):
        raise ProgramError("program must be an object")
    unknown = set(data) - {"program_id", "primitive", "template", "params", "guard"}
    if unknown:
        raise ProgramError(f"unknown program fields {sorted(unknown)}")
    try:
        guard = guard_from_json(data["guard"]) if data.get("guard") is not None else None
        return ProgramSpec(str(data["program_id"]), str(data["primitive"]),
                           str(data["template"]), dict(data.get("params", {})), guard)
    except KeyError as exc:
        raise ProgramError(f"program missing field {exc.args[0]!r}") from None
    except (GuardError, TypeError, ValueError) as exc:
        raise ProgramError(str(exc)) from None


def edit_from_json(data: Any) -> tuple[Op, Any]:
    """Decode one ``{"op": ..., "arg": ...}`` edit-script record."""
    if not isinstance(data, dict) or set(data) != {"op", "arg"}:
        raise ProgramError("edit must be an object with exactly 'op' and 'arg'")
    try:
        op = Op(data["op"])
    except ValueError:
        raise ProgramError(f"unknown operator {data['op']!r}") from None
    arg = data["arg"]
    if op is Op.DEL:
        if not isinstance(arg, str):
            raise ProgramError("DEL arg must be a program_id")
        return op, arg
    if op is Op.MOD:
        if not isinstance(arg, dict) or set(arg) != {"program_id", "patch"} \
                or not isinstance(arg["patch"], dict):
            raise ProgramError("MOD arg must be {program_id, patch}")
        try:
            patch = {k: _norm_value(v) for k, v in arg["patch"].items()}
        except (TypeError, ValueError) as exc:
            raise ProgramError(f"bad patch value: {exc}") from None
        return op, ParamPatch(str(arg["program_id"]), patch)
    if op is Op.ADD and isinstance(arg, str):
        return op, arg
    return op, spec_from_json(arg)


def edit_to_json(op: Op | str, arg: Any) -> dict:
    op = Op(op)
    if isinstance(arg, ProgramSpec):
        arg = arg.to_json()
    elif isinstance(arg, ParamPatch):
        arg = {"program_id": arg.program_id,
               "patch": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in sorted(arg.patch.items())}}
    return {"op": op.value, "arg": arg}


def apply_edits(pipeline: Pipeline, script: Sequence[dict],
                registry: Registry | None = None) -> Pipeline:
    """Apply a JSON edit script (list of ``{op, arg}``) in order."""
    if not isinstance(script, (list, tuple)):
        raise ProgramError("edit script must be a list")
    for rec in script:
        op, arg = edit_from_json(rec)
        pipeline = compose(pipeline, op, arg, registry)
    return pipeline


# ----------------------------------------------------------------- interpret

_L1_FIELDS = {
    "WeightSet": {"w_sep": "w_sep", "w_coh": "w_coh", "w_align": "w_align", "w_goal": "w_goal"},
    "DistanceSet": {"r_sep": "r_sep", "r_coh": "r_coh", "r_comm": "r_comm"},
    "SpeedCap": {"v_max": "v_max", "a_max": "a_max"},
    "SlotReassign": {"phase": "slot_phase"},
}
_L2_FIELDS = {"OutlierFilter": ("z", "outlier_z"), "TrustDecay": ("rate", "trust_decay"),
              "WeightNoise": ("sigma", "weight_noise_sigma")}


def _active(stage: ProgramSpec, obs: Observation | None) -> bool:
    if stage.guard is None:
        return True
    return obs is not None and stage.guard.evaluate(obs)


def interpret(pipeline: Pipeline, base: ControlParams | None,
              obs: Observation | None = None,
              registry: Registry | None = None) -> ControlParams | DefendEffects:
    """Fold a pipeline into the effect it has on the simulator.

    FormationControl pipelines fold over ``base`` and return
    :class:`ControlParams`; Defend pipelines return :class:`DefendEffects`.
    Guarded stages apply only when ``obs`` is given and the guard holds.
    """
    registry = registry or load_registry()
    for s in pipeline.stages:
        validate_spec(s, registry)
    if pipeline.primitive == FORMATION:
        if base is None:
            raise ProgramError("FormationControl interpretation needs base ControlParams")
        updates: dict[str, float] = {}
        for s in pipeline.stages:
            if not _active(s, obs):
                continue
            for pname, fname in _L1_FIELDS[s.template].items():
                if pname in s.params:
                    updates[fname] = float(s.params[pname])
        out = replace(base, **updates)
        try:
            out.validate()
        except ConfigError as exc:
            raise ProgramError(f"pipeline yields invalid control parameters: {exc}") from None
        return out

    eff: dict[str, Any] = {}
    quarantine: dict[int, int] = {}
    for s in pipeline.stages:
        if not _active(s, obs):
            continue
        if s.template == "Quarantine":
            until = int(s.params.get("since", 0)) + int(s.params["ttl"])
            for i in s.params["ids"]:
                quarantine[i] = max(quarantine.get(i, until), until)
        else:
            pname, fname = _L2_FIELDS[s.template]
            eff[fname] = float(s.params[pname])
    return DefendEffects(quarantine=quarantine, **eff)


# ------------------------------------------------------------- serialization

def serialize(pipeline: Pipeline) -> str:
    """Canonical JSON text: sorted keys, no insignificant whitespace."""
    return json.dumps(pipeline.to_json(), sort_keys=True, separators=(",", ":"))


def pipeline_from_json(data: Any) -> Pipeline:
    if not isinstance(data, dict) or set(data) != {"primitive", "stages"}:
        raise ParseError("pipeline must be an object with 'primitive' and 'stages'")
    if not isinstance(data["stages"], list):
        raise ParseError("'stages' must be a list")
    try:
        stages = tuple(spec_from_json(s) for s in data["stages"])
        return Pipeline(str(data["primitive"]), stages)
    except ProgramError as exc:
        raise ParseError(str(exc)) from None


def parse(text: str) -> Pipeline:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    return pipeline_from_json(data)


def serialize_mapping(m: Mapping) -> str:
    doc = {"version": m.version, "pipelines": {k: m.pipelines[k].to_json() for k in PRIMITIVES}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def parse_mapping(text: str) -> Mapping:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    if not isinstance(data, dict) or set(data) != {"version", "pipelines"}:
        raise ParseError("mapping must have 'version' and 'pipelines'")
    try:
        return Mapping({k: pipeline_from_json(v) for k, v in data["pipelines"].items()},
                       int(data["version"]))
    except ProgramError as exc:
        raise ParseError(str(exc)) from None


def diff_params(before: Pipeline, after: Pipeline) -> dict[str, str]:
    """Human-readable parameter changes, keyed ``program_id.param``."""
    old = {s.program_id: s for s in before.stages}
    new = {s.program_id: s for s in after.stages}
    out: dict[str, str] = {}
    for pid, s in new.items():
        if pid not in old:
            out[pid] = f"added {s.describe()}"
            continue
        for k in sorted(set(s.params) | set(old[pid].params)):
            a, b = old[pid].params.get(k), s.params.get(k)
            if a != b:
                out[f"{pid}.{k}"] = f"{_fmt(a) if a is not None else '-'} -> " \
                                    f"{_fmt(b) if b is not None else '-'}"
    for pid, s in old.items():
        if pid not in new:
            out[pid] = f"removed {s.describe()}"
    return out

