"""Guard predicates over the swarm's local observations.

A guard is a small boolean expression tree. Its JSON form is one of::

    {"const": true}
    {"cmp": ["infected_report_rate", ">", 0.15]}
    {"and": [g1, g2, ...]}   {"or": [g1, ...]}   {"not": g}

Comparisons may only reference the fields of :class:`Observation` listed in
``GUARD_FIELDS``.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass
from typing import Any, Union


class GuardError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    """Formation-level indicators seen by the meta-agent and by guards."""

    s_overall: float = 100.0
    e_radius: float = 0.0
    sigma_height: float = 0.0
    infected_report_rate: float = 0.0
    frames_since_adaptation: int = 0

    def __post_init__(self):
        for name in ("s_overall", "e_radius", "sigma_height", "infected_report_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.infected_report_rate <= 1.0:
            raise ValueError("infected_report_rate must be in [0, 1]")


GUARD_FIELDS = ("s_overall", "e_radius", "sigma_height", "infected_report_rate")

_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class Const:
    value: bool

    def evaluate(self, obs: Observation) -> bool:
        return self.value

    def to_json(self) -> dict:
        return {"const": self.value}


@dataclass(frozen=True)
class Cmp:
    field: str
    op: str
    value: float

    def __post_init__(self):
        if self.field not in GUARD_FIELDS:
            raise GuardError(f"unknown guard field {self.field!r}")
        if self.op not in _OPS:
            raise GuardError(f"unknown comparison {self.op!r}")
        if not math.isfinite(self.value):
            raise GuardError("comparison value must be finite")

    def evaluate(self, obs: Observation) -> bool:
        return _OPS[self.op](getattr(obs, self.field), self.value)

    def to_json(self) -> dict:
        return {"cmp": [self.field, self.op, self.value]}


@dataclass(frozen=True)
class And:
    items: tuple

    def evaluate(self, obs: Observation) -> bool:
        return all(g.evaluate(obs) for g in self.items)

    def to_json(self) -> dict:
        return {"and": [g.to_json() for g in self.items]}


@dataclass(frozen=True)
class Or:
    items: tuple

    def evaluate(self, obs: Observation) -> bool:
        return any(g.evaluate(obs) for g in self.items)

    def to_json(self) -> dict:
        return {"or": [g.to_json() for g in self.items]}


@dataclass(frozen=True)
class Not:
    item: Any

    def evaluate(self, obs: Observation) -> bool:
        return not self.item.evaluate(obs)

    def to_json(self) -> dict:
        return {"not": self.item.to_json()}


Predicate = Union[Const, Cmp, And, Or, Not]

ALWAYS = Const(True)
NEVER = Const(False)


def guard_from_json(data: Any) -> Predicate:
    if not isinstance(data, dict) or len(data) != 1:
        raise GuardError(f"guard must be a single-key object, got {data!r}")
    (key, val), = data.items()
    if key == "const":
        if not isinstance(val, bool):
            raise GuardError("const guard needs a boolean")
        return Const(val)
    if key == "cmp":
        if not (isinstance(val, list) and len(val) == 3):
            raise GuardError("cmp guard needs [field, op, value]")
        field_, op, value = val
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise GuardError("cmp value must be a number")
        return Cmp(str(field_), str(op), float(value))
    if key in ("and", "or"):
        if not isinstance(val, list) or not val:
            raise GuardError(f"{key} guard needs a non-empty list")
        items = tuple(guard_from_json(v) for v in val)
        return And(items) if key == "and" else Or(items)
    if key == "not":
        return Not(guard_from_json(val))
    raise GuardError(f"unknown guard kind {key!r}")
