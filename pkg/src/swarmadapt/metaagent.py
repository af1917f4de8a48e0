"""Meta-policy: which logical primitive is in charge this frame.

A :class:`MetaPolicy` is an ordered rule table (guard -> primitive) with a
default. Selection is pure: the first rule whose guard holds wins. The
:class:`MetaAgent` adds hysteresis on top: a newly selected primitive only
takes over after it has been selected for ``hold`` consecutive frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .programs import DEFEND, FORMATION, PRIMITIVES
from .programs.guards import Cmp, GuardError, Observation, Predicate, guard_from_json

MetaObservation = Observation

ADVERSARIAL_RATE = 0.15
DEFAULT_HOLD = 10


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class MetaPolicy:
    policy_id: str
    rules: tuple[tuple[Predicate, str], ...] = ()
    default: str = FORMATION

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple((g, p) for g, p in self.rules))
        for _, prim in self.rules:
            if prim not in PRIMITIVES:
                raise PolicyError(f"unknown primitive {prim!r}")
        if self.default not in PRIMITIVES:
            raise PolicyError(f"unknown default primitive {self.default!r}")

    def to_json(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "rules": [{"when": g.to_json(), "then": p} for g, p in self.rules],
            "default": self.default,
        }


def policy_from_json(data: Any) -> MetaPolicy:
    try:
        rules = tuple((guard_from_json(r["when"]), r["then"]) for r in data["rules"])
        return MetaPolicy(data["policy_id"], rules, data.get("default", FORMATION))
    except (KeyError, TypeError) as exc:
        raise PolicyError(f"malformed policy document: {exc}") from None
    except GuardError as exc:
        raise PolicyError(str(exc)) from None


def load_policy(path: str | Path) -> MetaPolicy:
    return policy_from_json(json.loads(Path(path).read_text("utf-8")))


def default_policy() -> MetaPolicy:
    """Defend when more than 15% of neighbor reports look inconsistent."""
    return MetaPolicy(
        "default",
        ((Cmp("infected_report_rate", ">", ADVERSARIAL_RATE), DEFEND),),
        FORMATION,
    )


def select_primitive(policy: MetaPolicy, obs: Observation) -> str:
    for guard, prim in policy.rules:
        if guard.evaluate(obs):
            return prim
    return policy.default


@dataclass(frozen=True)
class PolicyBank:
    active: MetaPolicy
    backups: tuple[MetaPolicy, ...] = ()
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backups", tuple(self.backups))
        ids = [self.active.policy_id] + [b.policy_id for b in self.backups]
        if len(set(ids)) != len(ids):
            raise PolicyError(f"policy ids must be unique in a bank: {ids}")

    def policies(self) -> list[MetaPolicy]:
        return [self.active, *self.backups]

    def with_backup(self, policy: MetaPolicy, k: int) -> "PolicyBank":
        """Add ``policy`` as the newest backup, keeping at most ``k`` backups."""
        if k <= 0:
            return self
        kept = [b for b in self.backups if b.policy_id != policy.policy_id]
        return replace(self, backups=tuple([policy, *kept][:k]))


def switch_policy(bank: PolicyBank, to: str) -> PolicyBank:
    """Make backup ``to`` active; the previously active policy joins the backups."""
    for i, b in enumerate(bank.backups):
        if b.policy_id == to:
            rest = bank.backups[:i] + bank.backups[i + 1:]
            return PolicyBank(b, rest + (bank.active,), bank.version + 1)
    raise PolicyError(f"no backup policy {to!r}")


@dataclass
class MetaAgent:
    """Applies the bank's active policy with ``hold`` frames of hysteresis."""

    bank: PolicyBank = field(default_factory=lambda: PolicyBank(default_policy()))
    hold: int = DEFAULT_HOLD
    current: str | None = None
    _pending: str | None = None
    _streak: int = 0

    def __post_init__(self):
        if self.hold < 1:
            raise PolicyError("hold must be >= 1")
        if self.current is None:
            self.current = self.bank.active.default

    def observe(self, obs: Observation) -> str:
        want = select_primitive(self.bank.active, obs)
        if want == self.current:
            self._pending, self._streak = None, 0
            return self.current
        if want == self._pending:
            self._streak += 1
        else:
            self._pending, self._streak = want, 1
        if self._streak >= self.hold:
            self.current, self._pending, self._streak = want, None, 0
        return self.current
