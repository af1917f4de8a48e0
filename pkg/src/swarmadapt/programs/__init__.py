"""Symbolic program DSL: templates, pipelines, edit operators, interpretation."""

from .core import (
    DEFEND,
    FORMATION,
    PRIMITIVES,
    Mapping,
    Op,
    ParamPatch,
    ParseError,
    Pipeline,
    ProgramError,
    ProgramSpec,
    Registry,
    apply_edits,
    compose,
    default_mapping,
    diff_params,
    edit_from_json,
    edit_to_json,
    interpret,
    load_registry,
    parse,
    parse_mapping,
    pipeline_from_json,
    serialize,
    serialize_mapping,
    spec_from_json,
    validate_spec,
)
from .effects import NO_DEFENSE, DefendEffects
from .guards import ALWAYS, NEVER, And, Cmp, Const, GuardError, Not, Observation, Or, guard_from_json

__all__ = [name for name in dir() if not name.startswith("_")]
