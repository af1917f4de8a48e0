"""Program-synthesis moderators.

Both moderators answer a :class:`ModeratorRequest` with up to ``budget``
candidate edit scripts (lists of ``{"op", "arg"}`` records, see
:mod:`swarmadapt.programs`). Neither can emit code: every candidate is checked
against the program registry before it leaves this module.

* :func:`scripted_synthesize` is deterministic and offline. Candidates come,
  in order, from replaying retrieved cases, from expert-knowledge proposals,
  and (when expert knowledge is off) from seeded random perturbations
  anchored on the best-scoring retrieved case.
* :func:`external_synthesize` POSTs the request as JSON to ``<endpoint>/synthesize``
  and validates whatever comes back.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Mapping, Sequence

import httpx
import jsonschema
import numpy as np

from . import rng as rngmod
from .config import ControlParams, ModeratorConfig
from .programs import (
    FORMATION,
    Op,
    ParamPatch,
    ParseError,
    Pipeline,
    ProgramError,
    ProgramSpec,
    Registry,
    apply_edits,
    edit_to_json,
    interpret,
    load_registry,
    parse,
)
from .provenance import ExpertSnippet, load_resource

SCHEMA_VERSION = "1"
ORIGINS = ("RetrievedCase", "ExpertGrid", "ModeratorNovel")

ENV_ENDPOINT = "SWARMADAPT_MODERATOR_URL"
ENV_API_KEY = "SWARMADAPT_MODERATOR_API_KEY"


class ModeratorProtocolError(RuntimeError):
    pass


@dataclass
class ModeratorRequest:
    primitive: str
    features: list[float]
    telemetry: dict[str, Any]
    current_pipeline: str
    retrieved_cases: list[dict] = field(default_factory=list)
    expert_snippets: list[ExpertSnippet] = field(default_factory=list)
    budget: int = 6
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "primitive": self.primitive,
            "context": {"features": [float(x) for x in self.features],
                        "telemetry": dict(self.telemetry)},
            "current_pipeline": self.current_pipeline,
            "retrieved_cases": list(self.retrieved_cases),
            "expert_snippets": [s.to_json() for s in self.expert_snippets],
            "budget": self.budget,
        }


@dataclass(frozen=True)
class ModeratorCandidate:
    edits: list[dict]
    rationale: str
    confidence: float
    origin: str = "ModeratorNovel"

    def to_json(self) -> dict:
        return {"edits": self.edits, "rationale": self.rationale,
                "confidence": self.confidence, "origin": self.origin}


@dataclass(frozen=True)
class ModeratorResponse:
    candidates: list[ModeratorCandidate]
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version,
                "candidates": [c.to_json() for c in self.candidates]}


@lru_cache(maxsize=None)
def _validator(name: str) -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(load_resource(name))


def validate_request(doc: Any) -> None:
    err = jsonschema.exceptions.best_match(_validator("moderator_request.schema.json").iter_errors(doc))
    if err is not None:
        raise ModeratorProtocolError(f"request schema violation: {err.message}")


def response_from_json(doc: Any) -> ModeratorResponse:
    err = jsonschema.exceptions.best_match(_validator("moderator_response.schema.json").iter_errors(doc))
    if err is not None:
        raise ModeratorProtocolError(f"response schema violation: {err.message}")
    return ModeratorResponse([
        ModeratorCandidate(c["edits"], c["rationale"], float(c["confidence"]),
                           c.get("origin", "ModeratorNovel"))
        for c in doc["candidates"]
    ], doc["schema_version"])


# ------------------------------------------------------------------- helpers

def script_towards(current: Pipeline, target: Pipeline, registry: Registry) -> list[dict]:
    """Edit script that turns ``current`` into ``target`` stage by stage.

    Shared stages are patched with MOD, new stages are ADDed when they are
    pool programs (AND otherwise), and missing ones are DELeted. Stage order
    is not preserved for stages that exist in both pipelines.
    """
    cur = {s.program_id: s for s in current.stages}
    tgt = {s.program_id: s for s in target.stages}
    script = []
    for pid in cur:
        if pid not in tgt:
            script.append(edit_to_json(Op.DEL, pid))
    for s in target.stages:
        old = cur.get(s.program_id)
        if old is None:
            ref = registry.pool.get(s.program_id)
            op = Op.ADD if ref is not None and ref.template == s.template and s.guard is None \
                else (Op.OR if s.guard is not None else Op.AND)
            script.append(edit_to_json(op, s))
        elif old.template != s.template or old.guard != s.guard:
            script.append(edit_to_json(Op.DEL, s.program_id))
            script.append(edit_to_json(Op.OR if s.guard is not None else Op.AND, s))
        else:
            patch = {k: v for k, v in s.params.items() if old.params.get(k) != v}
            if set(old.params) - set(s.params):
                raise ProgramError("cannot remove parameters with MOD")
            if patch:
                script.append(edit_to_json(Op.MOD, ParamPatch(s.program_id, patch)))
    return script


def case_target(record: Mapping, registry: Registry) -> Pipeline | None:
    """The pipeline a stored episode tried (deployed or best rejected), if decodable."""
    pa = record.get("program_adaptation", {})
    script = pa.get("generated_program")
    if not script:
        return None
    try:
        before = parse(pa["original_program"])
        return apply_edits(before, json.loads(script), registry)
    except (ParseError, ProgramError, ValueError, KeyError, TypeError):
        return None


def recorded_score(record: Mapping) -> float | None:
    """Validation score a stored episode reached with its generated program.

    Records carry it as ``s_overall_mean`` (context) plus the improvement in points.
    """
    try:
        mean = float(record["environmental_context"]["s_overall_mean"])
        gain = float(str(record["outcome"]["performance_improvement"]).split()[0].rstrip("%"))
    except (KeyError, TypeError, ValueError, IndexError):
        return None
    return mean + gain


def _extrapolate(case_before: Pipeline, case_after: Pipeline, registry: Registry) -> Pipeline | None:
    """Apply a case's multiplicative parameter changes once more to its result."""
    before = {s.program_id: s for s in case_before.stages}
    stages = []
    changed = False
    for s in case_after.stages:
        old = before.get(s.program_id)
        patch = {}
        if old is not None and old.template == s.template:
            for k, v in s.params.items():
                o = old.params.get(k)
                if isinstance(v, float) and isinstance(o, (int, float)) and o > 0 and v != o:
                    patch[k] = _clamp(registry, s, k, v * (v / o))
        changed |= bool(patch)
        stages.append(s.with_params(patch) if patch else s)
    if not changed:
        return None
    try:
        return Pipeline(case_after.primitive, tuple(stages))
    except ProgramError:
        return None


def _usable(pipeline: Pipeline, base: ControlParams, registry: Registry) -> bool:
    try:
        interpret(pipeline, base if pipeline.primitive == FORMATION else None, None, registry)
        return True
    except ProgramError:
        return False


def _stage_or_pool(p: Pipeline, pid: str, registry: Registry) -> ProgramSpec | None:
    for s in p.stages:
        if s.program_id == pid:
            return s
    return registry.pool.get(pid)


def _apply_proposal(current: Pipeline, proposal: Sequence[Mapping], telemetry: Mapping,
                    registry: Registry) -> Pipeline | None:
    """Turn one expert proposal (scale/set per program) into a target pipeline."""
    stages = {s.program_id: s for s in current.stages}
    order = [s.program_id for s in current.stages]
    for edit in proposal:
        pid = edit["program"]
        spec = _stage_or_pool(current, pid, registry)
        if spec is None or spec.primitive != current.primitive:
            return None
        patch = {k: spec.params[k] * float(f) for k, f in edit.get("scale", {}).items()
                 if k in spec.params}
        if len(patch) != len(edit.get("scale", {})):
            return None
        patch.update(edit.get("set", {}))
        if edit.get("target") == "most_inconsistent":
            j = telemetry.get("most_inconsistent", -1)
            if not isinstance(j, int) or j < 0:
                return None
            patch["ids"] = [j]
            patch["since"] = int(telemetry.get("frame", 0))
        spec = spec.with_params(patch)
        if pid not in stages:
            order.append(pid)
        stages[pid] = spec
    try:
        return Pipeline(current.primitive, tuple(stages[pid] for pid in order))
    except ProgramError:
        return None


_L1_RANDOM = (("P1.1", "w_goal"), ("P1.1", "w_coh"), ("P1.1", "w_sep"), ("P1.1", "w_align"),
              ("P1.2", "r_coh"), ("P1.3", "v_max"))
RANDOM_LOG_SIGMA = 0.55  # std of the log-factor applied to each L1 parameter
_L2_RANDOM = ("P2.1", "P2.2", "P2.3", "P2.4")


def _clamp(registry: Registry, spec: ProgramSpec, name: str, value: float) -> float:
    r = registry.template(spec.template).params[name]
    return float(min(max(value, r.min), r.max))


def _random_target(anchor: Pipeline, gen: np.random.Generator, telemetry: Mapping,
                   registry: Registry) -> Pipeline | None:
    """One seeded random perturbation of ``anchor``."""
    stages = {s.program_id: s for s in anchor.stages}
    order = [s.program_id for s in anchor.stages]
    if anchor.primitive == FORMATION:
        # evolution-strategy step: every tunable parameter moves by a log-normal factor
        steps = gen.normal(0.0, RANDOM_LOG_SIGMA, size=len(_L1_RANDOM))
        for (pid, name), z in zip(_L1_RANDOM, steps):
            spec = stages.get(pid) or _stage_or_pool(anchor, pid, registry)
            value = _clamp(registry, spec, name, spec.params.get(name, 1.0) * math.exp(z))
            stages[pid] = spec.with_params({name: value})
            if pid not in order:
                order.append(pid)
    else:
        pid = _L2_RANDOM[int(gen.integers(0, len(_L2_RANDOM)))]
        spec = _stage_or_pool(anchor, pid, registry)
        if spec.template == "OutlierFilter":
            patch = {"z": float(gen.uniform(1.0, 5.0))}
        elif spec.template == "TrustDecay":
            patch = {"rate": float(gen.uniform(0.05, 0.6))}
        elif spec.template == "WeightNoise":
            patch = {"sigma": float(gen.uniform(0.02, 0.3))}
        else:
            n = int(telemetry.get("n_aircraft", 10))
            patch = {"ids": [int(gen.integers(0, n))], "ttl": 200,
                     "since": int(telemetry.get("frame", 0))}
        stages[pid] = spec.with_params(patch)
        if pid not in order:
            order.append(pid)
    try:
        return Pipeline(anchor.primitive, tuple(stages[p] for p in order))
    except ProgramError:
        return None


# ------------------------------------------------------------------ scripted

def scripted_synthesize(req: ModeratorRequest, use_ek: bool = True, use_pc: bool = True,
                        seed: Sequence[int | str] = (0,),
                        registry: Registry | None = None,
                        base: ControlParams | None = None) -> ModeratorResponse:
    """Deterministic candidate list for ``req``; ``seed`` keys the random fill."""
    registry = registry or load_registry()
    base = base or ControlParams()
    current = parse(req.current_pipeline)
    seen = [current]
    out: list[ModeratorCandidate] = []

    def offer(target: Pipeline | None, rationale: str, confidence: float, origin: str) -> bool:
        if target is None or not _usable(target, base, registry):
            return False
        try:
            script = script_towards(current, target, registry)
            target = apply_edits(current, script, registry)
        except ProgramError:
            return False
        if target in seen:
            return False
        seen.append(target)
        out.append(ModeratorCandidate(script, rationale, round(confidence, 4), origin))
        return True

    anchor, anchor_before, anchor_score = current, None, -math.inf
    if use_pc:
        for case in req.retrieved_cases:
            target = case_target(case["record"], registry)
            if target is None or target.primitive != current.primitive:
                continue
            score = recorded_score(case["record"])
            if score is not None and score > anchor_score:
                anchor, anchor_score = target, score
                anchor_before = parse(case["record"]["program_adaptation"]["original_program"])
            status = case["record"].get("outcome", {}).get("status", "?")
            offer(target, f"replay of record {case['record_id']} ({status}, "
                          f"distance {case['distance']:.3f})",
                  1.0 / (1.0 + case["distance"]), "RetrievedCase")

    if use_ek:
        for snip in req.expert_snippets:
            if snip.primitive != current.primitive or not snip.applies(req.telemetry):
                continue
            for proposal in snip.proposals:
                offer(_apply_proposal(current, proposal, req.telemetry, registry),
                      f"expert guidance {snip.snippet_id}: {snip.text}", 0.8, "ExpertGrid")
    else:
        # explore without guidance: push the best case's change further, then
        # sample perturbations around it
        if anchor_before is not None:
            offer(_extrapolate(anchor_before, anchor, registry),
                  "extrapolation of the best retrieved case's parameter change", 0.4,
                  "ModeratorNovel")
        gen = rngmod.stream(0, "moderator", *seed)
        tries = 0
        while len(out) < req.budget and tries < 20 * req.budget:
            tries += 1
            offer(_random_target(anchor, gen, req.telemetry, registry),
                  "random perturbation of the "
                  + ("best retrieved case" if anchor is not current else "current pipeline"),
                  0.3, "ModeratorNovel")
    return ModeratorResponse(out[: req.budget])


# ------------------------------------------------------------------ external

def _fit_request(req: ModeratorRequest, cap: int) -> bytes:
    doc = req.to_json()
    body = json.dumps(doc, sort_keys=True).encode("utf-8")
    while len(body) > cap and doc["retrieved_cases"]:
        doc["retrieved_cases"] = doc["retrieved_cases"][:-1]
        body = json.dumps(doc, sort_keys=True).encode("utf-8")
    if len(body) > cap:
        raise ModeratorProtocolError(f"request is {len(body)} bytes, cap is {cap}")
    validate_request(doc)
    return body


def external_synthesize(req: ModeratorRequest, cfg: ModeratorConfig,
                        registry: Registry | None = None,
                        base: ControlParams | None = None,
                        transport: httpx.BaseTransport | None = None) -> ModeratorResponse:
    """Ask an HTTP endpoint for candidates; raise ModeratorProtocolError on any failure."""
    registry = registry or load_registry()
    base = base or ControlParams()
    endpoint = cfg.endpoint or os.environ.get(ENV_ENDPOINT)
    if not endpoint:
        raise ModeratorProtocolError("no moderator endpoint configured")
    headers = {"content-type": "application/json", **cfg.headers}
    if os.environ.get(ENV_API_KEY) and "authorization" not in {k.lower() for k in headers}:
        headers["authorization"] = f"Bearer {os.environ[ENV_API_KEY]}"
    body = _fit_request(req, cfg.max_request_bytes)
    url = endpoint.rstrip("/") + "/synthesize"
    try:
        with httpx.Client(timeout=cfg.timeout, transport=transport) as client:
            resp = client.post(url, content=body, headers=headers)
    except httpx.HTTPError as exc:
        raise ModeratorProtocolError(f"moderator request failed: {exc!r}") from exc
    if not 200 <= resp.status_code < 300:
        raise ModeratorProtocolError(f"moderator returned HTTP {resp.status_code}")
    try:
        doc = resp.json()
    except ValueError as exc:
        raise ModeratorProtocolError(f"moderator returned malformed JSON: {exc}") from exc
    parsed = response_from_json(doc)
    if len(parsed.candidates) > req.budget:
        raise ModeratorProtocolError(
            f"moderator returned {len(parsed.candidates)} candidates, budget is {req.budget}")
    current = parse(req.current_pipeline)
    kept = []
    for cand in parsed.candidates:
        try:
            target = apply_edits(current, cand.edits, registry)
        except ProgramError:
            continue
        if _usable(target, base, registry):
            kept.append(cand)
    if not kept:
        raise ModeratorProtocolError("no candidate passed registry validation")
    return ModeratorResponse(kept, parsed.schema_version)


@dataclass
class Moderator:
    """Front door used by the adaptation engine: external first, scripted fallback."""

    cfg: ModeratorConfig = field(default_factory=ModeratorConfig)
    use_ek: bool = True
    use_pc: bool = True
    transport: httpx.BaseTransport | None = None
    last_source: str = ""
    last_error: str | None = None

    def synthesize(self, req: ModeratorRequest, seed: Sequence[int | str] = (0,),
                   base: ControlParams | None = None) -> ModeratorResponse:
        self.last_error = None
        if self.cfg.kind == "external":
            try:
                resp = external_synthesize(req, self.cfg, base=base, transport=self.transport)
                self.last_source = "external"
                return resp
            except ModeratorProtocolError as exc:
                self.last_error = str(exc)
        resp = scripted_synthesize(req, self.use_ek, self.use_pc, seed, base=base)
        self.last_source = "scripted" if self.cfg.kind == "scripted" else "scripted-fallback"
        return resp
