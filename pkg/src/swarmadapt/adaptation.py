"""Runtime adaptation: detect degradation, ask the moderator, validate, swap.

One *episode* runs when the degradation detector fires:

1. retrieve the ``top_k_cases`` most similar past episodes (if provenance is on);
2. ask the moderator for at most ``budget`` candidate edit scripts;
3. score every candidate in a shadow run on a clone of the live world;
4. choose the best candidate whose shadow score reaches ``theta_accept``;
5. produce the new mapping (applied by the caller after the validation
   latency) and keep the runner-up accepted candidates as backups;
6. append a provenance record of the episode.

Shadow runs never touch the live world: each works on a deep copy with its
own PRNG stream keyed by ``(seed, "shadow", frame, candidate index)``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import rng as rngmod
from .config import AdaptConfig, ControlParams, ScoringParams
from .moderator import Moderator, ModeratorRequest
from .programs import (
    Mapping,
    Pipeline,
    ProgramError,
    apply_edits,
    diff_params,
    load_registry,
    serialize,
    serialize_mapping,
)
from .programs.effects import DefendEffects
from .programs.guards import Observation
from .provenance import PRIMITIVE_LABELS, ExpertRegistry, ProvenanceStore
from .scoring import FormationScore, compute_score
from .world import FLAG_TOL, WorldState, clone, report_stats, step, world_to_json

SIM_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)  # frame 0 on the simulation clock

PENDING, ACCEPTED, REJECTED = "Pending", "Accepted", "Rejected"


class AdaptationError(RuntimeError):
    pass


# ------------------------------------------------------------------ detector

@dataclass(frozen=True)
class DegradationDetector:
    theta_deg: float = 60.0
    window: int = 150
    armed: bool = True
    consecutive_below: int = 0


def detect(d: DegradationDetector, score: FormationScore) -> tuple[DegradationDetector, bool]:
    below = d.consecutive_below + 1 if score.s_overall < d.theta_deg else 0
    nd = replace(d, consecutive_below=below)
    return nd, bool(nd.armed and below >= nd.window)


# ------------------------------------------------------------- frame effects

def _has_guards(mapping: Mapping) -> bool:
    return any(s.guard is not None for p in mapping.pipelines.values() for s in p.stages)


def observe(w: WorldState, control: ControlParams, last: FormationScore,
            frames_since_adaptation: int = 0) -> Observation:
    heard, flagged = report_stats(w, control)
    return Observation(
        s_overall=last.s_overall,
        e_radius=last.e_radius,
        sigma_height=last.sigma_height,
        infected_report_rate=flagged / heard if heard else 0.0,
        frames_since_adaptation=frames_since_adaptation,
    )


def frame_effects(w: WorldState, mapping: Mapping, base: ControlParams, last: FormationScore,
                  frames_since_adaptation: int = 0
                  ) -> tuple[Observation, ControlParams, DefendEffects]:
    """Observation plus the control and defense effects the mapping yields this frame.

    Report statistics use the mapping's unguarded control parameters; guards
    are then evaluated on the resulting observation.
    """
    unguarded = mapping.control(base, None)
    obs = observe(w, unguarded, last, frames_since_adaptation)
    if _has_guards(mapping):
        return obs, mapping.control(base, obs), mapping.defend(obs)
    return obs, unguarded, mapping.defend(None)


def run_frames(w: WorldState, mapping: Mapping, base: ControlParams, scoring: ScoringParams,
               frames: int, last: FormationScore | None = None,
               frames_since_adaptation: int = 0) -> tuple[WorldState, list[FormationScore]]:
    """Step ``frames`` frames under a fixed mapping; returns the end state and scores."""
    last = last or compute_score(w, scoring)
    scores = []
    for k in range(frames):
        _, control, defend = frame_effects(w, mapping, base, last, frames_since_adaptation + k)
        w = step(w, control, defend)
        last = compute_score(w, scoring)
        scores.append(last)
    return w, scores


def shadow_validate(w: WorldState, candidate: Mapping, horizon: int, p: ScoringParams,
                    base: ControlParams | None = None, index: int = 0) -> float:
    """Mean ``s_overall`` over the final quarter of a ``horizon``-frame shadow run."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    base = base or ControlParams()
    sw = clone(w)
    sw.rng = rngmod.stream(w.seed, "shadow", w.frame, index)
    _, scores = run_frames(sw, candidate, base, p, horizon)
    tail = scores[horizon - max(1, horizon // 4):]
    return float(np.mean([s.s_overall for s in tail]))


def _shadow_job(args):
    return shadow_validate(*args)


# ------------------------------------------------------------- candidates

@dataclass
class AdaptationCandidate:
    candidate_id: str
    target_primitive: str
    edits: list[dict]
    origin: str
    rationale: str = ""
    confidence: float = 0.0
    shadow_score: float | None = None
    verdict: str = PENDING

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Backup:
    candidate_id: str
    mapping: Mapping
    shadow_score: float

    def to_json(self) -> dict:
        return {"candidate_id": self.candidate_id, "shadow_score": self.shadow_score,
                "mapping": json.loads(serialize_mapping(self.mapping))}


@dataclass
class EpisodeContext:
    primitive: str
    frame: int
    telemetry: dict[str, Any]
    features: list[float]
    detection_reason: str
    seed_path: tuple = (0,)


@dataclass
class AdaptationOutcome:
    frame: int
    primitive: str
    chosen: AdaptationCandidate | None
    new_mapping_version: int
    validated: list[AdaptationCandidate]
    wall_frames_spent: int
    mapping: Mapping | None = None  # the mapping to deploy (None when nothing chosen)
    backups: list[Backup] = field(default_factory=list)
    moderator_source: str = ""
    moderator_error: str | None = None
    record_id: int | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "frame": self.frame,
            "primitive": self.primitive,
            "chosen": self.chosen.to_json() if self.chosen else None,
            "new_mapping_version": self.new_mapping_version,
            "validated": [c.to_json() for c in self.validated],
            "wall_frames_spent": self.wall_frames_spent,
            "backups": [b.to_json() for b in self.backups],
            "moderator_source": self.moderator_source,
            "moderator_error": self.moderator_error,
            "record_id": self.record_id,
            "error": self.error,
        }


def choose(candidates: Sequence[AdaptationCandidate]) -> AdaptationCandidate | None:
    """Highest shadow score among accepted candidates; lower id wins ties."""
    accepted = [c for c in candidates if c.verdict == ACCEPTED]
    if not accepted:
        return None
    return min(accepted, key=lambda c: (-c.shadow_score, c.candidate_id))


def generate_backups(candidates: Sequence[AdaptationCandidate], chosen: AdaptationCandidate | None,
                     k: int, mappings: dict[str, Mapping]) -> list[Backup]:
    """The ``k`` best accepted candidates other than ``chosen``, ready to swap in."""
    if k <= 0:
        return []
    rest = [c for c in candidates if c.verdict == ACCEPTED and c is not chosen]
    rest.sort(key=lambda c: (-c.shadow_score, c.candidate_id))
    return [Backup(c.candidate_id, mappings[c.candidate_id], c.shadow_score) for c in rest[:k]]


# ------------------------------------------------------------------- episode

def run_adaptation(w: WorldState, mapping: Mapping, ctx: EpisodeContext,
                   store: ProvenanceStore, moderator: Moderator, cfg: AdaptConfig,
                   scoring: ScoringParams, base: ControlParams,
                   expert: ExpertRegistry | None = None,
                   extra_context: dict[str, Any] | None = None) -> AdaptationOutcome:
    """Run one adaptation episode from the live state ``w`` (which is not modified)."""
    registry = load_registry()
    prim = ctx.primitive
    current = mapping[prim]

    cases = []
    if moderator.use_pc:
        for rid, dist in store.retrieve_similar(ctx.features, cfg.top_k_cases):
            cases.append({"record_id": rid, "distance": dist, "record": store.get(rid)})
    snippets = expert.snippets_for(prim) if (moderator.use_ek and expert is not None) else []
    req = ModeratorRequest(prim, list(ctx.features), dict(ctx.telemetry), serialize(current),
                           cases, snippets, cfg.budget)
    try:
        resp = moderator.synthesize(req, seed=ctx.seed_path, base=base)
    except Exception as exc:  # scripted fallback itself failed
        raise AdaptationError(f"moderator failed: {exc}") from exc

    candidates: list[AdaptationCandidate] = []
    mappings: dict[str, Mapping] = {}
    for i, mc in enumerate(resp.candidates[: cfg.budget]):
        cid = f"f{ctx.frame:05d}-c{i}"
        try:
            target = apply_edits(current, mc.edits, registry)
            mapping.candidate(target).control(base)
            mapping.candidate(target).defend()
        except ProgramError:
            continue
        candidates.append(AdaptationCandidate(cid, prim, mc.edits, mc.origin,
                                              mc.rationale, mc.confidence))
        mappings[cid] = mapping.candidate(target)

    jobs = [(w, mappings[c.candidate_id], cfg.horizon, scoring, base, i)
            for i, c in enumerate(candidates)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            scores = list(pool.map(_shadow_job, jobs))
    else:
        scores = [_shadow_job(j) for j in jobs]
    for c, s in zip(candidates, scores):
        c.shadow_score = s
        c.verdict = ACCEPTED if s >= cfg.theta_accept else REJECTED

    chosen = choose(candidates)
    new_mapping = mapping.swapped(mappings[chosen.candidate_id][prim]) if chosen else None
    outcome = AdaptationOutcome(
        frame=ctx.frame,
        primitive=prim,
        chosen=chosen,
        new_mapping_version=new_mapping.version if new_mapping else mapping.version,
        validated=candidates,
        wall_frames_spent=cfg.validation_latency,
        mapping=new_mapping,
        backups=generate_backups(candidates, chosen, cfg.backups, mappings),
        moderator_source=moderator.last_source,
        moderator_error=moderator.last_error,
    )
    record = build_record(outcome, current, ctx, len(cases), store, cfg, extra_context)
    best = best_candidate(outcome)
    snap = None
    if store.snapshot_dir is not None:
        snap = f"snapshots/record-{len(store):06d}.json"
        record["environmental_context"]["snapshot"] = snap
    outcome.record_id = store.append(record)
    if snap is not None:
        idx = candidates.index(best) if best is not None else None
        write_snapshot(store.path.parent / snap, w, mapping, base, scoring, cfg.horizon,
                       idx, best.shadow_score if best else None, prim)
    return outcome


def best_candidate(outcome: AdaptationOutcome) -> AdaptationCandidate | None:
    """The deployed candidate, else the best-scoring rejected one, else None."""
    if outcome.chosen is not None:
        return outcome.chosen
    if not outcome.validated:
        return None
    return min(outcome.validated, key=lambda c: (-c.shadow_score, c.candidate_id))


def _pct(x: float) -> str:
    return f"{100.0 * x:.0f}%"


def build_record(outcome: AdaptationOutcome, current: Pipeline, ctx: EpisodeContext,
                 n_cases: int, store: ProvenanceStore, cfg: AdaptConfig,
                 extra_context: dict[str, Any] | None = None) -> dict:
    """Provenance record for an episode (layout of ``provenance_record.schema.json``).

    ``generated_program`` holds the edit script of the deployed candidate or,
    when none was accepted, of the best rejected one, so that later episodes
    can learn from failed attempts too. ``outcome.status`` tells them apart.
    """
    cands = outcome.validated
    best = best_candidate(outcome)
    registry = load_registry()
    target = apply_edits(current, best.edits, registry) if best else current
    deployed = apply_edits(current, outcome.chosen.edits, registry) if outcome.chosen else current
    s_mean = float(ctx.telemetry.get("s_overall_mean", 0.0))
    n_acc = sum(c.verdict == ACCEPTED for c in cands)
    env = {k: v for k, v in ctx.telemetry.items()}
    env.update(extra_context or {})
    if outcome.chosen:
        logic = f"{outcome.chosen.origin}: {outcome.chosen.rationale} " \
                f"(shadow score {outcome.chosen.shadow_score:.1f} >= {cfg.theta_accept:g})"
    elif best:
        logic = f"no candidate reached {cfg.theta_accept:g}; best was {best.origin} " \
                f"at {best.shadow_score:.1f}: {best.rationale}"
    else:
        logic = "moderator produced no valid candidate"
    return {
        "timestamp": (SIM_EPOCH + timedelta(seconds=ctx.frame)).isoformat(),
        "logical_primitive": PRIMITIVE_LABELS[ctx.primitive],
        "environmental_context": env,
        "program_adaptation": {
            "original_program": serialize(current),
            "selected_program": {"programs": deployed.ids()},
            "generated_program": json.dumps(best.edits, sort_keys=True) if best else None,
            "adaptation_details": {"parameter_changes": diff_params(current, target)},
            "confidence": _pct(best.confidence) if best else "0%",
        },
        "validation_results": {
            "shadow_mode": "success" if outcome.chosen else "failure",
            "success_rate": _pct(n_acc / len(cands)) if cands else "0%",
            "response_time": f"{outcome.wall_frames_spent} frames",
        },
        "outcome": {
            "status": "adapted" if outcome.chosen else "no_candidate_accepted",
            "performance_improvement":
                f"{(best.shadow_score - s_mean):+.1f} pts" if best else "+0.0 pts",
        },
        "interpretable_rationale": {
            "detection_reason": ctx.detection_reason,
            "adaptation_logic": logic,
            "rollback_available": True,
        },
        "agent_version": f"swarmadapt {__version__}",
        "program_version": f"registry v1, mapping v{outcome.new_mapping_version}",
        "rag_version": f"{n_cases} cases retrieved from {len(store)} records",
    }


def write_snapshot(path: Path, w: WorldState, mapping: Mapping, base: ControlParams,
                   scoring: ScoringParams, horizon: int, index: int | None,
                   shadow_score: float | None, primitive: str) -> None:
    """Everything needed to re-run the recorded shadow validation bit for bit."""
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "world": world_to_json(w),
        "mapping": json.loads(serialize_mapping(mapping)),
        "base_control": asdict(base),
        "scoring": asdict(scoring),
        "horizon": horizon,
        "primitive": primitive,
        "shadow_index": index,
        "shadow_score": shadow_score,
    }
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


# ------------------------------------------------------------------ telemetry

def episode_telemetry(w: WorldState, history: Sequence[FormationScore], window: int,
                      obs: Observation, scenario_id: str, round_index: int = 0) -> dict[str, Any]:
    """Numeric context for retrieval and for the moderator."""
    recent = [s.s_overall for s in history[-window:]]
    slope = float(np.polyfit(np.arange(len(recent)), recent, 1)[0]) if len(recent) > 1 else 0.0
    last = history[-1]
    d = w.disturbance
    wind = float(np.linalg.norm(d.wind_base + d.gust.mean(axis=0)))
    flagged = np.flatnonzero(w.residual > FLAG_TOL)
    most = int(flagged[np.argmax(w.residual[flagged])]) if len(flagged) else -1
    return {
        "scenario": scenario_id,
        "seed": w.seed,
        "round": round_index,
        "frame": w.frame,
        "n_aircraft": w.n,
        "s_overall_mean": float(np.mean(recent)),
        "s_overall_slope": slope,
        "e_radius": last.e_radius,
        "sigma_height": last.sigma_height,
        "infected_report_rate": obs.infected_report_rate,
        "wind_magnitude": wind,
        "rain_drag": float(d.rain_drag),
        "e_radius_slot": last.e_radius_slot,
        "most_inconsistent": most,
    }
