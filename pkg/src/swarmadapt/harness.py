"""Scenario runner, ablation driver, replay and offline rescoring.

Files written by :func:`run_scenario` under the output directory:

``scores.csv``          one row per frame (``frame,s_radius,s_height,s_overall,e_radius,sigma_height``)
``frames.csv``          one row per aircraft per frame (``frame,aircraft_id,x,y,z,vx,vy,vz,infected``)
``adaptations.jsonl``   one adaptation outcome per line
``provenance.jsonl``    provenance records (plus ``snapshots/`` for replay), unless a shared store is passed
``summary.json``        headline metrics, all recomputable from the files above
"""

from __future__ import annotations

import csv
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .adaptation import (
    AdaptationError,
    DegradationDetector,
    EpisodeContext,
    detect,
    episode_telemetry,
    frame_effects,
    run_adaptation,
    shadow_validate,
)
from .config import AdaptConfig, ControlParams, ScenarioConfig, ScoringParams, TargetConfig
from .metaagent import MetaAgent
from .moderator import Moderator
from .programs import (
    ParseError,
    ProgramError,
    apply_edits,
    default_mapping,
    load_registry,
    parse,
    parse_mapping,
    serialize,
    serialize_mapping,
)
from .provenance import (
    ExpertRegistry,
    ProvenanceStore,
    StoreError,
    load_expert_registry,
    primitive_of,
)
from .scoring import (
    FormationScore,
    compute_score,
    consensus_reached,
    radius_deviation_pct,
    score_from_positions,
    write_scores,
)
from .world import init_world, step, world_from_json

FRAME_COLUMNS = ("frame", "aircraft_id", "x", "y", "z", "vx", "vy", "vz", "infected")
ABLATION_CONFIGS = {  # name -> (use_ek, use_pc)
    "Full": (True, True),
    "w/o PC": (True, False),
    "w/o EK": (False, True),
    "w/o Both": (False, False),
}
REPLAY_TOL = 1e-9
_PROGRAM_ID = re.compile(r"P\d+\.\d+")


class ReplayError(RuntimeError):
    pass


@dataclass
class RunReport:
    out_dir: Path | None
    scores: list[FormationScore]
    outcomes: list[dict]
    summary: dict[str, Any]

    @property
    def scores_path(self) -> Path | None:
        return self.out_dir / "scores.csv" if self.out_dir else None

    @property
    def adaptations_path(self) -> Path | None:
        return self.out_dir / "adaptations.jsonl" if self.out_dir else None

    @property
    def provenance_path(self) -> Path | None:
        return self.out_dir / "provenance.jsonl" if self.out_dir else None


def _frame_rows(w) -> Iterable[list]:
    for i in range(w.n):
        yield [w.frame, i, *(repr(float(v)) for v in w.pos[i]),
               *(repr(float(v)) for v in w.vel[i]), int(w.infected[i])]


def final_quarter_mean(scores: Sequence[FormationScore]) -> float:
    q = max(1, len(scores) // 4)
    return float(np.mean([s.s_overall for s in scores[-q:]]))


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None,
                 store: ProvenanceStore | None = None, expert: ExpertRegistry | None = None,
                 round_index: int = 0, transport=None, write_frames: bool = True) -> RunReport:
    """Run ``cfg.eval_window`` live frames, adapting when the detector fires.

    ``store`` defaults to ``<out_dir>/provenance.jsonl`` (in memory without an
    output directory); pass a shared store to carry experience across runs.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if store is None:
        store = ProvenanceStore(out / "provenance.jsonl" if out else None)
    if expert is None:
        expert = load_expert_registry()
    moderator = Moderator(cfg.moderator, use_ek=cfg.use_ek, use_pc=cfg.use_pc, transport=transport)
    ac: AdaptConfig = cfg.adapt
    p: ScoringParams = cfg.scoring
    base: ControlParams = cfg.control

    w = init_world(cfg, cfg.seed)
    mapping = default_mapping(base)
    agent = MetaAgent()
    det = DegradationDetector(ac.theta_deg, ac.window)
    last = compute_score(w, p)
    scores: list[FormationScore] = []
    outcomes: list[dict] = []
    triggers: list[int] = []
    pending = None  # (frame to swap at, mapping)
    rearm_at = None
    since = 0
    episode = 0

    frames_fh = open(out / "frames.csv", "w", newline="", encoding="utf-8") \
        if (out is not None and write_frames) else None
    try:
        frames_out = csv.writer(frames_fh, lineterminator="\n") if frames_fh else None
        if frames_out:
            frames_out.writerow(FRAME_COLUMNS)
            frames_out.writerows(_frame_rows(w))
        for _ in range(cfg.eval_window):
            obs, control, defend = frame_effects(w, mapping, base, last, since)
            primitive = agent.observe(obs)
            w = step(w, control, defend)
            last = compute_score(w, p)
            scores.append(last)
            since += 1
            if frames_out:
                frames_out.writerows(_frame_rows(w))

            if pending is not None and w.frame >= pending[0]:
                mapping = pending[1]
                pending, since = None, 0
                det = replace(det, armed=True, consecutive_below=0)
            if rearm_at is not None and w.frame >= rearm_at:
                det, rearm_at = replace(det, armed=True), None

            det, fired = detect(det, last)
            if not fired:
                continue
            triggers.append(w.frame)
            det = replace(det, armed=False)
            if not ac.enabled:
                rearm_at = w.frame + ac.cooldown
                continue
            telemetry = episode_telemetry(w, scores, ac.window, obs, cfg.scenario_id, round_index)
            features = store.features.featurize(telemetry, primitive).tolist()
            ctx = EpisodeContext(
                primitive, w.frame, telemetry, features,
                f"s_overall below {ac.theta_deg:g} for {det.consecutive_below} consecutive frames "
                f"(mean {telemetry['s_overall_mean']:.1f})",
                (cfg.seed, round_index, episode),
            )
            episode += 1
            try:
                outcome = run_adaptation(w, mapping, ctx, store, moderator, ac, p, base, expert)
            except (AdaptationError, StoreError) as exc:
                outcomes.append({"frame": w.frame, "primitive": primitive, "chosen": None,
                                 "error": str(exc)})
                rearm_at = w.frame + ac.cooldown
                continue
            outcomes.append(outcome.to_json())
            if outcome.mapping is not None:
                pending = (w.frame + ac.validation_latency, outcome.mapping)
            else:
                rearm_at = w.frame + ac.cooldown
    finally:
        if frames_fh:
            frames_fh.close()

    summary = {
        "scenario": cfg.scenario_id,
        "seed": cfg.seed,
        "round": round_index,
        "adapt": ac.enabled,
        "use_ek": cfg.use_ek,
        "use_pc": cfg.use_pc,
        "frames": len(scores),
        "final_s_overall": scores[-1].s_overall,
        "mean_s_overall_last_quarter": final_quarter_mean(scores),
        "radius_deviation_pct": radius_deviation_pct(w),
        "n_episodes": len(outcomes),
        "n_adaptations": sum(1 for o in outcomes if o.get("chosen")),
        "consensus_reached": consensus_reached(scores),
        "trigger_frames": triggers,
        "final_mapping": json.loads(serialize_mapping(mapping)),
    }
    if out is not None:
        write_scores(out / "scores.csv", scores)
        with open(out / "adaptations.jsonl", "w", encoding="utf-8") as fh:
            for o in outcomes:
                fh.write(json.dumps(o, sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return RunReport(out, scores, outcomes, summary)


# ------------------------------------------------------------------ ablation

def _ablation_chain(args) -> list[dict]:
    base, name, seed, rounds, store_path = args
    use_ek, use_pc = ABLATION_CONFIGS[name]
    cfg = replace(base, seed=seed, use_ek=use_ek, use_pc=use_pc)
    store = ProvenanceStore(store_path)
    expert = load_expert_registry()
    rows = []
    for r in range(rounds):
        rep = run_scenario(cfg, None, store=store, expert=expert, round_index=r)
        rows.append({
            "config": name, "seed": seed, "round": r + 1,
            "score": rep.summary["mean_s_overall_last_quarter"],
            "n_adaptations": rep.summary["n_adaptations"],
            "n_episodes": rep.summary["n_episodes"],
            "store_reads": store.reads, "expert_reads": expert.reads,
        })
    return rows


def run_ablation(base: ScenarioConfig, rounds: int = 3, seeds: Sequence[int] = (0,),
                 out_dir: str | Path | None = None, workers: int = 1,
                 configs: Sequence[str] = tuple(ABLATION_CONFIGS)) -> list[dict]:
    """{Full, w/o PC, w/o EK, w/o Both} x rounds x seeds, provenance persisting across rounds.

    Every (configuration, seed) pair owns its store, so PC-enabled
    configurations accumulate their own experience. The score is the mean
    ``s_overall`` over the final quarter of each run.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "stores").mkdir(parents=True, exist_ok=True)
    jobs = []
    for name in configs:
        for seed in seeds:
            sp = None
            if out is not None:
                sp = out / "stores" / f"{name.replace('/', '').replace(' ', '_')}-seed{seed}.jsonl"
                if sp.exists():
                    sp.unlink()
            jobs.append((base, name, seed, rounds, sp))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(_ablation_chain, jobs))
    else:
        chains = [_ablation_chain(j) for j in jobs]
    rows = [row for chain in chains for row in chain]
    for chain in chains:
        for prev, row in zip([None] + chain[:-1], chain):
            row["delta"] = None if prev is None else row["score"] - prev["score"]
    if out is not None:
        write_ablation(out, rows, rounds, configs)
    return rows


def write_ablation(out: Path, rows: list[dict], rounds: int, configs: Sequence[str]) -> None:
    cols = ["config", "seed", "round", "score", "delta", "n_adaptations", "n_episodes",
            "store_reads", "expert_reads"]
    with open(out / "ablation_runs.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, cols, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r[k] is None else r[k]) for k in cols})
    # configuration x round table of seed means, each later round with its delta
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        header = ["configuration"]
        for k in range(1, rounds + 1):
            header += [f"round_{k}"] + ([f"delta_{k}"] if k > 1 else [])
        wr.writerow(header)
        for name in configs:
            means = [float(np.mean([r["score"] for r in rows
                                    if r["config"] == name and r["round"] == k]))
                     for k in range(1, rounds + 1)]
            line = [name]
            for k, m in enumerate(means):
                line.append(f"{m:.1f}")
                if k:
                    line.append(f"{m - means[k - 1]:+.1f}")
            wr.writerow(line)


# -------------------------------------------------------------------- replay

@dataclass
class ReplayReport:
    record_id: int
    primitive: str
    before: str
    after: str
    edits: list[dict]
    recorded_score: float | None = None
    replayed_score: float | None = None
    agrees: bool | None = None  # None when the record has no snapshot to re-check against
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _missing_programs(record: dict) -> list[str]:
    pool = load_registry().pool
    pa = record.get("program_adaptation", {})
    ids = list(pa.get("selected_program", {}).get("programs", []))
    for key in pa.get("adaptation_details", {}).get("parameter_changes", {}):
        m = _PROGRAM_ID.match(key)  # keys are "<program>" or "<program>.<param>"
        ids.append(m.group(0) if m else key)
    orig = pa.get("original_program")
    if isinstance(orig, str):
        try:
            ids += parse(orig).ids()
        except (ParseError, ProgramError):
            ids.append(orig)
    return sorted({i for i in ids if i not in pool})


def replay(store_path: str | Path, record_id: int) -> ReplayReport:
    """Rebuild a record's pipeline edit and re-run its shadow validation."""
    path = Path(store_path)
    try:
        store = ProvenanceStore(path)
        record = store.get(record_id)
    except (StoreError, KeyError) as exc:
        raise ReplayError(f"cannot load record {record_id} from {path}: {exc}") from exc
    prim = primitive_of(record)
    missing = _missing_programs(record)
    if prim is None or missing:
        parts = []
        if prim is None:
            parts.append(f"unknown logical primitive {record.get('logical_primitive')!r}")
        if missing:
            parts.append("programs not in the registry: " + ", ".join(missing))
        raise ReplayError("; ".join(parts))
    pa = record["program_adaptation"]
    try:
        before = parse(pa["original_program"])
        edits = json.loads(pa["generated_program"]) if pa["generated_program"] else []
        after = apply_edits(before, edits)
    except (ParseError, ProgramError, json.JSONDecodeError, TypeError) as exc:
        raise ReplayError(f"record {record_id}: {exc}") from exc
    rep = ReplayReport(record_id, prim, serialize(before), serialize(after), edits)
    status = record["outcome"]["status"]
    if status == "adapted" and after.ids() != pa["selected_program"]["programs"]:
        raise ReplayError(f"record {record_id}: edits yield {after.ids()} but the record "
                          f"lists {pa['selected_program']['programs']}")

    snap = record["environmental_context"].get("snapshot")
    if not snap:
        rep.notes.append("no snapshot; shadow re-check skipped")
        return rep
    try:
        doc = json.loads((path.parent / snap).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReplayError(f"snapshot {snap}: {exc}") from exc
    mapping = parse_mapping(json.dumps(doc["mapping"]))
    if serialize(mapping[prim]) != serialize(before):
        raise ReplayError(f"record {record_id}: original program disagrees with its snapshot")
    rep.recorded_score = doc["shadow_score"]
    if doc["shadow_index"] is None:
        rep.notes.append("episode produced no candidate; nothing to re-check")
        return rep
    world = world_from_json(doc["world"])
    rep.replayed_score = shadow_validate(
        world, mapping.candidate(after), doc["horizon"], ScoringParams(**doc["scoring"]),
        ControlParams(**doc["base_control"]), doc["shadow_index"])
    rep.agrees = abs(rep.replayed_score - rep.recorded_score) <= REPLAY_TOL
    if not rep.agrees:
        rep.notes.append("replayed shadow score differs from the recorded one")
    return rep


# ------------------------------------------------------------------- rescore

def rescore_frames(path: str | Path, target: TargetConfig | None = None,
                   p: ScoringParams | None = None) -> list[FormationScore]:
    """Recompute per-frame scores from a ``frames.csv`` file."""
    target = target or TargetConfig()
    p = p or ScoringParams()
    by_frame: dict[int, list[tuple[int, list[float]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(FRAME_COLUMNS[:5]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            by_frame.setdefault(int(row["frame"]), []).append(
                (int(row["aircraft_id"]), [float(row["x"]), float(row["y"]), float(row["z"])]))
    out = []
    center = (target.center[0], target.center[1], target.height)
    for frame in sorted(by_frame):
        pos = np.array([xyz for _, xyz in sorted(by_frame[frame])])
        out.append(score_from_positions(pos, center, target.radius, p, frame))
    return out
