import json

import numpy as np
import pytest

from helpers import FixedModerator, context, random_l1_script, storm_world
from oracles import shadow_oracle
from swarmadapt.adaptation import (
    ACCEPTED,
    REJECTED,
    AdaptationCandidate,
    DegradationDetector,
    choose,
    detect,
    generate_backups,
    run_adaptation,
    run_frames,
    shadow_validate,
)
from swarmadapt.config import AdaptConfig, preset
from swarmadapt.programs import FORMATION, Op, ParamPatch, apply_edits, default_mapping, edit_to_json
from swarmadapt.provenance import ProvenanceStore, validate_record
from swarmadapt.scoring import FormationScore
from swarmadapt.world import init_world


def _s(v):
    return FormationScore(0, v, v, v, 0.0, 0.0)


def test_detector_fires_after_window_consecutive_frames():
    d = DegradationDetector(window=3)
    fired = []
    for v in (50, 50, 70, 50, 50, 50, 50):
        d, f = detect(d, _s(v))
        fired.append(f)
    assert fired == [False, False, False, False, False, True, True]


def test_detector_threshold_is_strict():
    d, f = detect(DegradationDetector(window=1), _s(60.0))
    assert not f and d.consecutive_below == 0
    d, f = detect(d, _s(59.99))
    assert f


def test_disarmed_detector_counts_but_does_not_fire():
    d = DegradationDetector(window=2, armed=False)
    for _ in range(3):
        d, f = detect(d, _s(10))
        assert not f
    assert d.consecutive_below == 3


def _cand(cid, score, theta=70.0):
    return AdaptationCandidate(cid, FORMATION, [], "ModeratorNovel", shadow_score=score,
                               verdict=ACCEPTED if score >= theta else REJECTED)


def test_choose_argmax_of_accepted():
    cands = [_cand("c0", 65.0), _cand("c1", 72.0), _cand("c2", 81.0)]
    assert choose(cands).candidate_id == "c2"
    assert choose([_cand("c0", 65.0), _cand("c1", 69.9)]) is None
    assert choose([]) is None


def test_choose_tie_goes_to_lower_id():
    assert choose([_cand("c3", 80.0), _cand("c1", 80.0), _cand("c2", 79.0)]).candidate_id == "c1"


def test_backups_exclude_chosen_and_respect_k():
    cands = [_cand("c0", 90.0), _cand("c1", 75.0), _cand("c2", 75.0), _cand("c3", 50.0)]
    maps = {c.candidate_id: f"m{c.candidate_id}" for c in cands}
    chosen = choose(cands)
    assert generate_backups(cands, chosen, 0, maps) == []
    b = generate_backups(cands, chosen, 2, maps)
    assert [x.candidate_id for x in b] == ["c1", "c2"]
    assert [x.candidate_id for x in generate_backups(cands, chosen, 5, maps)] == ["c1", "c2"]


# ------------------------------------------------------------------ shadows

@pytest.fixture(scope="module")
def storm():
    return storm_world(60)


def test_shadow_does_not_touch_live_world(storm):
    cfg, w, mapping, _ = storm
    before = w.state_hash()
    shadow_validate(w, mapping, 20, cfg.scoring, cfg.control, 3)
    assert w.state_hash() == before


def test_shadow_matches_oracle(storm):
    cfg, w, mapping, _ = storm
    for i in range(3):
        assert shadow_validate(w, mapping, 16, cfg.scoring, cfg.control, i) == \
            pytest.approx(shadow_oracle(w, mapping, cfg.control, 16, i), abs=1e-9)


def test_calm_shadow_of_current_mapping_is_the_live_future():
    cfg = preset("E1")
    mapping = default_mapping(cfg.control)
    w, _ = run_frames(init_world(cfg), mapping, cfg.control, cfg.scoring, 30)
    _, live = run_frames(w, mapping, cfg.control, cfg.scoring, 40)
    tail = [s.s_overall for s in live[30:]]
    assert shadow_validate(w, mapping, 40, cfg.scoring, cfg.control) == pytest.approx(np.mean(tail))


def test_zero_goal_weight_is_worse_in_storm(storm):
    cfg, w, mapping, _ = storm
    l1 = mapping[FORMATION]
    strong = apply_edits(l1, [edit_to_json(Op.MOD, ParamPatch("P1.1", {"w_goal": 3.0}))])
    none = apply_edits(l1, [edit_to_json(Op.MOD, ParamPatch("P1.1", {"w_goal": 0.0}))])
    s_strong = shadow_validate(w, mapping.candidate(strong), 100, cfg.scoring, cfg.control)
    s_none = shadow_validate(w, mapping.candidate(none), 100, cfg.scoring, cfg.control)
    assert s_none < s_strong


# ------------------------------------------------------------------ episodes

def _episode(storm, scripts, **kw):
    cfg, w, mapping, _ = storm
    acfg = AdaptConfig(horizon=12, **kw)
    store = ProvenanceStore()
    out = run_adaptation(w, mapping, context(w), store, FixedModerator(scripts=scripts),
                         acfg, cfg.scoring, cfg.control)
    return out, store, acfg


def test_episode_chooses_oracle_argmax(storm):
    cfg, w, mapping, _ = storm
    gen = np.random.default_rng(5)
    scripts = [random_l1_script(gen) for _ in range(5)]
    out, store, acfg = _episode(storm, scripts, theta_accept=0.0)
    l1 = mapping[FORMATION]
    oracle = [shadow_oracle(w, mapping.candidate(apply_edits(l1, s)), cfg.control, 12, i)
              for i, s in enumerate(scripts)]
    best = int(np.argmax(oracle))
    assert out.chosen.candidate_id == f"f{w.frame:05d}-c{best}"
    assert out.new_mapping_version == mapping.version + 1
    assert out.mapping[FORMATION] == apply_edits(l1, scripts[best])
    assert len(out.backups) == 2
    validate_record(store.get(out.record_id))


def test_episode_all_rejected_keeps_mapping(storm):
    _, w, mapping, _ = storm
    out, store, _ = _episode(storm, [random_l1_script(np.random.default_rng(1))],
                             theta_accept=100.5)
    assert out.chosen is None and out.mapping is None
    assert out.new_mapping_version == mapping.version
    rec = store.get(out.record_id)
    assert rec["outcome"]["status"] == "no_candidate_accepted"
    assert rec["program_adaptation"]["generated_program"] is not None


def test_invalid_candidates_are_dropped(storm):
    good = [edit_to_json(Op.MOD, ParamPatch("P1.1", {"w_goal": 2.0}))]
    bad = [{"op": "DEL", "arg": "P9.9"}]
    out, _, _ = _episode(storm, [bad, good], theta_accept=0.0)
    assert [c.candidate_id for c in out.validated] == [f"f{storm[1].frame:05d}-c1"]


def test_provenance_store_is_not_read_when_off(storm):
    cfg, w, mapping, _ = storm
    store = ProvenanceStore()
    mod = FixedModerator(use_pc=False, use_ek=False, scripts=[random_l1_script(np.random.default_rng(0))])
    run_adaptation(w, mapping, context(w), store, mod, AdaptConfig(horizon=8),
                   cfg.scoring, cfg.control)
    assert store.reads == 0 and len(store) == 1


def test_snapshot_sidecar_written(tmp_path, storm):
    cfg, w, mapping, _ = storm
    store = ProvenanceStore(tmp_path / "provenance.jsonl")
    out = run_adaptation(w, mapping, context(w), store,
                         FixedModerator(scripts=[random_l1_script(np.random.default_rng(2))]),
                         AdaptConfig(horizon=8, theta_accept=0.0), cfg.scoring, cfg.control)
    rec = store.get(out.record_id)
    snap = tmp_path / rec["environmental_context"]["snapshot"]
    assert snap.exists()
    assert json.loads(snap.read_text())["shadow_score"] == out.chosen.shadow_score
