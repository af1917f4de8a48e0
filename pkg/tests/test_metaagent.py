import json

import pytest

from swarmadapt.metaagent import (
    MetaAgent,
    MetaPolicy,
    PolicyBank,
    PolicyError,
    default_policy,
    load_policy,
    policy_from_json,
    select_primitive,
    switch_policy,
)
from swarmadapt.programs import DEFEND, FORMATION, Cmp, Observation


@pytest.mark.parametrize("rate,expected", [
    (0.0, FORMATION), (0.15, FORMATION), (0.16, DEFEND), (0.9, DEFEND),
])
def test_default_policy_thresholds_infected_rate(rate, expected):
    assert select_primitive(default_policy(), Observation(infected_report_rate=rate)) == expected


@pytest.mark.parametrize("s,e,h", [(100.0, 0.0, 0.0), (3.0, 480.0, 90.0), (55.5, 12.0, 7.0)])
def test_default_policy_ignores_formation_quality(s, e, h):
    for rate, want in ((0.05, FORMATION), (0.5, DEFEND)):
        obs = Observation(s_overall=s, e_radius=e, sigma_height=h, infected_report_rate=rate)
        assert select_primitive(default_policy(), obs) == want


def test_first_matching_rule_wins():
    pol = MetaPolicy("p", ((Cmp("s_overall", "<", 50.0), DEFEND),
                           (Cmp("s_overall", "<", 80.0), FORMATION)), DEFEND)
    assert select_primitive(pol, Observation(s_overall=10.0)) == DEFEND
    assert select_primitive(pol, Observation(s_overall=70.0)) == FORMATION
    assert select_primitive(pol, Observation(s_overall=90.0)) == DEFEND


def test_policy_json_round_trip(tmp_path):
    pol = default_policy()
    path = tmp_path / "policy.json"
    path.write_text(json.dumps(pol.to_json()))
    assert load_policy(path) == pol


@pytest.mark.parametrize("doc", [
    {"policy_id": "x", "rules": [{"when": {"const": True}, "then": "Attack"}]},
    {"policy_id": "x", "rules": [{"when": {"cmp": ["altitude", ">", 1]}, "then": DEFEND}]},
    {"policy_id": "x"},
])
def test_malformed_policy_rejected(doc):
    with pytest.raises(PolicyError):
        policy_from_json(doc)


def _bank():
    a, b, c = (MetaPolicy(n) for n in "abc")
    return PolicyBank(a, (b, c))


def test_switch_policy_twice_restores_previous_active():
    bank = _bank()
    once = switch_policy(bank, "b")
    assert once.active.policy_id == "b" and once.version == 1
    twice = switch_policy(once, "a")
    assert twice.active.policy_id == "a" and twice.version == 2


def test_switch_policy_conserves_the_set_of_policies():
    bank = _bank()
    after = switch_policy(bank, "c")
    assert sorted(p.policy_id for p in after.policies()) == ["a", "b", "c"]
    assert len(after.backups) == len(bank.backups)


def test_switch_to_unknown_backup_fails():
    with pytest.raises(PolicyError):
        switch_policy(_bank(), "zzz")


def test_bank_rejects_duplicate_ids():
    with pytest.raises(PolicyError):
        PolicyBank(MetaPolicy("a"), (MetaPolicy("a"),))


def test_with_backup_keeps_at_most_k():
    bank = PolicyBank(MetaPolicy("a"))
    for name in "bcd":
        bank = bank.with_backup(MetaPolicy(name), 2)
    assert [b.policy_id for b in bank.backups] == ["d", "c"]
    assert bank.with_backup(MetaPolicy("e"), 0) is bank


def test_meta_agent_hold_delays_switch():
    agent = MetaAgent(hold=3)
    bad = Observation(infected_report_rate=0.5)
    assert [agent.observe(bad) for _ in range(3)] == [FORMATION, FORMATION, DEFEND]


def test_meta_agent_interrupted_streak_restarts():
    agent = MetaAgent(hold=3)
    bad, good = Observation(infected_report_rate=0.5), Observation()
    agent.observe(bad)
    agent.observe(bad)
    agent.observe(good)
    assert [agent.observe(bad) for _ in range(3)] == [FORMATION, FORMATION, DEFEND]


def test_meta_agent_hold_must_be_positive():
    with pytest.raises(PolicyError):
        MetaAgent(hold=0)
