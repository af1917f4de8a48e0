"""Hypothesis generators for valid programs, guards and pipelines."""

from hypothesis import strategies as st

from swarmadapt.programs import DEFEND, FORMATION, Cmp, Const, Not, Pipeline, ProgramSpec
from swarmadapt.programs.guards import GUARD_FIELDS, And, Or

finite = dict(allow_nan=False, allow_infinity=False)

L1_PARAMS = {
    "WeightSet": {k: st.floats(0.0, 10.0, **finite) for k in ("w_sep", "w_coh", "w_align", "w_goal")},
    "DistanceSet": {k: st.floats(1.0, 2000.0, **finite) for k in ("r_sep", "r_coh", "r_comm")},
    "SpeedCap": {"v_max": st.floats(0.5, 20.0, **finite), "a_max": st.floats(0.1, 5.0, **finite)},
}
L2_PARAMS = {
    "OutlierFilter": {"z": st.floats(0.0, 10.0, **finite)},
    "TrustDecay": {"rate": st.floats(0.0, 1.0, **finite)},
    "WeightNoise": {"sigma": st.floats(0.0, 2.0, **finite)},
}

cmp_guard = st.builds(Cmp, st.sampled_from(GUARD_FIELDS),
                      st.sampled_from(["<", "<=", ">", ">=", "==", "!="]),
                      st.floats(-1e3, 1e3, **finite))
guards = st.recursive(
    st.one_of(cmp_guard, st.builds(Const, st.booleans())),
    lambda g: st.one_of(st.builds(Not, g),
                        st.builds(And, st.lists(g, min_size=1, max_size=3).map(tuple)),
                        st.builds(Or, st.lists(g, min_size=1, max_size=3).map(tuple))),
    max_leaves=5,
)


@st.composite
def specs(draw, primitive=None, pid=None, guarded=None):
    primitive = primitive or draw(st.sampled_from([FORMATION, DEFEND]))
    if primitive == FORMATION:
        template = draw(st.sampled_from(sorted(L1_PARAMS) + ["SlotReassign"]))
        if template == "SlotReassign":
            params = {"phase": draw(st.floats(-3.14, 3.14, **finite))}
        else:
            choices = L1_PARAMS[template]
            names = draw(st.lists(st.sampled_from(sorted(choices)), min_size=1, unique=True))
            params = {n: draw(choices[n]) for n in names}
    else:
        template = draw(st.sampled_from(sorted(L2_PARAMS) + ["Quarantine"]))
        if template == "Quarantine":
            params = {"ids": draw(st.lists(st.integers(0, 20), max_size=4)),
                      "ttl": draw(st.integers(1, 1000))}
            if draw(st.booleans()):
                params["since"] = draw(st.integers(0, 1000))
        else:
            params = {n: draw(s) for n, s in L2_PARAMS[template].items()}
    if guarded is None:
        guarded = draw(st.booleans())
    guard = draw(guards) if guarded else None
    pid = pid or draw(st.from_regex(r"X[0-9]{1,3}", fullmatch=True))
    return ProgramSpec(pid, primitive, template, params, guard)


@st.composite
def pipelines(draw, primitive=None, max_size=5):
    primitive = primitive or draw(st.sampled_from([FORMATION, DEFEND]))
    n = draw(st.integers(0, max_size))
    ids = draw(st.lists(st.from_regex(r"X[0-9]{1,3}", fullmatch=True), min_size=n, max_size=n,
                        unique=True))
    return Pipeline(primitive, tuple(draw(specs(primitive, pid)) for pid in ids))
