"""Test doubles and generators shared by the adaptation and acceptance tests."""

from dataclasses import dataclass, field

import numpy as np

from swarmadapt.config import ControlParams, preset
from swarmadapt.moderator import Moderator, ModeratorCandidate, ModeratorResponse
from swarmadapt.programs import FORMATION, Op, ParamPatch, default_mapping, edit_to_json
from swarmadapt.adaptation import EpisodeContext, run_frames
from swarmadapt.world import init_world


@dataclass
class FixedModerator(Moderator):
    """Answers every request with the same edit scripts."""

    scripts: list = field(default_factory=list)

    def synthesize(self, req, seed=(0,), base=None):
        self.last_source, self.last_error = "fixed", None
        return ModeratorResponse([ModeratorCandidate(s, f"fixed {i}", 0.5)
                                  for i, s in enumerate(self.scripts)])


def random_l1_script(gen: np.random.Generator, base: ControlParams = ControlParams()):
    """MOD edit of 1-3 L1 parameters by log-uniform factors in [1/4, 8]."""
    params = {"P1.1": {"w_goal": base.w_goal, "w_coh": base.w_coh, "w_sep": base.w_sep},
              "P1.3": {"v_max": base.v_max}}
    pairs = [(pid, k) for pid, d in params.items() for k in d]
    script = []
    for j in gen.choice(len(pairs), size=int(gen.integers(1, 4)), replace=False):
        pid, k = pairs[j]
        value = params[pid][k] * float(np.exp(gen.uniform(np.log(0.25), np.log(8.0))))
        script.append(edit_to_json(Op.MOD, ParamPatch(pid, {k: min(value, 10.0)})))
    return script


def storm_world(frames=60, seed=0):
    """E2 world after ``frames`` frames under the default mapping."""
    cfg = preset("E2", seed=seed)
    w = init_world(cfg)
    mapping = default_mapping(cfg.control)
    w, scores = run_frames(w, mapping, cfg.control, cfg.scoring, frames)
    return cfg, w, mapping, scores


def context(w, primitive=FORMATION):
    return EpisodeContext(primitive, w.frame, {"s_overall_mean": 0.0}, [0.0] * 10,
                          "test", (w.seed, 0, 0))

