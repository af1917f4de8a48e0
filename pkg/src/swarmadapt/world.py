"""Deterministic discrete-time swarm simulator.

One frame is one Euler step (dt = 1). Each aircraft blends four unit-bounded
steering terms (separation, cohesion, alignment, goal seeking) computed from
the *broadcast* states of its neighbors, adds the wind, clips to ``a_max``,
integrates, and clips the speed to ``v_max``.

Broadcasts are part of the state: they are produced at the end of every frame
(and at init), so observing neighbors is a pure function of a ``WorldState``.
Honest aircraft broadcast the truth. Infected aircraft broadcast a spoofed
position and velocity (the spoof law is documented on ``_spoof``) but keep
flying honestly; malicious aircraft additionally fly a lure orbit inside the
formation.

Every honest broadcast satisfies ``p(t) = p(t-1) + v(t)`` exactly, so the
kinematic residual ``|p(t) - p(t-1) - v(t)|`` of a broadcast is zero unless it
was spoofed. That residual is what receivers use to flag reports.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .config import ConfigError, ControlParams, ScenarioConfig
from .programs.effects import NO_DEFENSE, DefendEffects

FLAG_TOL = 1e-6  # meters; honest residuals are exactly zero
MAD_FLOOR = 0.5  # meters; robust scale floor for the outlier filter
MAD_K = 1.4826
TRUST_FLOOR = 0.05  # reports from senders trusted less than this are dropped

KIND_NONE, KIND_STORM, KIND_ADVERSARIAL = "none", "storm", "adversarial"


@dataclass(frozen=True)
class FormationTarget:
    center: tuple[float, float, float]
    radius: float
    height: float
    n_slots: int

    def slot(self, i: int) -> np.ndarray:
        a = 2.0 * math.pi * i / self.n_slots
        return np.array(
            [self.center[0] + self.radius * math.cos(a),
             self.center[1] + self.radius * math.sin(a),
             self.height]
        )

    def slots(self) -> np.ndarray:
        return np.stack([self.slot(i) for i in range(self.n_slots)])


@dataclass
class DisturbanceState:
    kind: str
    wind_base: np.ndarray
    gust: np.ndarray  # per-aircraft Ornstein-Uhlenbeck state, shape (n, 3)
    rain_drag: float
    p_infect: float
    spoof_offset_scale: float
    spoof_speed: float = 10.0
    gust_theta: float = 0.1
    gust_sigma: float = 0.0
    gust_vertical: float = 1.0
    orbit_radius: float = 450.0
    orbit_period: float = 900.0


@dataclass(frozen=True)
class Aircraft:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    slot_angle: float
    infected: bool
    malicious: bool
    trust_weights: dict[int, float]


@dataclass(frozen=True)
class NeighborReport:
    sender: int
    position: np.ndarray
    velocity: np.ndarray
    weight: float
    flagged: bool
    residual: float


@dataclass
class WorldState:
    frame: int
    seed: int
    pos: np.ndarray
    vel: np.ndarray
    slot_angle: np.ndarray
    infected: np.ndarray
    malicious: np.ndarray
    trust: np.ndarray
    spoof_sign: np.ndarray
    bcast_pos: np.ndarray
    bcast_vel: np.ndarray
    residual: np.ndarray
    target: FormationTarget
    disturbance: DisturbanceState
    goal_gain: float
    rng: np.random.Generator = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.pos)

    @property
    def slots(self) -> np.ndarray:
        return self.slots_at(0.0)

    def slots_at(self, phase: float) -> np.ndarray:
        """Slot positions with every assigned angle rotated by ``phase``."""
        t = self.target
        ang = self.slot_angle + phase
        return np.stack(
            [np.cos(ang) * t.radius + t.center[0],
             np.sin(ang) * t.radius + t.center[1],
             np.full(self.n, t.height)],
            axis=1,
        )

    def aircraft(self, i: int) -> Aircraft:
        return Aircraft(
            id=i,
            position=self.pos[i].copy(),
            velocity=self.vel[i].copy(),
            slot_angle=float(self.slot_angle[i]),
            infected=bool(self.infected[i]),
            malicious=bool(self.malicious[i]),
            trust_weights={j: float(self.trust[i, j]) for j in range(self.n) if j != i},
        )

    def state_hash(self) -> str:
        """Digest of everything that evolves, including the PRNG position."""
        h = hashlib.sha256()
        h.update(str(self.frame).encode())
        for arr in (self.pos, self.vel, self.infected, self.trust, self.spoof_sign,
                    self.bcast_pos, self.bcast_vel, self.disturbance.gust):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(rngmod.get_state(self.rng)).encode())
        return h.hexdigest()


def init_world(scenario: ScenarioConfig, seed: int | None = None) -> WorldState:
    scenario.validate()
    if seed is None:
        seed = scenario.seed
    n = scenario.n_aircraft
    t = scenario.target
    if t.n_slots != n:
        raise ConfigError(f"n_slots={t.n_slots} but n={n}", "target.n_slots")
    if t.radius <= 0:
        raise ConfigError("radius must be > 0", "target.radius")
    gen = rngmod.stream(seed, "live")
    low, high = np.asarray(scenario.spawn_low, float), np.asarray(scenario.spawn_high, float)
    pos = gen.uniform(low, high, size=(n, 3))
    d = scenario.disturbance
    malicious = np.zeros(n, bool)
    malicious[list(d.malicious_ids)] = True
    infected = malicious.copy()
    spoof_sign = np.zeros(n)
    if malicious.any():
        spoof_sign[malicious] = gen.choice([-1.0, 1.0], size=int(malicious.sum()))
    dist = DisturbanceState(
        kind=d.kind,
        wind_base=np.asarray(d.wind_base, float),
        gust=np.zeros((n, 3)),
        rain_drag=d.rain_drag,
        p_infect=d.p_infect,
        spoof_offset_scale=d.spoof_offset_scale,
        spoof_speed=d.spoof_speed,
        gust_theta=d.gust_theta,
        gust_sigma=d.gust_sigma,
        gust_vertical=d.gust_vertical,
        orbit_radius=d.malicious_orbit_radius,
        orbit_period=d.malicious_orbit_period,
    )
    w = WorldState(
        frame=0,
        seed=seed,
        pos=pos,
        vel=np.zeros((n, 3)),
        slot_angle=assign_slots(pos, t.center, t.radius),
        infected=infected,
        malicious=malicious,
        trust=np.ones((n, n)),
        spoof_sign=spoof_sign,
        bcast_pos=pos.copy(),
        bcast_vel=np.zeros((n, 3)),
        residual=np.zeros(n),
        target=FormationTarget(tuple(t.center), t.radius, t.height, t.n_slots),
        disturbance=dist,
        goal_gain=scenario.goal_gain,
        rng=gen,
    )
    _broadcast(w, first=True)
    return w


def assign_slots(pos: np.ndarray, center, radius: float) -> np.ndarray:
    """Slot angles that keep the spawn's angular order around the center.

    Among the ``n`` cyclic rotations of that order, the one with the least
    total horizontal travel wins (lowest rotation index on ties).
    """
    n = len(pos)
    rel = pos[:, :2] - np.asarray(center[:2], float)
    order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]), kind="stable")
    base = 2.0 * np.pi * np.arange(n) / n
    best, best_cost = None, np.inf
    for r in range(n):
        angles = np.empty(n)
        angles[order] = base[(np.arange(n) + r) % n]
        slots = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        cost = float(np.linalg.norm(slots - rel, axis=1).sum())
        if cost < best_cost - 1e-9:
            best, best_cost = angles, cost
    return best


def clone(w: WorldState) -> WorldState:
    return copy.deepcopy(w)


def _clip_norm(v: np.ndarray, limit: float) -> np.ndarray:
    """Scale rows of ``v`` down to at most ``limit`` in norm."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    return v * scale


def _inward(w: WorldState, idx: np.ndarray) -> np.ndarray:
    c = np.asarray(w.target.center[:2])
    d = c - w.pos[idx, :2]
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d = np.where(norm > 1e-9, d / np.maximum(norm, 1e-9), np.array([1.0, 0.0]))
    return np.concatenate([d, np.zeros((len(idx), 1))], axis=1)


def _spoof(w: WorldState, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spoofed (position, velocity) for the infected aircraft ``idx``.

    Spoof law: the lure direction is ``u = 0.8 * inward + 0.6 * s * z`` (unit
    norm), where ``inward`` is the horizontal unit vector toward the formation
    center and ``s = +-1`` a sign drawn once per aircraft at infection. The
    broadcast position is ``p + scale * (u + 0.2 * eta)`` with ``eta`` standard
    normal per axis, drawn fresh every frame; the broadcast velocity is
    ``spoof_speed * u``. The offset norm is
    therefore ``scale * |u + 0.2 eta|``, never zero for ``scale > 0`` except on
    a null set.
    """
    d = w.disturbance
    u = 0.8 * _inward(w, idx)
    u[:, 2] = 0.6 * w.spoof_sign[idx]
    eta = w.rng.standard_normal((len(idx), 3))
    offset = d.spoof_offset_scale * (u + 0.2 * eta)
    return w.pos[idx] + offset, d.spoof_speed * u


def _broadcast(w: WorldState, first: bool = False) -> None:
    prev = w.bcast_pos.copy()
    bpos, bvel = w.pos.copy(), w.vel.copy()
    idx = np.flatnonzero(w.infected)
    if len(idx) and w.disturbance.spoof_offset_scale > 0:
        bpos[idx], bvel[idx] = _spoof(w, idx)
    if first:
        residual = np.zeros(w.n)
    else:
        residual = np.linalg.norm(bpos - prev - bvel, axis=1)
    w.bcast_pos, w.bcast_vel, w.residual = bpos, bvel, residual


def _comm(w: WorldState, r_comm: float) -> np.ndarray:
    diff = w.pos[:, None, :] - w.pos[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    heard = dist <= r_comm
    np.fill_diagonal(heard, False)
    return heard


def _robust_keep(residuals: np.ndarray, z: float) -> np.ndarray:
    """Outlier filter over one receiver's population (own residual first)."""
    med = float(np.median(residuals))
    mad = float(np.median(np.abs(residuals - med)))
    scale = max(MAD_K * mad, MAD_FLOOR)
    return np.abs(residuals - med) / scale < z


def _weight_noise(w: WorldState, sigma: float) -> np.ndarray:
    gen = rngmod.stream(w.seed, "weight-noise", w.frame)
    return np.clip(1.0 + sigma * gen.standard_normal((w.n, w.n)), 0.0, None)


def report_weights(w: WorldState, control: ControlParams, defend: DefendEffects):
    """Return ``(heard, weight)``: who hears whom and the weight each report gets."""
    heard = _comm(w, control.r_comm)
    weight = heard.astype(float)
    if defend.is_noop:
        return heard, weight
    weight *= np.where(w.trust >= TRUST_FLOOR, w.trust, 0.0)
    for j in defend.quarantined(w.frame):
        if 0 <= j < w.n:
            weight[:, j] = 0.0
    if defend.outlier_z is not None:
        for i in range(w.n):
            js = np.flatnonzero(heard[i])
            if len(js) == 0:
                continue
            pop = np.concatenate([[0.0], w.residual[js]])
            keep = _robust_keep(pop, defend.outlier_z)[1:]
            weight[i, js[~keep]] = 0.0
    if defend.weight_noise_sigma:
        weight *= _weight_noise(w, defend.weight_noise_sigma)
    return heard, weight


def observed_neighbors(w: WorldState, i: int, defend: DefendEffects = NO_DEFENSE,
                       control: ControlParams | None = None) -> list[NeighborReport]:
    """Reports receiver ``i`` keeps this frame (weight > 0), in sender order."""
    if not 0 <= i < w.n:
        raise IndexError(i)
    control = control or ControlParams()
    heard, weight = report_weights(w, control, defend)
    out = []
    for j in np.flatnonzero(heard[i]):
        if weight[i, j] <= 0.0:
            continue
        out.append(NeighborReport(
            sender=int(j),
            position=w.bcast_pos[j].copy(),
            velocity=w.bcast_vel[j].copy(),
            weight=float(weight[i, j]),
            flagged=bool(w.residual[j] > FLAG_TOL),
            residual=float(w.residual[j]),
        ))
    return out


def report_stats(w: WorldState, control: ControlParams) -> tuple[int, int]:
    """(reports heard this frame, of which flagged) summed over receivers."""
    heard = _comm(w, control.r_comm)
    flagged = w.residual > FLAG_TOL
    return int(heard.sum()), int((heard & flagged[None, :]).sum())


def _steering(w: WorldState, control: ControlParams, weight: np.ndarray) -> np.ndarray:
    c = control
    pos, vel = w.pos, w.vel
    bp, bv = w.bcast_pos, w.bcast_vel
    rel = pos[:, None, :] - bp[None, :, :]  # x_i - reported x_j
    rdist = np.linalg.norm(rel, axis=2)
    np.fill_diagonal(rdist, np.inf)

    ws = weight * (rdist < c.r_sep)
    sep = (ws[:, :, None] * rel / np.maximum(rdist, 1e-6)[:, :, None] ** 2).sum(axis=1)
    sep = _clip_norm(sep * c.r_sep, 1.0)

    wc = weight * (rdist < c.r_coh)
    tot = wc.sum(axis=1, keepdims=True)
    centroid = (wc[:, :, None] * bp[None, :, :]).sum(axis=1) / np.maximum(tot, 1e-12)
    coh = np.where(tot > 0, _clip_norm((centroid - pos) / c.r_coh, 1.0), 0.0)

    tot = weight.sum(axis=1, keepdims=True)
    mean_v = (weight[:, :, None] * bv[None, :, :]).sum(axis=1) / np.maximum(tot, 1e-12)
    align = np.where(tot > 0, _clip_norm((mean_v - vel) / c.v_max, 1.0), 0.0)

    err = w.slots_at(c.slot_phase) - pos
    desired = _clip_norm(w.goal_gain * err, c.v_max)
    goal = _clip_norm((desired - vel) / c.v_max, 1.0)

    acc = c.w_sep * sep + c.w_coh * coh + c.w_align * align + c.w_goal * goal

    mal = np.flatnonzero(w.malicious)
    if len(mal):
        d = w.disturbance
        phase = 2.0 * np.pi * w.frame / d.orbit_period
        ang = w.slot_angle[mal] + phase
        t = w.target
        lure = np.stack([t.center[0] + d.orbit_radius * np.cos(ang),
                         t.center[1] + d.orbit_radius * np.sin(ang),
                         np.full(len(mal), t.height)], axis=1)
        want = _clip_norm(0.05 * (lure - pos[mal]), c.v_max)
        acc[mal] = _clip_norm(want - vel[mal], 1.0)
    return acc


def step(w: WorldState, control: ControlParams, defend: DefendEffects = NO_DEFENSE) -> WorldState:
    """Advance one frame. Returns a new state; ``w`` is left untouched."""
    nw = clone(w)
    d = nw.disturbance
    heard, weight = report_weights(nw, control, defend)

    if defend.trust_decay:
        flagged = nw.residual > FLAG_TOL
        hit = heard & flagged[None, :]
        nw.trust = np.where(hit, nw.trust * (1.0 - defend.trust_decay), nw.trust)

    acc = _steering(nw, control, weight)
    acc = acc + d.wind_base + d.gust
    acc = _clip_norm(acc, control.a_max)
    vel = (nw.vel + acc) * (1.0 - d.rain_drag)
    nw.vel = _clip_norm(vel, control.v_max)
    nw.pos = nw.pos + nw.vel

    if d.kind == KIND_STORM and d.gust_sigma > 0:
        eta = nw.rng.standard_normal((nw.n, 3))
        eta[:, 2] *= d.gust_vertical
        d.gust = (1.0 - d.gust_theta) * d.gust + d.gust_sigma * eta

    if d.p_infect > 0 and nw.infected.any():
        contact = _comm(w, control.r_comm)  # exposure measured before the move
        k = (contact & nw.infected[None, :]).sum(axis=1)
        exposed = np.flatnonzero((k > 0) & ~nw.infected)
        if len(exposed):
            u = nw.rng.random(len(exposed))
            p = 1.0 - (1.0 - d.p_infect) ** k[exposed]
            new = exposed[u < p]
            if len(new):
                nw.infected[new] = True
                nw.spoof_sign[new] = nw.rng.choice([-1.0, 1.0], size=len(new))

    nw.frame += 1
    _broadcast(nw)
    return nw


def world_to_json(w: WorldState) -> dict:
    """Lossless JSON form of a world state (floats survive via ``repr``)."""
    d = w.disturbance
    t = w.target
    return {
        "frame": w.frame,
        "seed": w.seed,
        "pos": w.pos.tolist(),
        "vel": w.vel.tolist(),
        "slot_angle": w.slot_angle.tolist(),
        "infected": w.infected.astype(int).tolist(),
        "malicious": w.malicious.astype(int).tolist(),
        "trust": w.trust.tolist(),
        "spoof_sign": w.spoof_sign.tolist(),
        "bcast_pos": w.bcast_pos.tolist(),
        "bcast_vel": w.bcast_vel.tolist(),
        "residual": w.residual.tolist(),
        "target": {"center": list(t.center), "radius": t.radius, "height": t.height,
                   "n_slots": t.n_slots},
        "disturbance": {
            "kind": d.kind, "wind_base": d.wind_base.tolist(), "gust": d.gust.tolist(),
            "rain_drag": d.rain_drag, "p_infect": d.p_infect,
            "spoof_offset_scale": d.spoof_offset_scale, "spoof_speed": d.spoof_speed,
            "gust_theta": d.gust_theta, "gust_sigma": d.gust_sigma,
            "gust_vertical": d.gust_vertical, "orbit_radius": d.orbit_radius,
            "orbit_period": d.orbit_period,
        },
        "goal_gain": w.goal_gain,
        "rng": rngmod.get_state(w.rng),
    }


def world_from_json(data: dict) -> WorldState:
    d = dict(data["disturbance"])
    d["wind_base"] = np.asarray(d["wind_base"], float)
    d["gust"] = np.asarray(d["gust"], float)
    t = data["target"]
    return WorldState(
        frame=int(data["frame"]),
        seed=int(data["seed"]),
        pos=np.asarray(data["pos"], float),
        vel=np.asarray(data["vel"], float),
        slot_angle=np.asarray(data["slot_angle"], float),
        infected=np.asarray(data["infected"], bool),
        malicious=np.asarray(data["malicious"], bool),
        trust=np.asarray(data["trust"], float),
        spoof_sign=np.asarray(data["spoof_sign"], float),
        bcast_pos=np.asarray(data["bcast_pos"], float),
        bcast_vel=np.asarray(data["bcast_vel"], float),
        residual=np.asarray(data["residual"], float),
        target=FormationTarget(tuple(t["center"]), t["radius"], t["height"], t["n_slots"]),
        disturbance=DisturbanceState(**d),
        goal_gain=float(data["goal_gain"]),
        rng=rngmod.from_state(data["rng"]),
    )
