"""Formation quality scores.

``s_radius = max(0, 100 - beta * e_radius)``, ``s_height = max(0, 100 - gamma *
sigma_height)`` and ``s_overall`` is their mean. ``e_radius`` is the error of
the mean horizontal distance to the formation center; the mean per-aircraft
error is kept as an auxiliary column (``e_radius_slot``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ScoringParams


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class FormationScore:
    frame: int
    s_radius: float
    s_height: float
    s_overall: float
    e_radius: float
    sigma_height: float
    e_radius_slot: float = 0.0


SCORE_COLUMNS = ("frame", "s_radius", "s_height", "s_overall", "e_radius", "sigma_height")


def score_from_positions(positions: np.ndarray, center, radius: float, p: ScoringParams,
                         frame: int = 0) -> FormationScore:
    positions = np.asarray(positions, float)
    if positions.ndim != 2 or len(positions) < 2:
        raise ScoreError("need at least 2 aircraft to score a formation")
    horiz = np.linalg.norm(positions[:, :2] - np.asarray(center[:2], float), axis=1)
    e_radius = abs(float(horiz.mean()) - radius)
    e_slot = float(np.abs(horiz - radius).mean())
    sigma_h = float(positions[:, 2].std())  # population std
    s_r = max(0.0, 100.0 - p.beta * e_radius)
    s_h = max(0.0, 100.0 - p.gamma * sigma_h)
    return FormationScore(frame, s_r, s_h, (s_r + s_h) / 2.0, e_radius, sigma_h, e_slot)


def compute_score(w, p: ScoringParams | None = None) -> FormationScore:
    p = p or ScoringParams()
    return score_from_positions(w.pos, w.target.center, w.target.radius, p, w.frame)


def mean_radius(w) -> float:
    c = np.asarray(w.target.center[:2], float)
    return float(np.linalg.norm(w.pos[:, :2] - c, axis=1).mean())


def radius_deviation_pct(w) -> float:
    r = w.target.radius
    return 100.0 * abs(mean_radius(w) - r) / r


def consensus_reached(history: Sequence[FormationScore], theta_c: float = 80.0,
                      window_c: int = 50) -> bool:
    if not 0 < theta_c <= 100:
        raise ValueError("theta_c must be in (0, 100]")
    if window_c < 1:
        raise ValueError("window_c must be >= 1")
    if len(history) < window_c:
        return False
    return all(s.s_overall >= theta_c for s in history[-window_c:])


def write_scores(path: str | Path, scores: Iterable[FormationScore]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(SCORE_COLUMNS)
        for s in scores:
            out.writerow([s.frame] + [repr(float(getattr(s, c))) for c in SCORE_COLUMNS[1:]])


def read_scores(path: str | Path) -> list[FormationScore]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(FormationScore(
                frame=int(row["frame"]),
                s_radius=float(row["s_radius"]),
                s_height=float(row["s_height"]),
                s_overall=float(row["s_overall"]),
                e_radius=float(row["e_radius"]),
                sigma_height=float(row["sigma_height"]),
            ))
    return rows
