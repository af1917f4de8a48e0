"""Provenance store: append-only JSONL of adaptation episodes, plus retrieval.

Each line is one record in the provenance-chain layout (see
``data/provenance_record.schema.json``). Records are retrieved by exact
nearest-neighbour search over a 10-dimensional context feature vector computed
from the numeric telemetry the record carries in ``environmental_context``.

The expert-knowledge snippet registry lives here too, since both are
knowledge sources for the moderator.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import jsonschema
import numpy as np

from .programs import DEFEND, FORMATION

PRIMITIVE_LABELS = {FORMATION: "L1: FormationControl", DEFEND: "L2: Defend"}


class SchemaError(ValueError):
    """A record does not follow the provenance layout. ``path`` locates the problem."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class StoreError(IOError):
    pass


def load_resource(name: str) -> Any:
    text = resources.files("swarmadapt.data").joinpath(name).read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _record_validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(load_resource("provenance_record.schema.json"))


def validate_record(record: Any) -> None:
    errors = sorted(_record_validator().iter_errors(record), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        raise SchemaError(e.message, "/".join(str(p) for p in e.path) or "<root>")


def primitive_of(record: Mapping) -> str | None:
    """Map ``logical_primitive`` text (e.g. ``"L2: Defend"``) to a primitive id."""
    label = str(record.get("logical_primitive", ""))
    name = label.split(":", 1)[-1].strip()
    return name if name in (FORMATION, DEFEND) else None


# ----------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureRegistry:
    names: tuple[str, ...]
    low: np.ndarray
    high: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.names)

    def featurize(self, telemetry: Mapping[str, Any], primitive: str) -> np.ndarray:
        """Min-max normalised, clipped feature vector for one context.

        Raises ``KeyError`` when a telemetry value is missing and
        ``ValueError`` when one is not a finite number.
        """
        raw = []
        for name in self.names:
            if name == "primitive_formation":
                raw.append(1.0 if primitive == FORMATION else 0.0)
            elif name == "primitive_defend":
                raw.append(1.0 if primitive == DEFEND else 0.0)
            else:
                v = telemetry[name]
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise ValueError(f"telemetry {name!r} must be a finite number")
                raw.append(float(v))
        x = (np.asarray(raw) - self.low) / (self.high - self.low)
        return np.clip(x, 0.0, 1.0)

    def featurize_record(self, record: Mapping) -> np.ndarray | None:
        """Feature vector of a stored record, or None if it lacks numeric telemetry."""
        prim = primitive_of(record)
        ctx = record.get("environmental_context", {})
        if prim is None or not isinstance(ctx, Mapping):
            return None
        try:
            return self.featurize(ctx, prim)
        except (KeyError, ValueError):
            return None


def load_feature_registry(path: str | Path | None = None) -> FeatureRegistry:
    data = load_resource("feature_registry.json") if path is None else \
        json.loads(Path(path).read_text("utf-8"))
    feats = data["features"]
    if len(feats) != data["dimension"]:
        raise ValueError("feature registry dimension mismatch")
    low = np.array([f["min"] for f in feats], float)
    high = np.array([f["max"] for f in feats], float)
    if np.any(high <= low):
        raise ValueError("feature bounds must satisfy max > min")
    return FeatureRegistry(tuple(f["name"] for f in feats), low, high)


# -------------------------------------------------------------------- store

class ProvenanceStore:
    """Append-only record store; in memory when ``path`` is None.

    ``reads`` counts read accesses (retrievals and lookups) so callers can
    verify that a run configured without provenance never consulted it.
    """

    def __init__(self, path: str | Path | None = None,
                 features: FeatureRegistry | None = None):
        self.path = Path(path) if path is not None else None
        self.features = features or load_feature_registry()
        self._lines: list[str] = []
        self._records: list[dict] = []
        self._vectors: list[np.ndarray | None] = []
        self.reads = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        try:
            text = self.path.read_text("utf-8")
        except OSError as exc:
            raise StoreError(f"cannot read {self.path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                validate_record(rec)
            except (json.JSONDecodeError, SchemaError) as exc:
                raise StoreError(f"{self.path}:{lineno}: {exc}") from exc
            self._remember(line, rec)

    def _remember(self, line: str, rec: dict) -> None:
        self._lines.append(line)
        self._records.append(rec)
        self._vectors.append(self.features.featurize_record(rec))

    def __len__(self) -> int:
        return len(self._records)

    @property
    def snapshot_dir(self) -> Path | None:
        return None if self.path is None else self.path.parent / "snapshots"

    def append(self, record: dict) -> int:
        validate_record(record)
        line = json.dumps(record, ensure_ascii=False, separators=(",", ":"))
        if self.path is not None:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StoreError(f"cannot append to {self.path}: {exc}") from exc
        self._remember(line, json.loads(line))
        return len(self._records) - 1

    def get(self, record_id: int) -> dict:
        self.reads += 1
        if not 0 <= record_id < len(self._records):
            raise KeyError(record_id)
        return json.loads(self._lines[record_id])

    def line(self, record_id: int) -> str:
        return self._lines[record_id]

    def vector(self, record_id: int) -> np.ndarray | None:
        return self._vectors[record_id]

    def retrieve_similar(self, query: Sequence[float], k: int) -> list[tuple[int, float]]:
        """``k`` nearest records by Euclidean distance; ties go to the lower id."""
        if k < 0:
            raise ValueError("k must be >= 0")
        self.reads += 1
        ids = [i for i, v in enumerate(self._vectors) if v is not None]
        if k == 0 or not ids:
            return []
        q = np.asarray(query, float)
        mat = np.stack([self._vectors[i] for i in ids])
        dist = np.sqrt(((mat - q) ** 2).sum(axis=1))
        order = np.lexsort((np.asarray(ids), dist))[:k]
        return [(ids[j], float(dist[j])) for j in order]


# ----------------------------------------------------------- expert knowledge

@dataclass(frozen=True)
class ExpertSnippet:
    snippet_id: str
    primitive: str
    text: str
    tags: tuple[str, ...]
    applies_when: dict | None = None
    proposals: tuple = ()

    def applies(self, telemetry: Mapping[str, Any]) -> bool:
        cond = self.applies_when
        if not cond:
            return True
        value = telemetry.get(cond["feature"])
        if not isinstance(value, (int, float)):
            return False
        if "above" in cond and not value > cond["above"]:
            return False
        if "below" in cond and not value < cond["below"]:
            return False
        return True

    def to_json(self) -> dict:
        out = {"snippet_id": self.snippet_id, "primitive": self.primitive,
               "text": self.text, "tags": list(self.tags)}
        if self.applies_when is not None:
            out["applies_when"] = self.applies_when
        if self.proposals:
            out["proposals"] = list(self.proposals)
        return out


def snippet_from_json(d: Mapping) -> ExpertSnippet:
    tags = tuple(d["tags"])
    if not tags:
        raise ValueError(f"snippet {d['snippet_id']} needs at least one tag")
    return ExpertSnippet(d["snippet_id"], d["primitive"], d["text"], tags,
                         d.get("applies_when"), tuple(d.get("proposals", ())))


@dataclass
class ExpertRegistry:
    snippets: list[ExpertSnippet] = field(default_factory=list)
    reads: int = 0

    def snippets_for(self, primitive: str, tags: Iterable[str] | None = None) -> list[ExpertSnippet]:
        """Snippets of ``primitive`` carrying any of ``tags`` (all when None), by id."""
        self.reads += 1
        wanted = set(tags) if tags is not None else None
        out = [s for s in self.snippets
               if s.primitive == primitive and (wanted is None or wanted & set(s.tags))]
        return sorted(out, key=lambda s: s.snippet_id)


def load_expert_registry(path: str | Path | None = None) -> ExpertRegistry:
    data = load_resource("expert_knowledge.json") if path is None else \
        json.loads(Path(path).read_text("utf-8"))
    return ExpertRegistry([snippet_from_json(s) for s in data["snippets"]])
