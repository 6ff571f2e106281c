"""Island-based program database with score-keyed clusters.

Records are stored per island and grouped into clusters whose key is the
reward rounded to 9 decimals. The append-only JSON-lines log is both the
live persistence format and the snapshot format; see ``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from evotune.stats import percentile

logger = logging.getLogger(__name__)

CLUSTER_KEY_DECIMALS = 9
LOG_FIELDS = ("id", "island_id", "cluster_key", "reward", "timestep", "prompt_id", "duplicate_count", "source")


class DatabaseError(Exception):
    pass


class InvalidRecordError(DatabaseError, ValueError):
    pass


class ProgramTooLongError(InvalidRecordError):
    pass


class EmptyDatabaseError(DatabaseError):
    pass


class CorruptLogError(DatabaseError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"corrupt database log at line {line_no}: {reason}")
        self.line_no = line_no


def cluster_key(reward: float) -> float:
    return round(float(reward), CLUSTER_KEY_DECIMALS)


@dataclass
class ProgramRecord:
    id: str
    source: str
    reward: float
    island_id: int
    timestep: int = 0
    prompt_id: Optional[str] = None
    duplicate_count: int = 0

    @property
    def cluster_key(self) -> float:
        return cluster_key(self.reward)

    @property
    def length(self) -> int:
        return len(self.source)

    def to_log(self) -> dict:
        return {
            "id": self.id,
            "island_id": self.island_id,
            "cluster_key": self.cluster_key,
            "reward": self.reward,
            "timestep": self.timestep,
            "prompt_id": self.prompt_id,
            "duplicate_count": self.duplicate_count,
            "source": self.source,
        }

    @classmethod
    def from_log(cls, d: dict) -> "ProgramRecord":
        return cls(
            id=str(d["id"]),
            source=str(d["source"]),
            reward=float(d["reward"]),
            island_id=int(d["island_id"]),
            timestep=int(d["timestep"]),
            prompt_id=d.get("prompt_id"),
            duplicate_count=int(d.get("duplicate_count", 0)),
        )


@dataclass
class Cluster:
    cluster_key: float
    members: list[str] = field(default_factory=list)

    @property
    def score(self) -> float:
        return self.cluster_key


@dataclass
class Island:
    island_id: int
    clusters: dict[float, Cluster] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(len(c.members) for c in self.clusters.values())


@dataclass
class SamplingConfig:
    num_islands: int = 6
    m: int = 2
    cluster_temperature: float = 0.3
    anneal_start_percentile: float = 50.0
    anneal_end_percentile: float = 90.0
    length_temperature: float = 1.0

    def __post_init__(self):
        if self.num_islands < 1:
            raise ValueError("num_islands must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.cluster_temperature <= 0 or self.length_temperature <= 0:
            raise ValueError("temperatures must be positive")
        lo, hi = self.anneal_start_percentile, self.anneal_end_percentile
        if not (0 <= lo <= 100 and 0 <= hi <= 100) or hi < lo:
            raise ValueError("need 0 <= anneal_start_percentile <= anneal_end_percentile <= 100")

    def percentile_at(self, progress: float) -> float:
        progress = min(max(progress, 0.0), 1.0)
        lo, hi = self.anneal_start_percentile, self.anneal_end_percentile
        return lo + progress * (hi - lo)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def cluster_probabilities(scores, temperature: float, normalize: bool = True,
                          bounds: Optional[tuple[float, float]] = None) -> np.ndarray:
    """Softmax over cluster scores.

    With ``normalize`` the scores are min-max scaled to [0, 1] using
    ``bounds`` (defaults to the scores' own range) before the temperature is
    applied.
    """
    s = np.asarray(scores, dtype=float)
    if normalize:
        lo, hi = bounds if bounds is not None else (s.min(), s.max())
        s = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    return softmax(s / temperature)


def length_probabilities(lengths, temperature: float) -> np.ndarray:
    ls = np.asarray(lengths, dtype=float)
    return softmax(-(ls / ls.mean()) / temperature)


class ProgramDatabase:
    def __init__(self, num_islands: int = 6, max_program_chars: Optional[int] = None):
        if num_islands < 1:
            raise ValueError("num_islands must be >= 1")
        self.num_islands = num_islands
        self.max_program_chars = max_program_chars
        self.islands = [Island(i) for i in range(num_islands)]
        self.records: dict[str, ProgramRecord] = {}
        self._by_source: list[dict[str, str]] = [{} for _ in range(num_islands)]
        self._events: list[str] = []
        self._log_file = None

    # -- registration -------------------------------------------------

    def register(self, record: ProgramRecord) -> float:
        """Store ``record`` and return its cluster key.

        Re-registering a known id is a no-op. A source already present on the
        same island only bumps that record's ``duplicate_count``.
        """
        if record.id in self.records:
            return self.records[record.id].cluster_key
        if not 0 <= record.island_id < self.num_islands:
            raise InvalidRecordError(f"island_id {record.island_id} outside [0, {self.num_islands})")
        if not math.isfinite(record.reward):
            raise InvalidRecordError(f"non-finite reward {record.reward!r} for {record.id}")
        if self.max_program_chars is not None and record.length > self.max_program_chars:
            raise ProgramTooLongError(f"program {record.id} has {record.length} chars > {self.max_program_chars}")
        existing_id = self._by_source[record.island_id].get(record.source)
        if existing_id is not None:
            existing = self.records[existing_id]
            existing.duplicate_count += 1
            self._emit(existing)
            return existing.cluster_key
        key = record.cluster_key
        island = self.islands[record.island_id]
        island.clusters.setdefault(key, Cluster(key)).members.append(record.id)
        self.records[record.id] = record
        self._by_source[record.island_id][record.source] = record.id
        self._emit(record)
        return key

    def register_seed(self, source: str, reward: float, name: str = "seed") -> list[str]:
        """Replicate a seed program into every island at timestep 0."""
        ids = []
        for i in range(self.num_islands):
            rec = ProgramRecord(id=f"{name}-i{i}", source=source, reward=reward, island_id=i, timestep=0)
            self.register(rec)
            ids.append(rec.id)
        return ids

    def _emit(self, record: ProgramRecord) -> None:
        line = json.dumps(record.to_log(), ensure_ascii=True)
        self._events.append(line)
        if self._log_file is not None:
            self._log_file.write(line + "\n")
            self._log_file.flush()

    # -- queries ------------------------------------------------------

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ProgramRecord]:
        return iter(self.records.values())

    def island_records(self, island_id: int) -> list[ProgramRecord]:
        return [
            self.records[rid]
            for cluster in self.islands[island_id].clusters.values()
            for rid in cluster.members
        ]

    def within(self, max_timestep: Optional[int] = None) -> list[ProgramRecord]:
        if max_timestep is None:
            return list(self.records.values())
        return [r for r in self.records.values() if r.timestep <= max_timestep]

    def best(self) -> ProgramRecord:
        if not self.records:
            raise EmptyDatabaseError("database is empty")
        return max(self.records.values(), key=lambda r: (r.reward, -r.timestep))

    # -- sampling -----------------------------------------------------

    def sample_for_prompt(self, cfg: SamplingConfig, progress: float,
                          rng: np.random.Generator) -> tuple[int, list[ProgramRecord]]:
        """Pick an island uniformly, then up to ``cfg.m`` programs from its top clusters.

        Fewer than ``m`` programs come back only when the eligible clusters
        hold fewer than ``m`` programs in total. The result is sorted by
        ascending reward.
        """
        candidates = list(range(self.num_islands))
        island = None
        while candidates:
            pick = candidates.pop(int(rng.integers(len(candidates))))
            if self.islands[pick].size > 0:
                island = self.islands[pick]
                break
        if island is None:
            raise EmptyDatabaseError("every island is empty")

        keys = sorted(island.clusters)
        scores = np.array(keys, dtype=float)
        cutoff = percentile(scores, cfg.percentile_at(progress))
        eligible = [k for k in keys if k >= cutoff]
        probs = cluster_probabilities(
            eligible, cfg.cluster_temperature, bounds=(scores.min(), scores.max())
        )
        n_clusters = min(cfg.m, len(eligible))
        chosen = rng.choice(len(eligible), size=n_clusters, replace=False, p=probs)
        chosen_clusters = [island.clusters[eligible[int(i)]] for i in chosen]

        picked: list[ProgramRecord] = []
        leftovers: list[ProgramRecord] = []
        for cluster in chosen_clusters:
            members = [self.records[rid] for rid in cluster.members]
            j = int(rng.choice(len(members), p=length_probabilities([r.length for r in members], cfg.length_temperature)))
            picked.append(members[j])
            leftovers.extend(r for k, r in enumerate(members) if k != j)
        need = min(cfg.m - len(picked), len(leftovers))
        if need > 0:
            p = length_probabilities([r.length for r in leftovers], cfg.length_temperature)
            extra = rng.choice(len(leftovers), size=need, replace=False, p=p)
            picked.extend(leftovers[int(i)] for i in extra)
        picked.sort(key=lambda r: r.reward)
        return island.island_id, picked

    # -- persistence --------------------------------------------------

    def attach_log(self, path: Path | str) -> None:
        """Append every future registration event to ``path``."""
        self.close_log()
        self._log_file = open(path, "a", encoding="utf-8")

    def close_log(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def log_text(self) -> str:
        return "".join(line + "\n" for line in self._events)

    def snapshot(self, destination: Path | str) -> Path:
        destination = Path(destination)
        tmp = destination.with_name(destination.name + ".tmp")
        tmp.write_text(self.log_text(), encoding="utf-8")
        os.replace(tmp, destination)
        return destination

    def content_hash(self) -> str:
        return hashlib.sha256(self.log_text().encode("utf-8")).hexdigest()

    @classmethod
    def restore(cls, source: Path | str, num_islands: Optional[int] = None,
                max_program_chars: Optional[int] = None) -> "ProgramDatabase":
        """Rebuild a database by replaying a log.

        A malformed line raises :class:`CorruptLogError` naming the line; an
        unterminated final line is treated as a torn write, logged and
        skipped.
        """
        text = Path(source).read_text(encoding="utf-8")
        entries = list(_parse_log(text))
        if num_islands is None:
            num_islands = max((e["island_id"] for _, e in entries), default=-1) + 1 or 1
        db = cls(num_islands=num_islands, max_program_chars=None)
        for line_no, entry in entries:
            try:
                rec = ProgramRecord.from_log(entry)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptLogError(line_no, f"bad field: {exc}") from None
            if rec.id in db.records:
                db.records[rec.id].duplicate_count = rec.duplicate_count
                db._events.append(json.dumps(entry, ensure_ascii=True))
                continue
            try:
                db.register(rec)
            except InvalidRecordError as exc:
                raise CorruptLogError(line_no, str(exc)) from None
        db.max_program_chars = max_program_chars
        return db


def _parse_log(text: str) -> Iterable[tuple[int, dict]]:
    lines = text.split("\n")
    torn_tail = not text.endswith("\n") and text != ""
    last = len(lines) - 1
    for idx, line in enumerate(lines):
        line_no = idx + 1
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            if not isinstance(entry, dict) or any(f not in entry for f in LOG_FIELDS):
                raise ValueError("missing fields")
        except ValueError as exc:
            if torn_tail and idx == last:
                logger.warning("ignoring truncated final log line %d", line_no)
                return
            raise CorruptLogError(line_no, str(exc)) from None
        yield line_no, entry
