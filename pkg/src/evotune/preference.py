"""Preference pairs from generation groups, the reward-threshold filter, and ReST-EM schedules."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from evotune.stats import percentile

DEFAULT_PERCENTILE = 30.0
DATASET_FIELDS = ("prompt_text", "preferred_text", "rejected_text", "reward_preferred",
                  "reward_rejected", "prompt_id", "timestep")


@dataclass(frozen=True)
class GroupEntry:
    """One of the K outputs of a prompt. ``reward`` is None for failures."""

    index: int
    raw_text: str
    reward: Optional[float] = None
    failure: Optional[str] = None  # extraction failure reason or sandbox status

    @property
    def valid(self) -> bool:
        return self.reward is not None and math.isfinite(self.reward)


@dataclass
class GenerationGroup:
    prompt_id: str
    entries: list[GroupEntry]
    prompt_text: str = ""
    timestep: int = 0

    def __post_init__(self):
        idx = [e.index for e in self.entries]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate output index in generation group")

    @property
    def valid_rewards(self) -> list[float]:
        return [e.reward for e in self.entries if e.valid]


@dataclass(frozen=True)
class PreferenceTriplet:
    prompt_id: str
    prompt_text: str
    preferred_text: str
    rejected_text: str
    reward_preferred: float
    reward_rejected: Optional[float]  # None: the rejected output failed
    timestep: int = 0
    preferred_index: int = -1
    rejected_index: int = -1

    def __post_init__(self):
        if not math.isfinite(self.reward_preferred):
            raise ValueError("preferred reward must be finite")
        if self.reward_rejected is not None and not self.reward_preferred > self.reward_rejected:
            raise ValueError("preferred reward must strictly exceed the rejected reward")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.prompt_id, self.preferred_text, self.rejected_text)

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in DATASET_FIELDS}

    @classmethod
    def from_record(cls, d: dict) -> "PreferenceTriplet":
        missing = [k for k in DATASET_FIELDS if k not in d]
        if missing:
            raise ValueError(f"preference record missing fields {missing}")
        return cls(**{k: d[k] for k in DATASET_FIELDS})


def build_pairs(group: GenerationGroup, rng: np.random.Generator) -> list[PreferenceTriplet]:
    """Pair a group's outputs into preference triplets.

    Valid outputs are ranked and split at the median (an odd middle element is
    left out); upper and lower halves are matched by a random permutation and
    equal-reward pairs dropped. Each failed output is then rejected against a
    distinct valid partner, drawn from the upper half first.
    """
    valid = sorted((e for e in group.entries if e.valid), key=lambda e: (-e.reward, e.index))
    failed = [e for e in group.entries if not e.valid]
    if not valid:
        return []

    def triplet(win: GroupEntry, lose: GroupEntry) -> PreferenceTriplet:
        return PreferenceTriplet(
            prompt_id=group.prompt_id,
            prompt_text=group.prompt_text,
            preferred_text=win.raw_text,
            rejected_text=lose.raw_text,
            reward_preferred=float(win.reward),
            reward_rejected=float(lose.reward) if lose.valid else None,
            timestep=group.timestep,
            preferred_index=win.index,
            rejected_index=lose.index,
        )

    half = len(valid) // 2
    upper, lower = valid[:half], valid[len(valid) - half:]
    out = []
    for u, j in zip(upper, rng.permutation(half)):
        lo = lower[int(j)]
        if u.reward > lo.reward:
            out.append(triplet(u, lo))

    if failed:
        rest = valid[half:]
        order = [upper[int(i)] for i in rng.permutation(len(upper))]
        order += [rest[int(i)] for i in rng.permutation(len(rest))]
        if len(failed) > len(order):
            order += [valid[int(i)] for i in rng.integers(len(valid), size=len(failed) - len(order))]
        out.extend(triplet(partner, f) for f, partner in zip(failed, order))
    return out


def compute_threshold(recent_rewards: Sequence[float], q: float = DEFAULT_PERCENTILE) -> float:
    if len(recent_rewards) == 0:
        raise ValueError("cannot compute a threshold from no rewards")
    return percentile(recent_rewards, q)


@dataclass
class ThresholdState:
    recent_rewards: list[float] = field(default_factory=list)
    percentile: float = DEFAULT_PERCENTILE

    @property
    def tau(self) -> Optional[float]:
        return compute_threshold(self.recent_rewards, self.percentile) if self.recent_rewards else None

    def extend(self, rewards: Iterable[float]) -> None:
        self.recent_rewards.extend(float(r) for r in rewards if math.isfinite(r))

    def reset(self) -> None:
        self.recent_rewards.clear()


class PreferenceDataset:
    """Accumulated triplets, deduplicated by (prompt_id, preferred, rejected).

    With ``path`` set, every accepted triplet is appended to that file.
    """

    def __init__(self, triplets: Iterable[PreferenceTriplet] = (), path: Optional[Path | str] = None):
        self.triplets: list[PreferenceTriplet] = []
        self._keys: set[tuple[str, str, str]] = set()
        self.path = Path(path) if path is not None else None
        for t in triplets:
            self._add(t, write=False)

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def _add(self, t: PreferenceTriplet, write: bool = True) -> bool:
        if t.key in self._keys:
            return False
        self._keys.add(t.key)
        self.triplets.append(t)
        if write and self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(t.to_record(), ensure_ascii=True) + "\n")
        return True

    @classmethod
    def load(cls, path: Path | str, attach: bool = False) -> "PreferenceDataset":
        triplets = read_dataset(path) if Path(path).exists() else []
        return cls(triplets, path=path if attach else None)


def filter_and_accumulate(dataset: PreferenceDataset, new_triplets: Iterable[PreferenceTriplet],
                          tau: float) -> PreferenceDataset:
    """Append triplets whose preferred reward is strictly above ``tau``."""
    if not math.isfinite(tau):
        raise ValueError("threshold must be finite")
    for t in new_triplets:
        if t.reward_preferred > tau:
            dataset._add(t)
    return dataset


def write_dataset(triplets: Iterable[PreferenceTriplet], path: Path | str) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_record(), ensure_ascii=True) + "\n")
    return path


def read_dataset(path: Path | str) -> list[PreferenceTriplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PreferenceTriplet.from_record(json.loads(line)))
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
    return out


# -- ReST-EM -------------------------------------------------------------

def rest_em_schedule(database_rewards: Sequence[float], recent_rewards: Sequence[float],
                     p: float = 60.0, L: int = 3,
                     items: Optional[Sequence[Any]] = None) -> list[tuple[float, list[Any]]]:
    """Thresholds and filtered datasets for one supervised update.

    ``items`` runs parallel to ``database_rewards`` and defaults to the
    rewards themselves. Stage ``l`` keeps every item with reward >= its
    threshold, starting at the ``p``-th percentile of ``recent_rewards`` and
    stepping by ``(max reward - start) / L``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if len(database_rewards) == 0:
        raise ValueError("database rewards are empty")
    items = list(database_rewards) if items is None else list(items)
    if len(items) != len(database_rewards):
        raise ValueError("items and database_rewards differ in length")
    tau0 = compute_threshold(recent_rewards, p)
    step = (max(database_rewards) - tau0) / L
    schedule = []
    tau = tau0
    for _ in range(L):
        schedule.append((tau, [it for it, r in zip(items, database_rewards) if r >= tau]))
        tau = tau + step
    return schedule
