"""Online bin packing: OR-Library style instances and priority-function rollout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from evotune.tasks.base import InvalidOutputError

CAPACITY = 150
ITEM_RANGE = (20, 100)

SEED_PROGRAM = '''import numpy as np


def priority(item, bins):
    """Best fit: prefer the fullest bin that can still hold the item."""
    return -(bins - item)
'''


@dataclass
class BinPackingInstance:
    capacity: int
    items: list[int]
    name: str = ""

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        for item in self.items:
            if item <= 0 or item > self.capacity:
                raise ValueError(f"item {item} does not fit capacity {self.capacity}")

    def to_dict(self) -> dict:
        return {"name": self.name, "capacity": self.capacity, "items": list(self.items)}

    @classmethod
    def from_dict(cls, d: dict) -> "BinPackingInstance":
        return cls(capacity=int(d["capacity"]), items=[int(x) for x in d["items"]], name=d.get("name", ""))


def sample_instance(rng: np.random.Generator, num_items: int = 500, name: str = "") -> BinPackingInstance:
    lo, hi = ITEM_RANGE
    items = rng.integers(lo, hi + 1, size=num_items)
    return BinPackingInstance(capacity=CAPACITY, items=[int(x) for x in items], name=name)


def shuffled(instance: BinPackingInstance, rng: np.random.Generator) -> BinPackingInstance:
    """Same item multiset, new arrival order."""
    order = rng.permutation(len(instance.items))
    return BinPackingInstance(
        capacity=instance.capacity,
        items=[instance.items[i] for i in order],
        name=instance.name,
    )


def lower_bound(instance: BinPackingInstance) -> int:
    """L1 bound: ceil(total size / capacity)."""
    total = sum(instance.items)
    return -(-total // instance.capacity)


def rollout(priority_fn: Callable, instance: BinPackingInstance) -> int:
    """Pack items online and return the number of bins used.

    ``priority_fn(item, remaining)`` is called with the remaining capacities of
    the currently open bins that can hold the item. The highest score wins,
    ties go to the lowest index. When no open bin fits, a new one is opened
    without consulting the heuristic.
    """
    remaining = np.empty(len(instance.items), dtype=float)
    n_open = 0
    for item in instance.items:
        open_bins = remaining[:n_open]
        feasible = np.flatnonzero(open_bins >= item)
        if feasible.size == 0:
            remaining[n_open] = instance.capacity - item
            n_open += 1
            continue
        scores = priority_fn(item, open_bins[feasible].copy())
        scores = _check_scores(scores, feasible.size)
        remaining[feasible[int(np.argmax(scores))]] -= item
    return n_open


def _check_scores(scores, expected: int) -> np.ndarray:
    try:
        arr = np.asarray(scores, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidOutputError(f"priority returned non-numeric output: {exc}") from None
    if arr.ndim == 0 and expected == 1:
        arr = arr.reshape(1)
    if arr.shape != (expected,):
        raise InvalidOutputError(f"priority returned shape {arr.shape}, expected ({expected},)")
    if not np.all(np.isfinite(arr)):
        raise InvalidOutputError("priority returned non-finite scores")
    return arr


def gap_percent(bins_used: int, instance: BinPackingInstance) -> float:
    lb = lower_bound(instance)
    return 100.0 * (bins_used - lb) / lb


def evaluate(priority_fn: Callable, instances: list[BinPackingInstance]) -> list[float]:
    return [gap_percent(rollout(priority_fn, inst), inst) for inst in instances]


@dataclass
class BinPackingSuite:
    num_instances: int = 20
    num_items: int = 500
    extra: dict = field(default_factory=dict)

    def generate(self, split: str, seed: int) -> list[BinPackingInstance]:
        base_rng = np.random.default_rng([seed, 0])
        if split in ("validation", "validation_perturbed"):
            insts = [
                sample_instance(base_rng, self.num_items, name=f"u{self.num_items}_{i:02d}")
                for i in range(self.num_instances)
            ]
            if split == "validation_perturbed":
                perturb_rng = np.random.default_rng([seed, 1])
                insts = [shuffled(inst, perturb_rng) for inst in insts]
            return insts
        if split == "test":
            rng = np.random.default_rng([seed, 2])
            return [
                sample_instance(rng, self.num_items, name=f"u{self.num_items}_test_{i:02d}")
                for i in range(self.num_instances)
            ]
        raise ValueError(f"unknown split {split!r}")


def mean_gap(gaps: list[float]) -> float:
    return float(math.fsum(gaps) / len(gaps))
