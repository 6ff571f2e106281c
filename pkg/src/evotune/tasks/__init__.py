"""Benchmark suites: instance generation, instance files and rollout dispatch."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from evotune.tasks import bin_packing, flatpack, tsp
from evotune.tasks.base import SPLITS, InvalidOutputError

logger = logging.getLogger(__name__)

__all__ = [
    "SPLITS",
    "TASKS",
    "InvalidOutputError",
    "InstanceSet",
    "TaskSpec",
    "generate_instances",
    "get_task",
    "instance_path",
    "load_instance_set",
    "save_instance_set",
]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    function_name: str
    seed_program: str
    instance_cls: type
    # gaps are percentages for BP/TSP and fractions for FP
    gap_unit: str
    default_timeout: float
    histogram_bin_width: float


TASKS: dict[str, TaskSpec] = {
    "bin_packing": TaskSpec(
        "bin_packing", "priority", bin_packing.SEED_PROGRAM, bin_packing.BinPackingInstance, "percent", 60.0, 0.25
    ),
    "tsp": TaskSpec("tsp", "heuristics", tsp.SEED_PROGRAM, tsp.TSPInstance, "percent", 90.0, 0.25),
    "flatpack": TaskSpec(
        "flatpack", "priority", flatpack.SEED_PROGRAM, flatpack.FlatPackInstance, "fraction", 60.0, 0.01
    ),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


@dataclass
class InstanceSet:
    task: str
    split: str
    seed: int
    instances: list
    # task-specific rollout options (e.g. GLS rounds)
    options: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "split": self.split,
            "seed": self.seed,
            "options": self.options or {},
            "instances": [inst.to_dict() for inst in self.instances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSet":
        spec = get_task(d["task"])
        return cls(
            task=d["task"],
            split=d["split"],
            seed=int(d["seed"]),
            instances=[spec.instance_cls.from_dict(x) for x in d["instances"]],
            options=d.get("options") or {},
        )


def _suite(task: str, params: Optional[dict]):
    params = dict(params or {})
    if task == "bin_packing":
        return bin_packing.BinPackingSuite(**params)
    if task == "tsp":
        if "sizes" in params:
            params["sizes"] = tuple(params["sizes"])
        return tsp.TSPSuite(**params)
    if task == "flatpack":
        if "size_mix" in params:
            params["size_mix"] = tuple(tuple(x) for x in params["size_mix"])
        return flatpack.FlatPackSuite(**params)
    raise ValueError(f"unknown task {task!r}")


def generate_instances(task: str, split: str, seed: int, params: Optional[dict] = None) -> InstanceSet:
    """Deterministic instance set for ``(task, split, seed)``.

    ``params`` overrides the suite sizes (e.g. ``{"num_instances": 5}`` for
    bin packing) for desk-scale runs.
    """
    get_task(task)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    suite = _suite(task, params)
    options = {"rounds": suite.rounds} if task == "tsp" and suite.rounds else {}
    return InstanceSet(task, split, seed, suite.generate(split, seed), options)


def instance_path(directory: Path | str, task: str, split: str, seed: int) -> Path:
    return Path(directory) / f"{task}_{split}_s{seed}.json"


def optima_path(path: Path | str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".optima.json")


def save_instance_set(iset: InstanceSet, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(iset.to_dict(), indent=1))
    return path


def load_instance_set(path: Path | str) -> InstanceSet:
    """Load an instance file, applying a TSP optima sidecar if one sits next to it."""
    path = Path(path)
    iset = InstanceSet.from_dict(json.loads(path.read_text()))
    side = optima_path(path)
    if iset.task == "tsp" and side.exists():
        table = json.loads(side.read_text())
        for inst in iset.instances:
            if inst.name in table:
                inst.optimum_cost = float(table[inst.name])
                inst.optimum_source = "supplied"
    return iset


def run_rollouts(task: str, fn: Callable, instances: list, options: Optional[dict] = None) -> list[float]:
    """Per-instance optimality gaps of the heuristic ``fn``."""
    options = options or {}
    if task == "bin_packing":
        return bin_packing.evaluate(fn, instances)
    if task == "tsp":
        return tsp.evaluate(fn, instances, rounds=options.get("rounds"))
    if task == "flatpack":
        return flatpack.evaluate(fn, instances)
    raise ValueError(f"unknown task {task!r}")


def describe(iset: InstanceSet) -> dict[str, Any]:
    return {"task": iset.task, "split": iset.split, "seed": iset.seed, "count": len(iset.instances)}
