"""Euclidean TSP instances and the guided local search driver.

The evolved program maps a distance matrix to a "guide" matrix of edge
badness. Guided local search starts from a nearest-neighbour tour and, for a
fixed number of rounds, runs local search on the penalised weights followed
by a perturbation that penalises the tour edge with the highest utility
``guide / (1 + penalty)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from evotune.tasks.base import InvalidOutputError

SEED_PROGRAM = '''import numpy as np


def heuristics(distance_matrix):
    """Identity guide: long edges are the undesirable ones."""
    return distance_matrix
'''

HELD_KARP_MAX_CITIES = 15
HIGH_VALUE = 10.0
PERTURB_PROB = 0.2


@dataclass
class TSPInstance:
    distance_matrix: np.ndarray
    coordinates: Optional[np.ndarray] = None
    optimum_cost: Optional[float] = None
    # held_karp | supplied | best_known
    optimum_source: Optional[str] = None
    name: str = ""
    perturbed_edges: list[tuple[int, int]] = field(default_factory=list)
    high_value: float = HIGH_VALUE

    def __post_init__(self):
        d = np.asarray(self.distance_matrix, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.allclose(d, d.T):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(d) != 0) or np.any(d < 0):
            raise ValueError("distance matrix needs a zero diagonal and non-negative entries")
        self.distance_matrix = d

    @property
    def size(self) -> int:
        return self.distance_matrix.shape[0]

    @classmethod
    def from_coordinates(cls, coords, **kwargs) -> "TSPInstance":
        coords = np.asarray(coords, dtype=float)
        return cls(distance_matrix=euclidean_matrix(coords), coordinates=coords, **kwargs)

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "size": self.size}
        if self.coordinates is not None:
            d["coordinates"] = self.coordinates.tolist()
            if self.perturbed_edges:
                d["perturbed_edges"] = [list(e) for e in self.perturbed_edges]
                d["high_value"] = self.high_value
        else:
            d["distance_matrix"] = self.distance_matrix.tolist()
        d["optimum_cost"] = self.optimum_cost
        d["optimum_source"] = self.optimum_source
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TSPInstance":
        common = dict(
            name=d.get("name", ""),
            optimum_cost=d.get("optimum_cost"),
            optimum_source=d.get("optimum_source"),
        )
        if "coordinates" in d:
            coords = np.asarray(d["coordinates"], dtype=float)
            edges = [tuple(e) for e in d.get("perturbed_edges", [])]
            high = float(d.get("high_value", HIGH_VALUE))
            matrix = apply_perturbation(euclidean_matrix(coords), edges, high)
            return cls(
                distance_matrix=matrix,
                coordinates=coords,
                perturbed_edges=edges,
                high_value=high,
                **common,
            )
        return cls(distance_matrix=np.asarray(d["distance_matrix"], dtype=float), **common)


def euclidean_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def apply_perturbation(matrix: np.ndarray, edges, high_value: float) -> np.ndarray:
    out = matrix.copy()
    for i, j in edges:
        out[i, j] = out[j, i] = high_value
    return out


def perturb(instance: TSPInstance, rng: np.random.Generator, prob: float = PERTURB_PROB,
            high_value: float = HIGH_VALUE) -> TSPInstance:
    """Replace each undirected edge by ``high_value`` with probability ``prob``."""
    n = instance.size
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < prob
    edges = [(int(i), int(j)) for i, j in zip(iu[hit], ju[hit])]
    return TSPInstance(
        distance_matrix=apply_perturbation(instance.distance_matrix, edges, high_value),
        coordinates=instance.coordinates,
        name=instance.name,
        perturbed_edges=edges,
        high_value=high_value,
    )


def tour_cost(tour, weights: np.ndarray) -> float:
    t = np.asarray(tour)
    return float(weights[t, np.roll(t, -1)].sum())


def is_permutation(tour, n: int) -> bool:
    return len(tour) == n and sorted(int(x) for x in tour) == list(range(n))


def nearest_neighbor(distance_matrix: np.ndarray) -> list[int]:
    """Greedy tour from city 0, ties to the lowest index."""
    n = distance_matrix.shape[0]
    visited = np.zeros(n, dtype=bool)
    tour = [0]
    visited[0] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, distance_matrix[tour[-1]])
        nxt = int(np.argmin(row))
        tour.append(nxt)
        visited[nxt] = True
    return tour


def _tolerance(weights: np.ndarray) -> float:
    return 1e-9 * max(float(np.abs(weights).max()), 1.0)


def two_opt_deltas(tour: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Cost change of every 2-exchange; entry (i, j) removes edges (i, i+1) and (j, j+1).

    Moves that are not proper exchanges (j <= i + 1, or the wrap-around pair
    sharing city 0) are set to +inf.
    """
    n = len(tour)
    nxt = np.roll(tour, -1)
    edge = weights[tour, nxt]
    delta = (
        weights[tour[:, None], tour[None, :]]
        + weights[nxt[:, None], nxt[None, :]]
        - edge[:, None]
        - edge[None, :]
    )
    valid = np.triu(np.ones((n, n), dtype=bool), k=2)
    valid[0, n - 1] = False
    return np.where(valid, delta, np.inf)


def relocate_deltas(tour: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Cost change of moving the city at position i between positions e and e+1."""
    n = len(tour)
    prev = np.roll(tour, 1)
    nxt = np.roll(tour, -1)
    removal = weights[prev, tour] + weights[tour, nxt] - weights[prev, nxt]
    edge = weights[tour, nxt]
    insertion = weights[tour[:, None], tour[None, :]] + weights[tour[:, None], nxt[None, :]] - edge[None, :]
    delta = insertion - removal[:, None]
    idx = np.arange(n)
    delta[idx, idx] = np.inf
    delta[idx, (idx - 1) % n] = np.inf
    return delta


def _first_improving(delta: np.ndarray, tol: float):
    hits = np.flatnonzero(delta.ravel() < -tol)
    if hits.size == 0:
        return None
    return divmod(int(hits[0]), delta.shape[1])


def _apply_two_opt(tour: np.ndarray, i: int, j: int) -> np.ndarray:
    tour = tour.copy()
    tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1]
    return tour


def _apply_relocate(tour: np.ndarray, i: int, e: int) -> np.ndarray:
    city = tour[i]
    after = tour[(e + 1) % len(tour)]
    rest = np.delete(tour, i)
    pos = int(np.flatnonzero(rest == after)[0])
    return np.insert(rest, pos, city)


def local_search(tour, weights: np.ndarray, max_sweeps: int = 100_000) -> list[int]:
    """Alternate Relocate-Once and Two-Opt sweeps until neither improves.

    Each sweep applies first-improvement moves until its own neighbourhood is
    exhausted, so the result is locally optimal for both move types.
    """
    t = np.asarray(tour, dtype=int)
    n = len(t)
    if n <= 3:
        return t.tolist()
    tol = _tolerance(weights)
    for _ in range(max_sweeps):
        improved = False
        while (mv := _first_improving(relocate_deltas(t, weights), tol)) is not None:
            t = _apply_relocate(t, *mv)
            improved = True
        while (mv := _first_improving(two_opt_deltas(t, weights), tol)) is not None:
            t = _apply_two_opt(t, *mv)
            improved = True
        if not improved:
            break
    return t.tolist()


@dataclass
class GLSConfig:
    rounds: int = 16
    # None: 0.1 * (nearest-neighbour cost / n), computed per instance
    penalty_weight: Optional[float] = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.penalty_weight is not None and self.penalty_weight <= 0:
            raise ValueError("penalty_weight must be positive")


def utility(guide_value: float, penalty: float) -> float:
    return guide_value / (1.0 + penalty)


def guided_local_search(distance_matrix: np.ndarray, guide: np.ndarray, cfg: GLSConfig) -> list[int]:
    guide = np.asarray(guide, dtype=float)
    if guide.shape != distance_matrix.shape:
        raise InvalidOutputError(f"guide has shape {guide.shape}, expected {distance_matrix.shape}")
    if not np.all(np.isfinite(guide)):
        raise InvalidOutputError("guide contains non-finite values")
    n = distance_matrix.shape[0]
    tour = nearest_neighbor(distance_matrix)
    best, best_cost = list(tour), tour_cost(tour, distance_matrix)
    if n <= 3:
        return best
    lam = cfg.penalty_weight if cfg.penalty_weight is not None else 0.1 * best_cost / n
    penalty = np.zeros_like(distance_matrix)
    for _ in range(cfg.rounds):
        tour = local_search(tour, distance_matrix + lam * penalty)
        cost = tour_cost(tour, distance_matrix)
        if cost < best_cost:
            best, best_cost = list(tour), cost
        t = np.asarray(tour)
        a, b = t, np.roll(t, -1)
        util = guide[a, b] / (1.0 + penalty[a, b])
        k = int(np.argmax(util))
        penalty[a[k], b[k]] += 1.0
        penalty[b[k], a[k]] += 1.0
    return best


def held_karp(distance_matrix: np.ndarray) -> float:
    """Exact optimal tour cost by dynamic programming over subsets."""
    d = np.asarray(distance_matrix, dtype=float)
    n = d.shape[0]
    if n == 1:
        return 0.0
    if n == 2:
        return 2.0 * d[0, 1]
    m = n - 1  # cities 1..n-1 indexed 0..m-1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    for j in range(m):
        dp[1 << j, j] = d[0, j + 1]
    sub = d[1:, 1:]
    for mask in range(1, full):
        row = dp[mask]
        if not np.isfinite(row).any():
            continue
        # extend every path ending in j (in mask) to every k not in mask
        out = np.array([k for k in range(m) if not mask & (1 << k)], dtype=np.int64)
        if out.size == 0:
            continue
        cand = (row[:, None] + sub[:, out]).min(axis=0)
        nxt = mask | (1 << out)
        dp[nxt, out] = np.minimum(dp[nxt, out], cand)
    return float((dp[full - 1] + d[1:, 0]).min())


def exact_optimum(instance: TSPInstance) -> float:
    if instance.size <= HELD_KARP_MAX_CITIES:
        return held_karp(instance.distance_matrix)
    if instance.optimum_cost is None:
        raise ValueError(
            f"instance {instance.name!r} has {instance.size} cities; "
            f"supply an optimum for more than {HELD_KARP_MAX_CITIES}"
        )
    return float(instance.optimum_cost)


def gap_percent(cost: float, optimum: float) -> float:
    return 100.0 * (cost - optimum) / optimum


def default_rounds(n: int) -> int:
    return 16 if n <= 100 else 8


def solve(heuristics_fn: Callable, instance: TSPInstance, rounds: Optional[int] = None,
          penalty_weight: Optional[float] = None) -> float:
    """Run the evolved guide through GLS and return the tour cost."""
    d = instance.distance_matrix
    guide = heuristics_fn(d.copy())
    guide_arr = _as_guide(guide, d.shape)
    cfg = GLSConfig(rounds=rounds or default_rounds(instance.size), penalty_weight=penalty_weight)
    tour = guided_local_search(d, guide_arr, cfg)
    if not is_permutation(tour, instance.size):
        raise AssertionError("GLS produced an invalid tour")
    return tour_cost(tour, d)


def _as_guide(guide, shape) -> np.ndarray:
    try:
        arr = np.asarray(guide, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidOutputError(f"heuristics returned non-numeric output: {exc}") from None
    if arr.shape != shape:
        raise InvalidOutputError(f"heuristics returned shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidOutputError("heuristics returned non-finite values")
    return arr


def evaluate(heuristics_fn: Callable, instances: list[TSPInstance], rounds: Optional[int] = None) -> list[float]:
    gaps = []
    for inst in instances:
        cost = solve(heuristics_fn, inst, rounds=rounds)
        gaps.append(gap_percent(cost, exact_optimum(inst)))
    return gaps


def best_known_cost(instance: TSPInstance, rounds: int = 200) -> float:
    """Reference cost from a long identity-guide GLS run (used when no optimum is supplied)."""
    d = instance.distance_matrix
    tour = guided_local_search(d, d, GLSConfig(rounds=rounds))
    return tour_cost(tour, d)


@dataclass
class TSPSuite:
    sizes: tuple[int, ...] = (100, 200)
    per_size: int = 100
    rounds: Optional[int] = None
    reference_rounds: int = 200

    def generate(self, split: str, seed: int) -> list[TSPInstance]:
        if split not in ("validation", "validation_perturbed", "test"):
            raise ValueError(f"unknown split {split!r}")
        stream = 2 if split == "test" else 0
        rng = np.random.default_rng([seed, stream])
        insts = []
        for c in self.sizes:
            for i in range(self.per_size):
                coords = rng.random((c, 2))
                tag = "test" if split == "test" else "val"
                insts.append(TSPInstance.from_coordinates(coords, name=f"tsp{c}_{tag}_{i:03d}"))
        if split == "validation_perturbed":
            prng = np.random.default_rng([seed, 1])
            insts = [perturb(inst, prng) for inst in insts]
        for inst in insts:
            self.attach_reference(inst)
        return insts

    def attach_reference(self, inst: TSPInstance) -> None:
        if inst.optimum_cost is not None:
            return
        if inst.size <= HELD_KARP_MAX_CITIES:
            inst.optimum_cost = held_karp(inst.distance_matrix)
            inst.optimum_source = "held_karp"
        else:
            inst.optimum_cost = best_known_cost(inst, self.reference_rounds)
            inst.optimum_source = "best_known"
