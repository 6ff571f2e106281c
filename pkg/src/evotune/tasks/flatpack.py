"""Flatpack: place 3x3-stencil blocks on a grid to maximise covered area.

Actions are ``(block, rotation, row, col)`` where ``(row, col)`` is the
top-left anchor of the rotated 3x3 stencil, so the action space has shape
``(num_blocks, 4, num_rows - 2, num_cols - 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evotune.tasks.base import InvalidOutputError

SEED_PROGRAM = '''import numpy as np


def priority(current_grid, blocks, action_mask):
    """Every placement is equally good."""
    return np.zeros(action_mask.shape, dtype=np.float32)
'''

OBSTACLE = -1
# (grid side, instance count) for validation and test
SIZE_MIX = ((9, 15), (11, 20), (15, 10))


@dataclass
class FlatPackInstance:
    num_rows: int
    num_cols: int
    blocks: np.ndarray  # (num_blocks, 3, 3) of {0, 1}
    obstacle_mask: np.ndarray = None  # (num_rows, num_cols) bool
    name: str = ""
    # generator partition replayed as actions: (block, rotation, row, col)
    solution: Optional[list[tuple[int, int, int, int]]] = None

    def __post_init__(self):
        if self.num_rows < 3 or self.num_cols < 3:
            raise ValueError("grid must be at least 3x3")
        self.blocks = np.asarray(self.blocks, dtype=np.int8).reshape(-1, 3, 3)
        if self.obstacle_mask is None:
            self.obstacle_mask = np.zeros((self.num_rows, self.num_cols), dtype=bool)
        self.obstacle_mask = np.asarray(self.obstacle_mask, dtype=bool)
        for b in self.blocks:
            if not is_connected(b):
                raise ValueError("blocks must be non-empty and edge-connected")

    @property
    def num_blocks(self) -> int:
        return self.blocks.shape[0]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_rows": self.num_rows,
            "num_cols": self.num_cols,
            "blocks": self.blocks.tolist(),
            "obstacles": [list(map(int, rc)) for rc in np.argwhere(self.obstacle_mask)],
            "solution": [list(a) for a in self.solution] if self.solution is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlatPackInstance":
        mask = np.zeros((d["num_rows"], d["num_cols"]), dtype=bool)
        for r, c in d.get("obstacles", []):
            mask[r, c] = True
        sol = d.get("solution")
        return cls(
            num_rows=int(d["num_rows"]),
            num_cols=int(d["num_cols"]),
            blocks=np.asarray(d["blocks"], dtype=np.int8),
            obstacle_mask=mask,
            name=d.get("name", ""),
            solution=[tuple(a) for a in sol] if sol is not None else None,
        )


def is_connected(stencil: np.ndarray) -> bool:
    cells = {tuple(rc) for rc in np.argwhere(stencil)}
    if not cells:
        return False
    stack = [next(iter(cells))]
    seen = {stack[0]}
    while stack:
        r, c = stack.pop()
        for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(cells)


def rotations(blocks: np.ndarray) -> np.ndarray:
    """(num_blocks, 4, 3, 3): rotation k is ``np.rot90(block, k)``."""
    return np.stack([np.rot90(blocks, k, axes=(1, 2)) for k in range(4)], axis=1)


def action_mask(filled: np.ndarray, rotated: np.ndarray, placed: np.ndarray) -> np.ndarray:
    """Legal actions given the occupied cells (filled or obstacle)."""
    windows = sliding_window_view(filled.astype(np.int32), (3, 3))  # (R-2, C-2, 3, 3)
    overlap = np.einsum("bkij,rcij->bkrc", rotated.astype(np.int32), windows)
    mask = overlap == 0
    mask[placed] = False
    return mask


def place(grid: np.ndarray, stencil: np.ndarray, row: int, col: int, label: int) -> None:
    window = grid[row : row + 3, col : col + 3]
    if np.any((window != 0) & (stencil != 0)):
        raise AssertionError("placement overlaps an occupied cell")
    window[stencil != 0] = label


def rollout(priority_fn: Callable, instance: FlatPackInstance, on_step: Callable | None = None) -> float:
    """Greedy placement by heuristic score; returns covered fraction of free cells."""
    rows, cols = instance.num_rows, instance.num_cols
    grid = np.zeros((rows, cols), dtype=np.int32)
    grid[instance.obstacle_mask] = OBSTACLE
    rotated = rotations(instance.blocks)
    placed = np.zeros(instance.num_blocks, dtype=bool)
    shape = (instance.num_blocks, 4, rows - 2, cols - 2)
    while True:
        mask = action_mask(grid != 0, rotated, placed)
        if not mask.any():
            break
        scores = priority_fn(
            grid.astype(np.float32), instance.blocks.astype(np.float32), mask.copy()
        )
        scores = _check_scores(scores, shape, mask)
        masked = np.where(mask, scores, -np.inf)
        # argmax on the C-ordered array is the lexicographic tie-break
        flat = int(np.argmax(masked))
        b, k, r, c = np.unravel_index(flat, shape)
        place(grid, rotated[b, k], int(r), int(c), int(b) + 1)
        placed[b] = True
        if on_step is not None:
            on_step(grid.copy(), mask, (int(b), int(k), int(r), int(c)))
    return coverage(grid, instance.obstacle_mask)


def _check_scores(scores, shape, mask) -> np.ndarray:
    try:
        arr = np.asarray(scores, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidOutputError(f"priority returned non-numeric output: {exc}") from None
    if arr.shape != shape:
        raise InvalidOutputError(f"priority returned shape {arr.shape}, expected {shape}")
    # scores of illegal actions are never read
    if not np.all(np.isfinite(arr[mask])):
        raise InvalidOutputError("priority returned non-finite scores for legal actions")
    return arr


def coverage(grid: np.ndarray, obstacle_mask: np.ndarray) -> float:
    free = grid.size - int(obstacle_mask.sum())
    return float(np.count_nonzero(grid > 0)) / free


def gap(cov: float) -> float:
    return 1.0 - cov


def evaluate(priority_fn: Callable, instances: list[FlatPackInstance]) -> list[float]:
    return [gap(rollout(priority_fn, inst)) for inst in instances]


def obstacle_size(rows: int, cols: int) -> tuple[int, int]:
    return int(math.floor(math.sqrt(rows) + 0.5)), int(math.floor(math.sqrt(cols) + 0.5))


def with_center_obstacle(instance: FlatPackInstance) -> FlatPackInstance:
    h, w = obstacle_size(instance.num_rows, instance.num_cols)
    top = (instance.num_rows - h) // 2
    left = (instance.num_cols - w) // 2
    mask = instance.obstacle_mask.copy()
    mask[top : top + h, left : left + w] = True
    return FlatPackInstance(
        num_rows=instance.num_rows,
        num_cols=instance.num_cols,
        blocks=instance.blocks.copy(),
        obstacle_mask=mask,
        name=instance.name,
        solution=None,
    )


def generate_tiling(rows: int, cols: int, rng: np.random.Generator, name: str = "") -> FlatPackInstance:
    """Carve the grid into random connected pieces that each fit a 3x3 anchor window.

    Every piece is stored under a random rotation; ``solution`` records the
    action that puts it back, so replaying it tiles the grid exactly.
    """
    owner = np.full((rows, cols), -1, dtype=np.int64)
    blocks, solution = [], []
    while True:
        free = np.argwhere(owner < 0)
        if free.size == 0:
            break
        r0, c0 = (int(v) for v in free[0])  # top-left-most free cell
        ar = int(rng.integers(max(0, r0 - 2), min(r0, rows - 3) + 1))
        ac = int(rng.integers(max(0, c0 - 2), min(c0, cols - 3) + 1))
        target = int(rng.integers(1, 10))
        piece = {(r0, c0)}
        frontier = _neighbours((r0, c0), owner, ar, ac, piece)
        while len(piece) < target and frontier:
            cell = frontier[int(rng.integers(len(frontier)))]
            piece.add(cell)
            frontier = sorted(set(frontier) - {cell} | set(_neighbours(cell, owner, ar, ac, piece)))
        stencil = np.zeros((3, 3), dtype=np.int8)
        for r, c in piece:
            stencil[r - ar, c - ac] = 1
            owner[r, c] = len(blocks)
        k = int(rng.integers(4))
        blocks.append(np.rot90(stencil, -k))
        solution.append((len(blocks) - 1, k, ar, ac))
    return FlatPackInstance(rows, cols, np.array(blocks, dtype=np.int8), name=name, solution=solution)


def _neighbours(cell, owner, ar, ac, piece) -> list[tuple[int, int]]:
    r, c = cell
    out = []
    for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
        if ar <= nr < ar + 3 and ac <= nc < ac + 3 and owner[nr, nc] < 0 and (nr, nc) not in piece:
            out.append((nr, nc))
    return out


def replay(instance: FlatPackInstance, actions) -> float:
    """Apply a fixed action sequence and return coverage."""
    grid = np.zeros((instance.num_rows, instance.num_cols), dtype=np.int32)
    grid[instance.obstacle_mask] = OBSTACLE
    rotated = rotations(instance.blocks)
    for b, k, r, c in actions:
        place(grid, rotated[b, k], r, c, b + 1)
    return coverage(grid, instance.obstacle_mask)


@dataclass
class FlatPackSuite:
    size_mix: tuple[tuple[int, int], ...] = SIZE_MIX
    extra: dict = field(default_factory=dict)

    def generate(self, split: str, seed: int) -> list[FlatPackInstance]:
        if split not in ("validation", "validation_perturbed", "test"):
            raise ValueError(f"unknown split {split!r}")
        rng = np.random.default_rng([seed, 2 if split == "test" else 0])
        tag = "test" if split == "test" else "val"
        insts = [
            generate_tiling(side, side, rng, name=f"fp{side}_{tag}_{i:02d}")
            for side, count in self.size_mix
            for i in range(count)
        ]
        if split == "validation_perturbed":
            insts = [with_center_obstacle(inst) for inst in insts]
        return insts
