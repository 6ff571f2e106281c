"""Minimal TSPLIB reader (EUC_2D / CEIL_2D node coordinates, FULL_MATRIX weights)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from evotune.tasks.tsp import TSPInstance


def _header_value(line: str) -> tuple[str, str]:
    key, _, value = line.partition(":")
    return key.strip().upper(), value.strip()


def parse_tsplib(text: str) -> tuple[dict, np.ndarray]:
    header: dict[str, str] = {}
    lines = iter(text.splitlines())
    coords: list[tuple[float, float]] = []
    weights: list[float] = []
    for raw in lines:
        line = raw.strip()
        if not line or line == "EOF":
            continue
        if line.startswith("NODE_COORD_SECTION"):
            n = int(header["DIMENSION"])
            for _ in range(n):
                parts = next(lines).split()
                coords.append((float(parts[1]), float(parts[2])))
            continue
        if line.startswith("EDGE_WEIGHT_SECTION"):
            n = int(header["DIMENSION"])
            while len(weights) < n * n:
                weights.extend(float(x) for x in next(lines).split())
            continue
        if ":" in line:
            k, v = _header_value(line)
            header[k] = v
    kind = header.get("EDGE_WEIGHT_TYPE", "").upper()
    if kind in ("EUC_2D", "CEIL_2D"):
        xy = np.asarray(coords, dtype=float)
        raw = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
        # TSPLIB nint() rounds halves up
        matrix = np.ceil(raw) if kind == "CEIL_2D" else np.floor(raw + 0.5)
        return header, matrix
    if kind == "EXPLICIT" and header.get("EDGE_WEIGHT_FORMAT", "").upper() == "FULL_MATRIX":
        n = int(header["DIMENSION"])
        return header, np.asarray(weights, dtype=float).reshape(n, n)
    raise ValueError(f"unsupported TSPLIB edge weight type {kind!r}")


def load_tsplib(path: Path | str, optima: Optional[dict[str, float]] = None) -> TSPInstance:
    path = Path(path)
    header, matrix = parse_tsplib(path.read_text())
    name = header.get("NAME", path.stem)
    opt = None
    if optima and name in optima:
        opt = float(optima[name])
    return TSPInstance(
        distance_matrix=matrix,
        name=name,
        optimum_cost=opt,
        optimum_source="supplied" if opt is not None else None,
    )


def load_optima_table(path: Path | str) -> dict[str, float]:
    """Read ``name cost`` pairs, one per line (``#`` comments allowed)."""
    table = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, cost = line.replace(":", " ").split()[:2]
        table[name] = float(cost)
    return table

