from __future__ import annotations

SPLITS = ("validation", "validation_perturbed", "test")


class InvalidOutputError(Exception):
    """A candidate heuristic returned output of the wrong shape, type or value."""
