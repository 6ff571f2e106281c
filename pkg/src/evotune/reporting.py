"""Metrics over a program database: top-k gaps, score diversity, histograms, re-evaluation."""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

from evotune.database import ProgramDatabase, ProgramRecord
from evotune.sandbox import ResourceLimits, Sandbox

DEFAULT_BUDGETS = (9600, 16000, 22400)


def _records(db: ProgramDatabase | Iterable[ProgramRecord]) -> list[ProgramRecord]:
    return list(db.records.values()) if isinstance(db, ProgramDatabase) else list(db)


def within_budget(db, budget: Optional[int], K: int = 8) -> list[ProgramRecord]:
    """Records produced within the first ``budget`` sampled outputs (seeds always count)."""
    recs = _records(db)
    if budget is None:
        return recs
    if budget < 0:
        raise ValueError("budget must be >= 0")
    last_t = budget // K
    return [r for r in recs if r.timestep <= last_t]


def ranked(records: Sequence[ProgramRecord]) -> list[ProgramRecord]:
    """Distinct programs, best first; ties go to the earliest timestep, then id."""
    seen: set[str] = set()
    out = []
    for r in sorted(records, key=lambda r: (-r.reward, r.timestep, r.id)):
        if r.source not in seen:
            seen.add(r.source)
            out.append(r)
    return out


def select_top(db, k: int, budget: Optional[int] = None, K: int = 8) -> list[ProgramRecord]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return ranked(within_budget(db, budget, K))[:k]


def top_k(db, k: int, budget: Optional[int] = None, K: int = 8) -> float:
    """Mean reward of the ``k`` best distinct programs within the budget."""
    top = select_top(db, k, budget, K)
    if not top:
        raise ValueError("no programs within budget")
    return math.fsum(r.reward for r in top) / len(top)


def unique_score_count(db, budget: Optional[int] = None, K: int = 8) -> int:
    return len({r.cluster_key for r in within_budget(db, budget, K)})


@dataclass
class Histogram:
    bin_width: float
    edges: list[float]
    counts: list[int]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(self.edges, self.edges[1:], self.counts):
            w.writerow([f"{lo:g}", f"{hi:g}", c])
        return buf.getvalue()


def histogram(gaps: Sequence[float], bin_width: float) -> Histogram:
    """Counts per half-open bin ``[k*w, (k+1)*w)`` spanning the data."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if not gaps:
        return Histogram(bin_width, [0.0, bin_width], [0])
    idx = [math.floor(g / bin_width) for g in gaps]
    lo, hi = min(idx), max(idx)
    counts = [0] * (hi - lo + 1)
    for i in idx:
        counts[i - lo] += 1
    edges = [(lo + j) * bin_width for j in range(hi - lo + 2)]
    return Histogram(bin_width, edges, counts)


def score_histogram(db, budget: Optional[int], bin_width: float, K: int = 8) -> Histogram:
    """Histogram of optimality gaps (negated rewards) of the programs within the budget."""
    return histogram([-r.reward for r in within_budget(db, budget, K)], bin_width)


@dataclass
class MetricsRow:
    split: str
    budget: int
    top1_gap: float
    top50_gap: float
    mean_reward: float
    unique_score_count: int
    programs: int
    failures: int = 0


def metrics_row(db, budget: int, split: str = "validation", k: int = 50, K: int = 8) -> MetricsRow:
    """Metrics from the rewards already stored in the database."""
    recs = within_budget(db, budget, K)
    if not recs:
        raise ValueError("no programs within budget")
    return MetricsRow(
        split=split,
        budget=budget,
        top1_gap=-top_k(recs, 1),
        top50_gap=-top_k(recs, k),
        mean_reward=math.fsum(r.reward for r in recs) / len(recs),
        unique_score_count=unique_score_count(recs),
        programs=len(recs),
    )


def eval_split(db, task: str, split: str, budget: int, limits: ResourceLimits, instances: Path | str,
               sandbox: Optional[Sandbox] = None, k: int = 50, K: int = 8) -> tuple[MetricsRow, dict]:
    """Re-run every distinct within-budget program on another split.

    Top-k is chosen by the score on that split. Programs that fail on the
    split are counted and left out. Returns the row and a per-source result
    map; the database is not touched.
    """
    sandbox = sandbox or Sandbox()
    progs = ranked(within_budget(db, budget, K))
    if not progs:
        raise ValueError("no programs within budget")
    sources = [r.source for r in progs]
    results = sandbox.evaluate_many(sources, task, instances, limits)
    rescored = [
        ProgramRecord(r.id, r.source, res.reward, r.island_id, r.timestep, r.prompt_id)
        for r, res in zip(progs, results) if res.ok
    ]
    failures = len(progs) - len(rescored)
    if not rescored:
        raise ValueError(f"every program failed on split {split!r}")
    row = MetricsRow(
        split=split,
        budget=budget,
        top1_gap=-top_k(rescored, 1),
        top50_gap=-top_k(rescored, k),
        mean_reward=math.fsum(r.reward for r in rescored) / len(rescored),
        unique_score_count=unique_score_count(rescored),
        programs=len(rescored),
        failures=failures,
    )
    return row, dict(zip(sources, results))


def default_budgets(total: int, budgets: Sequence[int] = DEFAULT_BUDGETS) -> list[int]:
    """Requested budgets that fit in ``total``; the run's own total if none do."""
    fit = [b for b in budgets if b <= total]
    return fit or [total]


def format_rows(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    names = [f.name for f in fields(MetricsRow)]
    w.writerow(names)
    for row in rows:
        d = asdict(row)
        w.writerow([f"{d[n]:.6g}" if isinstance(d[n], float) else d[n] for n in names])
    return buf.getvalue()


@dataclass
class AggregateRow:
    split: str
    budget: int
    metric: str
    mean: float
    stderr: float
    n: int


def aggregate(rows_per_run: Sequence[Sequence[MetricsRow]],
              metrics: Sequence[str] = ("top1_gap", "top50_gap", "unique_score_count")) -> list[AggregateRow]:
    """Mean and standard error across runs for each (split, budget, metric)."""
    groups: dict[tuple[str, int], list[MetricsRow]] = {}
    for rows in rows_per_run:
        for r in rows:
            groups.setdefault((r.split, r.budget), []).append(r)
    out = []
    for (split, budget), rows in sorted(groups.items()):
        for m in metrics:
            vals = [float(getattr(r, m)) for r in rows]
            se = statistics.stdev(vals) / math.sqrt(len(vals)) if len(vals) > 1 else float("nan")
            out.append(AggregateRow(split, budget, m, statistics.fmean(vals), se, len(vals)))
    return out


def format_aggregate(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["split", "budget", "metric", "mean", "stderr", "n"])
    for r in rows:
        w.writerow([r.split, r.budget, r.metric, f"{r.mean:.6g}", f"{r.stderr:.6g}", r.n])
    return buf.getvalue()


def progress_curve(db, K: int, total: int, points: int = 50, k: int = 50) -> list[dict]:
    """Top-1/top-k gaps and unique-score counts at evenly spaced budgets."""
    budgets = sorted({max(K, round(total * i / points)) for i in range(1, points + 1)}) if total else [0]
    out = []
    for b in budgets:
        recs = within_budget(db, b, K)
        if recs:
            out.append({"budget": b, "top1_gap": -top_k(recs, 1), "topk_gap": -top_k(recs, k),
                        "unique_scores": unique_score_count(recs)})
    return out
