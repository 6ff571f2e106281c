"""Command-line entry point: ``evotune <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import shlex
import sys
from pathlib import Path
from typing import Optional

from evotune.config import RunConfig, dump_config, load_config
from evotune.database import ProgramDatabase
from evotune.orchestrator import RunAborted, SeedEvaluationError, run_search
from evotune.preference import read_dataset, write_dataset
from evotune.reporting import (
    aggregate,
    default_budgets,
    eval_split,
    format_aggregate,
    format_rows,
    metrics_row,
    progress_curve,
    score_histogram,
)
from evotune.rl import CommandTrainer, HttpTrainer, PolicyHandle, RLUpdateConfig, StubTrainer, TrainerError, make_job
from evotune.sandbox import Sandbox
from evotune.tasks import SPLITS, generate_instances, get_task, instance_path, save_instance_set

log = logging.getLogger("evotune")


class RunView:
    """A database plus whatever run configuration sits next to it."""

    def __init__(self, target: str):
        p = Path(target)
        self.run_dir = p if p.is_dir() else p.parent
        db_path = p / "database.jsonl" if p.is_dir() else p
        if not db_path.exists():
            raise SystemExit(f"error: no database log at {db_path}")
        cfg_path = self.run_dir / "config.yaml"
        self.cfg: Optional[RunConfig] = load_config(cfg_path) if cfg_path.exists() else None
        n = self.cfg.database.num_islands if self.cfg else None
        self.db = ProgramDatabase.restore(db_path, num_islands=n)

    @property
    def K(self) -> int:
        return self.cfg.K if self.cfg else 8

    def task(self, override: Optional[str]) -> Optional[str]:
        return override or (self.cfg.task if self.cfg else None)

    def total(self) -> int:
        return max((r.timestep for r in self.db), default=0) * self.K


def _budgets(arg: Optional[str], total: int) -> list[int]:
    if arg:
        return [int(x) for x in arg.replace(",", " ").split()]
    return default_budgets(total)


def _tsv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, delimiter="\t", lineterminator="\n").writerows(rows)
    return buf.getvalue()


# -- commands -----------------------------------------------------------------

def cmd_init(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig(task=args.task or "bin_packing")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    spec = get_task(cfg.task)
    sandbox = Sandbox(workers=1)
    rows = [["split", "instances", "path", "seed_status", "seed_gap"]]
    for split in args.splits:
        path = instance_path(run_dir / "instances", cfg.task, split, cfg.instances.seed)
        if not path.exists():
            save_instance_set(generate_instances(cfg.task, split, cfg.instances.seed, cfg.instances.params), path)
        res = sandbox.evaluate(spec.seed_program, cfg.task, path, cfg.limits)
        gap = f"{-res.reward:.6g}" if res.ok else ""
        n = len(json.loads(path.read_text())["instances"])
        rows.append([split, n, str(path), res.status, gap])
    sys.stdout.write(_tsv(rows))
    return 0


def cmd_search(args) -> int:
    saved = Path(args.run_dir) / "config.yaml"
    if args.config:
        cfg = load_config(args.config)
    elif saved.exists() and not args.no_resume:
        cfg = load_config(saved)
    else:
        cfg = RunConfig(task=args.task or "bin_packing")
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.budget is not None:
        d["T"] = math.ceil(args.budget / cfg.K)
    if args.deterministic is not None:
        d["deterministic"] = args.deterministic
    if args.workers is not None:
        d["workers"] = args.workers
    cfg = RunConfig.from_dict(d)
    if not cfg.deterministic:
        log.warning("throughput mode requested; registration order is still fixed in this build")
    try:
        state = run_search(cfg, args.run_dir, resume=not args.no_resume, stop_at=args.stop_at)
    except SeedEvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    sys.stdout.write(_tsv([[k, v] for k, v in state.summary().items()]))
    return 0


def cmd_report(args) -> int:
    run = RunView(args.db)
    total = run.total()
    rows = [metrics_row(run.db, b, "validation", args.topk, run.K) for b in _budgets(args.budgets, total)]
    text = format_rows(rows)
    sys.stdout.write(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text(text)
        _write_plots(run, out, args.topk, args.task, args.bin_width)
    return 0


def cmd_eval(args) -> int:
    run = RunView(args.db)
    task = run.task(args.task)
    if task is None:
        raise SystemExit("error: --task is required when the run has no config.yaml")
    cfg = run.cfg or RunConfig(task=task)
    path = Path(args.instances) if args.instances else instance_path(run.run_dir / "instances", task, args.split,
                                                                      cfg.instances.seed)
    if not path.exists():
        save_instance_set(generate_instances(task, args.split, cfg.instances.seed, cfg.instances.params), path)
    budget = args.budget if args.budget is not None else run.total()
    row, results = eval_split(run.db, task, args.split, budget, cfg.limits, path,
                              sandbox=Sandbox(workers=args.workers), k=args.topk, K=run.K)
    sys.stdout.write(format_rows([row]))
    for src, res in results.items():
        if not res.ok:
            log.info("re-evaluation failed (%s): %s", res.status, src.splitlines()[0] if src else "")
    return 0


def cmd_export_pref(args) -> int:
    p = Path(args.db)
    src = p / "preference.jsonl" if p.is_dir() else p
    triplets = read_dataset(src)
    if args.max_timestep is not None:
        triplets = [t for t in triplets if t.timestep <= args.max_timestep]
    write_dataset(triplets, args.out)
    print(f"{len(triplets)}\t{args.out}")
    return 0


def cmd_train_update(args) -> int:
    if args.backend == "stub":
        backend = StubTrainer()
    elif args.backend == "command":
        if not args.command:
            raise SystemExit("error: --command is required for the command backend")
        backend = CommandTrainer(shlex.split(args.command))
    else:
        if not args.url:
            raise SystemExit("error: --url is required for the http backend")
        backend = HttpTrainer(args.url)
    cfg = RLUpdateConfig(beta=args.beta, kl_variant=args.kl_variant, epochs=args.epochs, alpha_init=args.alpha_init)
    size = len(read_dataset(args.pref))
    if size == 0:
        print("skipped: empty dataset", file=sys.stderr)
        return 1
    job = make_job(args.mode, PolicyHandle.base(args.base_policy).base_id, Path(args.pref).resolve(), cfg, args.t, size)
    try:
        reply = backend.train(job)
    except TrainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handle = reply.get("policy_handle") if isinstance(reply, dict) else None
    if not handle:
        print(f"error: trainer reply lacks a policy_handle: {reply!r}", file=sys.stderr)
        return 2
    print(handle)
    return 0


def _write_plots(run: RunView, out: Path, k: int, task_override: Optional[str], bin_width: Optional[float]) -> None:
    from evotune.plotting import plot_histogram, plot_progress

    task = run.task(task_override)
    spec = get_task(task) if task else None
    unit = "fraction" if spec and spec.gap_unit == "fraction" else "%"
    width = bin_width or (spec.histogram_bin_width if spec else 0.25)
    curve = progress_curve(run.db, run.K, run.total(), k=k)
    (out / "progress.tsv").write_text(_tsv(
        [["budget", "top1_gap", f"top{k}_gap", "unique_scores"]]
        + [[c["budget"], f"{c['top1_gap']:.6g}", f"{c['topk_gap']:.6g}", c["unique_scores"]] for c in curve]))
    hist = score_histogram(run.db, None, width, run.K)
    (out / "histogram.tsv").write_text(hist.to_text())
    plot_progress(curve, out / "progress.png", k=k, unit=unit)
    plot_histogram(hist, out / "histogram.png", unit=unit)


def cmd_plot(args) -> int:
    run = RunView(args.db)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_plots(run, out, args.topk, args.task, args.bin_width)
    for name in ("progress.png", "histogram.png", "progress.tsv", "histogram.tsv"):
        print(out / name)
    return 0


def cmd_aggregate(args) -> int:
    per_run = []
    for target in args.runs:
        run = RunView(target)
        per_run.append([metrics_row(run.db, b, "validation", args.topk, run.K)
                        for b in _budgets(args.budgets, run.total())])
    sys.stdout.write(format_aggregate(aggregate(per_run)))
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evotune", description="Evolutionary program search with policy updates.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="materialize instance sets and evaluate the seed program")
    s.add_argument("--config")
    s.add_argument("--task", choices=sorted(["bin_packing", "tsp", "flatpack"]))
    s.add_argument("--run-dir", required=True)
    s.add_argument("--splits", nargs="+", default=list(SPLITS), choices=SPLITS)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("search", help="run or resume a search")
    s.add_argument("--config", help="default: the run directory's config.yaml, if any")
    s.add_argument("--task", choices=sorted(["bin_packing", "tsp", "flatpack"]))
    s.add_argument("--run-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--budget", type=int, help="total sampled outputs (sets T = ceil(budget / K))")
    s.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--workers", type=int)
    s.add_argument("--stop-at", type=int, help="stop after this timestep (resumable)")
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_search)

    def db_args(s):
        s.add_argument("--db", required=True, help="run directory or database.jsonl")
        s.add_argument("--task", choices=sorted(["bin_packing", "tsp", "flatpack"]))
        s.add_argument("--topk", type=int, default=50)

    s = sub.add_parser("report", help="metrics table per budget")
    db_args(s)
    s.add_argument("--budgets", help="comma-separated output budgets")
    s.add_argument("--out-dir", help="also write metrics.tsv and figures here")
    s.add_argument("--bin-width", type=float)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("eval", help="re-evaluate stored programs on a split")
    db_args(s)
    s.add_argument("--split", required=True, choices=SPLITS)
    s.add_argument("--budget", type=int)
    s.add_argument("--instances", help="instance file (default: the run's own)")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-pref", help="write the preference dataset")
    s.add_argument("--db", required=True, help="run directory or preference.jsonl")
    s.add_argument("--out", required=True)
    s.add_argument("--max-timestep", type=int)
    s.set_defaults(func=cmd_export_pref)

    s = sub.add_parser("train-update", help="hand a dataset to a trainer backend")
    s.add_argument("--pref", required=True)
    s.add_argument("--backend", choices=["stub", "command", "http"], default="stub")
    s.add_argument("--command")
    s.add_argument("--url")
    s.add_argument("--mode", choices=["dpo", "sft"], default="dpo")
    s.add_argument("--base-policy", default="base")
    s.add_argument("--t", type=int, default=1000, help="timestep for the learning-rate schedule")
    s.add_argument("--beta", type=float, default=0.4)
    s.add_argument("--kl-variant", choices=["forward", "reverse"], default="forward")
    s.add_argument("--epochs", type=int, default=2)
    s.add_argument("--alpha-init", type=float, default=1e-5)
    s.set_defaults(func=cmd_train_update)

    s = sub.add_parser("plot", help="progress and histogram figures")
    db_args(s)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--bin-width", type=float)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("aggregate", help="mean and standard error across run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--budgets")
    s.add_argument("--topk", type=int, default=50)
    s.set_defaults(func=cmd_aggregate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
