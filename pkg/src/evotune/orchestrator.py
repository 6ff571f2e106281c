"""The search loop: sample, prompt, generate, evaluate, register; train every f_rl steps.

A run directory holds::

    config.yaml        copy of the run configuration
    instances/         instance files, one per (task, split, seed)
    database.jsonl     program database log (append-only)
    preference.jsonl   accumulated preference triplets
    prompts.jsonl      one rendered prompt per timestep
    outputs.jsonl      every generated output with its evaluation
    events.jsonl       typed run events (seed check, RL updates, retries)
    metrics.jsonl      one summary row per timestep
    checkpoints/       resumable state, ``latest.json`` points at the newest
    rl/                datasets handed to the trainer at each update

Checkpoints store byte offsets of every log, so resuming truncates anything
written after the checkpoint and replays from there.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from evotune.config import RunConfig, dump_config
from evotune.database import ProgramDatabase, ProgramRecord, ProgramTooLongError
from evotune.generation import (
    ExtractedProgram,
    GenerationError,
    HttpBackend,
    extract_program,
    generate,
)
from evotune.mock import MockBackend
from evotune.preference import (
    GenerationGroup,
    GroupEntry,
    PreferenceDataset,
    ThresholdState,
    build_pairs,
    filter_and_accumulate,
    rest_em_schedule,
    write_dataset,
)
from evotune.prompting import load_task_descriptor, render_prompt
from evotune.rl import (
    CommandTrainer,
    HttpTrainer,
    PolicyHandle,
    StubTrainer,
    TrainerError,
    rest_em_update,
    run_rl_update,
)
from evotune.sandbox import ExecutionResult, Sandbox
from evotune.tasks import generate_instances, instance_path, save_instance_set

logger = logging.getLogger(__name__)

LOG_FILES = ("database", "preference", "prompts", "outputs", "events", "metrics")

# named RNG streams derived from the master seed
STREAM_DB = 1
STREAM_PAIRING = 2


class RunAborted(RuntimeError):
    """The run stopped early; the latest checkpoint can be resumed."""


class SeedEvaluationError(RuntimeError):
    pass


def stream(seed: int, name: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, name, t])


class JsonlLog:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, obj: dict) -> None:
        self._fh.write(json.dumps(obj, ensure_ascii=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _truncate(path: Path, offset: int) -> None:
    if not path.exists():
        if offset:
            raise RunAborted(f"{path} is missing but the checkpoint expects {offset} bytes")
        path.touch()
        return
    size = path.stat().st_size
    if size < offset:
        raise RunAborted(f"{path} is shorter ({size} B) than the checkpoint offset ({offset} B)")
    if size > offset:
        with open(path, "r+b") as fh:
            fh.truncate(offset)


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


@dataclass
class RunState:
    t: int = 0
    outputs_sampled: int = 0
    policy: PolicyHandle = field(default_factory=PolicyHandle.base)
    rl_updates: int = 0
    threshold: ThresholdState = field(default_factory=ThresholdState)
    seed_reward: Optional[float] = None
    db: Optional[ProgramDatabase] = None
    pref: Optional[PreferenceDataset] = None

    def summary(self) -> dict:
        best = self.db.best() if self.db is not None and len(self.db) else None
        return {
            "t": self.t,
            "outputs_sampled": self.outputs_sampled,
            "policy": self.policy.id,
            "rl_updates": self.rl_updates,
            "seed_reward": self.seed_reward,
            "best_reward": best.reward if best else None,
            "best_id": best.id if best else None,
            "database_size": len(self.db) if self.db is not None else 0,
            "preference_size": len(self.pref) if self.pref is not None else 0,
        }


def make_backend(cfg: RunConfig):
    g = cfg.generator
    if g.backend == "mock":
        return MockBackend(cfg.task, seed=cfg.seed, failure_rate=g.mock_failure_rate)
    if g.url:
        return HttpBackend(g.url, token=os.environ.get(g.token_env), timeout=g.timeout)
    return HttpBackend.from_env(timeout=g.timeout)


def make_trainer(cfg: RunConfig):
    tr = cfg.trainer
    if tr.backend == "stub":
        return StubTrainer()
    if tr.backend == "command":
        return CommandTrainer(tr.command, timeout=tr.timeout)
    return HttpTrainer(tr.url, timeout=tr.timeout or 3600.0)


def ensure_instances(cfg: RunConfig, run_dir: Path, split: str = "validation") -> Path:
    path = instance_path(run_dir / "instances", cfg.task, split, cfg.instances.seed)
    if not path.exists():
        iset = generate_instances(cfg.task, split, cfg.instances.seed, cfg.instances.params)
        save_instance_set(iset, path)
    return path


class Orchestrator:
    """Owns one run directory. ``backend``/``trainer``/``sandbox`` may be injected."""

    def __init__(self, cfg: RunConfig, run_dir: Path | str, backend=None, trainer=None,
                 sandbox: Optional[Sandbox] = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.task = load_task_descriptor(cfg.task)
        self.backend = backend if backend is not None else make_backend(cfg)
        self.trainer = trainer if trainer is not None else make_trainer(cfg)
        self.sandbox = sandbox or Sandbox(workers=cfg.workers)
        self.state = RunState(threshold=ThresholdState(percentile=cfg.threshold_percentile),
                              policy=PolicyHandle.base(cfg.base_policy))
        self._cache: dict[str, ExecutionResult] = {}
        self._logs: dict[str, JsonlLog] = {}
        self._prompts: dict[str, str] = {}
        self._sft_items: list[tuple[float, dict]] = []

    # -- paths and logs -------------------------------------------------

    def path(self, name: str) -> Path:
        return self.run_dir / f"{name}.jsonl"

    @property
    def ckpt_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    def _open_logs(self) -> None:
        for name in ("prompts", "outputs", "events", "metrics"):
            self._logs[name] = JsonlLog(self.path(name))
        self.state.db.attach_log(self.path("database"))
        self.state.pref.path = self.path("preference")

    def close(self) -> None:
        for log in self._logs.values():
            log.close()
        self._logs.clear()
        if self.state.db is not None:
            self.state.db.close_log()

    def event(self, kind: str, **data) -> None:
        self._logs["events"].write({"t": self.state.t, "event": kind, **data})

    # -- setup ----------------------------------------------------------

    def start(self, resume: bool = True) -> RunState:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(exist_ok=True)
        (self.run_dir / "rl").mkdir(exist_ok=True)
        self.instances = ensure_instances(self.cfg, self.run_dir)
        latest = self.ckpt_dir / "latest.json"
        if resume and latest.exists():
            self._resume(json.loads(latest.read_text()))
        else:
            if self.path("database").exists() and self.path("database").stat().st_size:
                raise RunAborted(f"{self.run_dir} already holds a run without a checkpoint")
            self._fresh()
        dump_config(self.cfg, self.run_dir / "config.yaml")
        return self.state

    def _fresh(self) -> None:
        for name in LOG_FILES:
            self.path(name).write_text("")
        self.state.db = ProgramDatabase(self.cfg.database.num_islands, self.cfg.max_program_chars)
        self.state.pref = PreferenceDataset()
        self._open_logs()
        result = self.evaluate([self.task.seed_program])[0]
        self.event("seed_evaluation", status=result.status, reward=result.reward, detail=result.detail)
        if not result.ok:
            self.close()
            raise SeedEvaluationError(f"seed program failed evaluation: {result.status} {result.detail}")
        self.state.seed_reward = result.reward
        self.state.db.register_seed(self.task.seed_program, result.reward)
        self.checkpoint()

    def _resume(self, ckpt: dict) -> None:
        if ckpt["fingerprint"] != self.cfg.fingerprint():
            raise RunAborted("checkpoint was written under a different configuration")
        for name in LOG_FILES:
            _truncate(self.path(name), ckpt["offsets"][name])
        s = self.state
        s.t = ckpt["t"]
        s.outputs_sampled = ckpt["outputs_sampled"]
        s.policy = PolicyHandle(**ckpt["policy"])
        s.rl_updates = ckpt["rl_updates"]
        s.seed_reward = ckpt["seed_reward"]
        s.threshold.recent_rewards = list(ckpt["recent_rewards"])
        s.db = ProgramDatabase.restore(self.path("database"), self.cfg.database.num_islands,
                                       self.cfg.max_program_chars)
        s.pref = PreferenceDataset.load(self.path("preference"))
        for row in _read_jsonl(self.path("prompts")):
            self._prompts[row["prompt_id"]] = row["text"]
        for row in _read_jsonl(self.path("outputs")):
            if row.get("result"):
                self._cache[row["source"]] = ExecutionResult.from_dict(row["result"])
            self._note_sft(row)
        self._open_logs()
        self.event("resume", from_t=s.t)

    def checkpoint(self) -> Path:
        s = self.state
        offsets = {name: self.path(name).stat().st_size for name in LOG_FILES}
        ckpt = {
            "t": s.t,
            "outputs_sampled": s.outputs_sampled,
            "policy": {"id": s.policy.id, "base_id": s.policy.base_id},
            "rl_updates": s.rl_updates,
            "seed_reward": s.seed_reward,
            "recent_rewards": s.threshold.recent_rewards,
            "offsets": offsets,
            "fingerprint": self.cfg.fingerprint(),
        }
        path = self.ckpt_dir / f"ckpt_t{s.t:06d}.json"
        path.write_text(json.dumps(ckpt))
        tmp = self.ckpt_dir / "latest.json.tmp"
        tmp.write_text(json.dumps(ckpt))
        os.replace(tmp, self.ckpt_dir / "latest.json")
        return path

    # -- evaluation -------------------------------------------------------

    def evaluate(self, sources: list[str]) -> list[ExecutionResult]:
        """Sandbox results for ``sources``, reusing earlier results for identical text."""
        todo = [s for s in dict.fromkeys(sources) if s not in self._cache]
        if todo:
            for src, res in zip(todo, self.sandbox.evaluate_many(todo, self.cfg.task, self.instances,
                                                                 self.cfg.limits)):
                self._cache[src] = res
        return [self._cache[s] for s in sources]

    # -- one timestep ---------------------------------------------------------

    def _generate(self, prompt):
        last = None
        for attempt in range(1, self.cfg.generator.max_retries + 1):
            try:
                return generate(self.backend, prompt, self.cfg.sampling, self.state.policy.id)
            except GenerationError as exc:
                last = exc
                self.event("generation_retry", attempt=attempt, error=f"{type(exc).__name__}: {exc}")
        self.checkpoint()
        raise RunAborted(f"generation failed {self.cfg.generator.max_retries} times at t={self.state.t + 1}: {last}")

    def step(self) -> RunState:
        cfg, s = self.cfg, self.state
        if s.t >= cfg.T:
            raise ValueError("run already reached T")
        t = s.t + 1
        island, samples = s.db.sample_for_prompt(cfg.database, t / max(cfg.T, 1), stream(cfg.seed, STREAM_DB, t))
        prompt = render_prompt(self.task, [(r, r.reward) for r in samples], prompt_id=f"p{t:06d}",
                               island_id=island, timestep=t)
        outputs = self._generate(prompt)

        extracted = [extract_program(o, self.task.required_function_name) for o in outputs]
        sources = [e.source for e in extracted if isinstance(e, ExtractedProgram)]
        results = iter(self.evaluate(sources))

        self._logs["prompts"].write({"t": t, "prompt_id": prompt.prompt_id, "island_id": island,
                                     "source_record_ids": prompt.source_record_ids, "text": prompt.text})
        self._prompts[prompt.prompt_id] = prompt.text
        entries = []
        for out, ex in zip(outputs, extracted):
            row: dict[str, Any] = {"t": t, "prompt_id": prompt.prompt_id, "k": out.output_index,
                                   "policy": s.policy.id, "text": out.text}
            reward = None
            if isinstance(ex, ExtractedProgram):
                res = next(results)
                row.update(source=ex.source, extraction=ex.extraction_method, result=res.to_dict())
                failure = None if res.ok else res.status
                if res.ok:
                    rec = ProgramRecord(f"t{t:06d}-k{out.output_index}", ex.source, res.reward, island, t,
                                        prompt.prompt_id)
                    try:
                        row["record_id"] = rec.id
                        s.db.register(rec)
                        reward = res.reward
                    except ProgramTooLongError:
                        failure = "too_long"
                        row.pop("record_id")
            else:
                failure = ex.reason
            row["status"] = failure or "ok"
            row["reward"] = reward
            self._logs["outputs"].write(row)
            self._note_sft(row)
            entries.append(GroupEntry(out.output_index, out.text, reward, failure))

        group = GenerationGroup(prompt.prompt_id, entries, prompt.text, t)
        s.threshold.extend(group.valid_rewards)
        before = len(s.pref)
        triplets = build_pairs(group, stream(cfg.seed, STREAM_PAIRING, t))
        tau = s.threshold.tau
        if tau is not None:
            filter_and_accumulate(s.pref, triplets, tau)

        s.t = t
        s.outputs_sampled += cfg.K
        best = s.db.best()
        self._logs["metrics"].write({
            "t": t, "budget": s.outputs_sampled, "valid": len(group.valid_rewards),
            "pairs": len(triplets), "pairs_kept": len(s.pref) - before, "tau": tau,
            "best_reward": best.reward, "database_size": len(s.db), "policy": s.policy.id,
        })
        if t % cfg.f_rl == 0:
            self.rl_update()
        if t % cfg.checkpoint_every == 0 or t == cfg.T or t % cfg.f_rl == 0:
            self.checkpoint()
        return s

    def _note_sft(self, row: dict) -> None:
        if row.get("reward") is not None:
            self._sft_items.append((row["reward"], {
                "prompt_id": row["prompt_id"],
                "prompt_text": self._prompts.get(row["prompt_id"], ""),
                "completion_text": row["text"],
                "reward": row["reward"],
            }))

    # -- RL boundary ------------------------------------------------------------

    def rl_update(self) -> Optional[PolicyHandle]:
        """Train from the base policy on everything gathered so far and swap handles."""
        cfg, s = self.cfg, self.state
        method = cfg.rl.method
        new = None
        try:
            if method == "dpo":
                path = write_dataset(s.pref, self.run_dir / "rl" / f"pref_t{s.t:06d}.jsonl")
                self.event("preference_export", path=str(path.relative_to(self.run_dir)), size=len(s.pref))
                new = run_rl_update(s.policy, path, cfg.rl, self.trainer, s.t, len(s.pref))
            elif method == "rest_em":
                new = self._rest_em()
        except TrainerError as exc:
            self.event("rl_failure", method=method, error=str(exc), policy=s.policy.id)
            logger.warning("RL update at t=%d failed, keeping %s: %s", s.t, s.policy.id, exc)
        else:
            if method == "none":
                pass
            elif new is None:
                self.event("rl_skip", method=method, reason="empty dataset")
            else:
                self.event("rl_update", method=method, old_policy=s.policy.id, new_policy=new.id,
                           dataset_size=len(s.pref))
                s.policy = new
                s.rl_updates += 1
        s.threshold.reset()
        return new

    def _rest_em(self) -> Optional[PolicyHandle]:
        cfg, s = self.cfg, self.state
        if not self._sft_items or not s.threshold.recent_rewards:
            return None
        rewards = [r for r, _ in self._sft_items]
        items = [it for _, it in self._sft_items]
        schedule = rest_em_schedule(rewards, s.threshold.recent_rewards, cfg.rl.rest_em_percentile,
                                    cfg.rl.rest_em_stages, items=items)
        stages = []
        for level, (tau, data) in enumerate(schedule):
            path = self.run_dir / "rl" / f"sft_t{s.t:06d}_l{level}.jsonl"
            with open(path, "w", encoding="utf-8") as fh:
                for item in data:
                    fh.write(json.dumps(item, ensure_ascii=True) + "\n")
            stages.append((tau, path, len(data)))
        self.event("rest_em_schedule", thresholds=[tau for tau, _, _ in stages], sizes=[n for _, _, n in stages])
        return rest_em_update(s.policy, stages, cfg.rl, self.trainer, s.t)


def run_search(cfg: RunConfig, run_dir: Path | str, *, resume: bool = True, stop_at: Optional[int] = None,
               backend=None, trainer=None, sandbox: Optional[Sandbox] = None) -> RunState:
    """Run (or continue) a search until ``T`` or, if given, ``stop_at`` timesteps."""
    orch = Orchestrator(cfg, run_dir, backend=backend, trainer=trainer, sandbox=sandbox)
    started = time.monotonic()
    try:
        state = orch.start(resume=resume)
        end = cfg.T if stop_at is None else min(stop_at, cfg.T)
        while state.t < end:
            orch.step()
        if state.t != 0 and state.t % cfg.checkpoint_every:
            orch.checkpoint()
        orch.event("stopped", **state.summary(), seconds=round(time.monotonic() - started, 3))
    finally:
        orch.close()
    return orch.state
