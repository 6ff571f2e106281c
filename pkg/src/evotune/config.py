"""Run configuration and its YAML representation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from evotune.database import SamplingConfig
from evotune.generation import SamplingParams
from evotune.rl import RLUpdateConfig
from evotune.sandbox import ResourceLimits
from evotune.tasks import get_task


@dataclass
class GeneratorConfig:
    backend: str = "mock"  # mock | http
    url: Optional[str] = None
    token_env: str = "EVOTUNE_INFERENCE_TOKEN"
    timeout: float = 300.0
    mock_failure_rate: float = 0.0
    max_retries: int = 3

    def __post_init__(self):
        if self.backend not in ("mock", "http"):
            raise ValueError("generator.backend must be 'mock' or 'http'")
        if self.max_retries < 1:
            raise ValueError("generator.max_retries must be >= 1")


@dataclass
class TrainerConfig:
    backend: str = "stub"  # stub | command | http
    command: Optional[list[str]] = None
    url: Optional[str] = None
    timeout: Optional[float] = None

    def __post_init__(self):
        if self.backend not in ("stub", "command", "http"):
            raise ValueError("trainer.backend must be 'stub', 'command' or 'http'")
        if self.backend == "command" and not self.command:
            raise ValueError("trainer.command is required for the command backend")
        if self.backend == "http" and not self.url:
            raise ValueError("trainer.url is required for the http backend")


@dataclass
class InstanceConfig:
    seed: int = 0
    params: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    task: str = "bin_packing"
    T: int = 2800
    K: int = 8
    seed: int = 0
    deterministic: bool = True
    workers: Optional[int] = None
    threshold_percentile: float = 30.0
    checkpoint_every: int = 25
    base_policy: str = "base"
    sampling: SamplingParams = field(default_factory=SamplingParams)
    database: SamplingConfig = field(default_factory=SamplingConfig)
    max_program_chars: Optional[int] = None
    limits: Optional[ResourceLimits] = None
    rl: RLUpdateConfig = field(default_factory=RLUpdateConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    instances: InstanceConfig = field(default_factory=InstanceConfig)

    def __post_init__(self):
        get_task(self.task)
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.limits is None:
            self.limits = ResourceLimits.for_task(self.task)
        # K is the single source of truth for the batch size
        self.sampling = dataclasses.replace(self.sampling, n=self.K)

    @property
    def m(self) -> int:
        return self.database.m

    @property
    def f_rl(self) -> int:
        return self.rl.f_rl

    @property
    def budget(self) -> int:
        return self.T * self.K

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sampling"].pop("n")
        return d

    def fingerprint(self) -> str:
        """Hash of the settings that determine the search trajectory."""
        d = self.to_dict()
        for k in ("T", "workers", "checkpoint_every", "generator", "trainer"):
            d.pop(k)
        d["generator_backend"] = self.generator.backend
        d["mock_failure_rate"] = self.generator.mock_failure_rate
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        sections = {
            "sampling": SamplingParams,
            "database": SamplingConfig,
            "limits": ResourceLimits,
            "rl": RLUpdateConfig,
            "generator": GeneratorConfig,
            "trainer": TrainerConfig,
            "instances": InstanceConfig,
        }
        # top-level shorthands
        if "m" in d:
            d.setdefault("database", {})["m"] = d.pop("m")
        if "f_rl" in d:
            d.setdefault("rl", {})["f_rl"] = d.pop("f_rl")
        kwargs: dict[str, Any] = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key in sections and value is not None:
                kwargs[key] = _build(sections[key], value, key)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _build(kind, value: dict, where: str):
    if not isinstance(value, dict):
        raise ValueError(f"config section {where!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = set(value) - known
    if unknown:
        raise ValueError(f"unknown keys in {where!r}: {sorted(unknown)}")
    if kind is SamplingParams:
        value = {k: v for k, v in value.items() if k != "n"}
    return kind(**value)


def load_config(path: Path | str) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: Path | str) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
