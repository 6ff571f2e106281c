"""Prompt construction: system prompt, scored programs (worst first), task instructions."""

from __future__ import annotations

import re
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from evotune.database import ProgramRecord
from evotune.tasks import get_task


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class TaskDescriptor:
    task_name: str
    required_function_name: str
    task_prompt: str
    system_prompt: str
    seed_program: str


@dataclass
class RenderedPrompt:
    prompt_id: str
    island_id: Optional[int]
    source_record_ids: list[str]
    text: str
    created_at_timestep: int = 0
    scores: list[float] = field(default_factory=list)


def _read_template(name: str, template_dir: Optional[Path]) -> str:
    if template_dir is not None:
        return (Path(template_dir) / f"{name}.txt").read_text(encoding="utf-8")
    return resources.files("evotune").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def load_task_descriptor(task_name: str, template_dir: Optional[Path | str] = None) -> TaskDescriptor:
    """Build the descriptor for a shipped task; ``template_dir`` overrides the text assets."""
    spec = get_task(task_name)
    tdir = Path(template_dir) if template_dir is not None else None
    task_prompt = _read_template(task_name, tdir).rstrip("\n")
    if f"{spec.function_name}()" not in task_prompt:
        raise PromptError(f"task prompt for {task_name} never names {spec.function_name}()")
    return TaskDescriptor(
        task_name=task_name,
        required_function_name=spec.function_name,
        task_prompt=task_prompt,
        system_prompt=_read_template("system", tdir).rstrip("\n"),
        seed_program=spec.seed_program,
    )


def versioned_source(source: str, name: str, version: int) -> str:
    """Rename the top-level ``def name(`` to ``def name_v{version}(``."""
    pattern = re.compile(rf"^def\s+{re.escape(name)}\s*\(", re.MULTILINE)
    return pattern.sub(f"def {name}_v{version}(", source, count=1)


def format_score(score: float) -> str:
    return f"{score:.4f}"


def render_prompt(
    task: TaskDescriptor,
    samples: Sequence[tuple[ProgramRecord, float]],
    prompt_id: Optional[str] = None,
    island_id: Optional[int] = None,
    timestep: int = 0,
) -> RenderedPrompt:
    if not samples:
        raise PromptError("cannot render a prompt without programs")
    ordered = sorted(samples, key=lambda s: s[1])
    name = task.required_function_name
    parts = [task.system_prompt, ""]
    for version, (record, score) in enumerate(ordered):
        if not getattr(record, "source", None) or not record.source.strip():
            raise PromptError(f"sample {getattr(record, 'id', version)!r} has no source text")
        parts.append(f"# Version {version} of {name}()")
        parts.append(f"# score: {format_score(score)}")
        parts.append(versioned_source(record.source.strip("\n"), name, version))
        parts.append("")
    parts.append(task.task_prompt)
    text = "\n".join(parts) + "\n"
    return RenderedPrompt(
        prompt_id=prompt_id or uuid.uuid4().hex,
        island_id=island_id,
        source_record_ids=[r.id for r, _ in ordered],
        text=text,
        created_at_timestep=timestep,
        scores=[float(s) for _, s in ordered],
    )
