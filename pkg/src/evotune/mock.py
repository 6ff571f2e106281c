"""Offline stand-in for an LLM: mutates the best program in the prompt.

Programs in the mock's template family look like::

    def priority(item, bins):
        residual = bins - item
        score = -1.0 * residual
        score -= 0.0001 * np.arange(bins.size)
        return score

Each ``score +=`` / ``score -=`` line is a term. A mutation jitters numeric
constants, adds a term from the task's template set, or removes one. Programs
outside the family are replaced by the task's canonical base program. Only
used for tests and offline acceptance runs.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from evotune.generation import SamplingParams, wrap_in_fence
from evotune.prompting import RenderedPrompt, load_task_descriptor

_NUMBER = re.compile(r"(?<![\w.])(\d+\.\d+(?:e-?\d+)?)")
_TERM = re.compile(r"^    score [-+*/]= ")


@dataclass(frozen=True)
class Family:
    header: str
    prelude: tuple[str, ...]
    base_terms: tuple[str, ...]
    templates: tuple[str, ...]


FAMILIES: dict[str, Family] = {
    "bin_packing": Family(
        header="def priority(item, bins):",
        prelude=("    residual = bins - item", "    score = -1.0 * residual"),
        base_terms=("    score -= 0.0001 * np.arange(bins.size)",),
        templates=(
            "    score -= {a} * ((residual > 0) & (residual < {t}))",
            "    score += {a} * (residual == 0)",
            "    score += {a} * np.exp(-residual / {t})",
            "    score -= {s} * (residual / bins)",
            "    score += {s} * np.sqrt(residual)",
        ),
    ),
    "tsp": Family(
        header="def heuristics(distance_matrix):",
        prelude=("    score = 1.0 * distance_matrix",),
        base_terms=(),
        templates=(
            "    score += {s} * distance_matrix ** 2",
            "    score -= {s} * distance_matrix.mean(axis=1, keepdims=True)",
            "    score += {s} * (distance_matrix > np.median(distance_matrix))",
            "    score *= 1.0 + {s} * (distance_matrix > distance_matrix.mean())",
        ),
    ),
    "flatpack": Family(
        header="def priority(current_grid, blocks, action_mask):",
        prelude=("    score = np.zeros(action_mask.shape)",),
        base_terms=(),
        templates=(
            "    score += {s} * blocks.reshape(len(blocks), -1).sum(axis=1)[:, None, None, None]",
            "    score -= {s} * np.arange(action_mask.shape[2])[None, None, :, None]",
            "    score -= {s} * np.arange(action_mask.shape[3])[None, None, None, :]",
            "    score += {s} * (np.arange(4) == 0)[None, :, None, None]",
        ),
    ),
}


def render(family: Family, terms: list[str]) -> str:
    body = [family.header, *family.prelude, *terms, "    return score"]
    return "import numpy as np\n\n\n" + "\n".join(body) + "\n"


def parse_terms(source: str, family: Family) -> Optional[list[str]]:
    """Term lines of a family program, or None when ``source`` is not one."""
    lines = source.strip("\n").split("\n")
    if family.header not in lines or not all(p in lines for p in family.prelude):
        return None
    return [line for line in lines if _TERM.match(line)]


def _fmt(x: float) -> str:
    return f"{x:.4f}" if abs(x) >= 1e-3 else f"{x:.2e}".replace("e-0", "e-")


class MockBackend:
    """Deterministic template mutator behind the generation backend interface."""

    def __init__(self, task_name: str, seed: int = 0, failure_rate: float = 0.0,
                 jitter_sigma: float = 0.3):
        if task_name not in FAMILIES:
            raise ValueError(f"no mock template family for task {task_name!r}")
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError("failure_rate must be in [0, 1]")
        self.task = load_task_descriptor(task_name)
        self.family = FAMILIES[task_name]
        self.seed = seed
        self.failure_rate = failure_rate
        self.jitter_sigma = jitter_sigma

    def _rng(self, prompt: RenderedPrompt, policy: Optional[str]) -> np.random.Generator:
        tag = zlib.crc32(f"{prompt.prompt_id}|{policy or ''}".encode())
        return np.random.default_rng([self.seed, tag])

    def best_program(self, prompt_text: str) -> Optional[str]:
        """Source of the last (highest-scoring) program in a rendered prompt."""
        name = self.task.required_function_name
        marks = [m.end() for m in re.finditer(r"^# score: .*\n", prompt_text, re.MULTILINE)]
        if not marks:
            return None
        end = prompt_text.rfind(self.task.task_prompt)
        chunk = prompt_text[marks[-1] : end if end > marks[-1] else None]
        return re.sub(rf"^def {re.escape(name)}_v\d+\(", f"def {name}(", chunk.strip("\n"), flags=re.MULTILINE) + "\n"

    def mutate(self, terms: list[str], rng: np.random.Generator) -> tuple[list[str], str]:
        terms = list(terms)
        op = rng.choice(["jitter", "add", "remove"], p=[0.45, 0.4, 0.15])
        if op == "remove" and terms:
            terms.pop(int(rng.integers(len(terms))))
            return terms, "Dropped a term that did not seem to help."
        if op == "add" or not any(_NUMBER.search(t) for t in terms):
            tpl = self.family.templates[int(rng.integers(len(self.family.templates)))]
            line = tpl.format(
                a=_fmt(float(rng.uniform(1.0, 30.0))),
                t=_fmt(float(rng.uniform(5.0, 45.0))),
                s=_fmt(float(rng.uniform(0.01, 2.0))),
            )
            terms.append(line)
            return terms, "Added a new scoring term to refine the ranking."
        k = int(rng.integers(len(terms)))
        while not _NUMBER.search(terms[k]):
            k = int(rng.integers(len(terms)))

        def jitter(m: re.Match) -> str:
            return _fmt(float(m.group(1)) * float(np.exp(rng.normal(0.0, self.jitter_sigma))))

        terms[k] = _NUMBER.sub(jitter, terms[k])
        return terms, "Tuned the constants of the higher-scoring function."

    def complete(self, prompt: RenderedPrompt, params: SamplingParams, policy: Optional[str] = None) -> list[str]:
        rng = self._rng(prompt, policy)
        parent = self.best_program(prompt.text) or ""
        terms = parse_terms(parent, self.family)
        if terms is None:
            terms = list(self.family.base_terms)
        n_fail = int(round(self.failure_rate * params.n))
        failed = set(rng.choice(params.n, size=n_fail, replace=False).tolist()) if n_fail else set()
        outputs = []
        for k in range(params.n):
            if k in failed:
                outputs.append("I could not come up with an improvement this time.")
                continue
            new_terms, note = self.mutate(terms, rng)
            outputs.append(wrap_in_fence(render(self.family, new_terms), f"Reasoning: {note}"))
        return outputs
