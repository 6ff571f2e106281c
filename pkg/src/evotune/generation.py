"""Generator backends and extraction of candidate programs from raw outputs."""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Optional, Protocol

import requests

from evotune.prompting import RenderedPrompt

logger = logging.getLogger(__name__)

INFERENCE_URL_ENV = "EVOTUNE_INFERENCE_URL"
INFERENCE_TOKEN_ENV = "EVOTUNE_INFERENCE_TOKEN"


class GenerationError(Exception):
    pass


class TransportError(GenerationError):
    """The backend could not be reached after all retries."""


class MalformedResponseError(GenerationError):
    pass


class IncompleteBatchError(GenerationError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"backend returned {got} outputs, expected {expected}")
        self.expected = expected
        self.got = got


@dataclass
class SamplingParams:
    temperature: float = 0.9
    top_k: int = 100
    top_p: float = 0.95
    max_new_tokens: int = 2048
    n: int = 8

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class RawOutput:
    prompt_id: str
    output_index: int
    text: str


@dataclass(frozen=True)
class ExtractedProgram:
    source: str
    extraction_method: str  # fenced_block | definition_scan


@dataclass(frozen=True)
class ExtractionFailure:
    reason: str  # no_code | wrong_name | multiple_conflicting_definitions
    detail: str = ""


class Backend(Protocol):
    def complete(self, prompt: RenderedPrompt, params: SamplingParams, policy: Optional[str]) -> list[str]:
        ...


def generate(backend: Backend, prompt: RenderedPrompt, params: SamplingParams,
             policy: Optional[str] = None) -> list[RawOutput]:
    """Ask ``backend`` for ``params.n`` outputs and tag them with the prompt id."""
    texts = backend.complete(prompt, params, policy)
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise MalformedResponseError("backend must return a list of strings")
    if len(texts) != params.n:
        raise IncompleteBatchError(params.n, len(texts))
    return [RawOutput(prompt.prompt_id, k, t) for k, t in enumerate(texts)]


class HttpBackend:
    """Client for a text-generation server speaking the JSON contract below.

    Request: ``POST {url}`` with ``{prompt, n, temperature, top_k, top_p,
    max_new_tokens, policy}``. Response: ``{"outputs": [text, ...]}``.
    """

    def __init__(self, url: str, token: Optional[str] = None, timeout: float = 300.0,
                 auth_header: str = "Authorization", retries: int = 3, backoff: float = 1.0,
                 session: Optional[requests.Session] = None):
        self.url = url
        self.token = token
        self.timeout = timeout
        self.auth_header = auth_header
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        url = os.environ.get(INFERENCE_URL_ENV)
        if not url:
            raise GenerationError(f"{INFERENCE_URL_ENV} is not set")
        return cls(url, token=os.environ.get(INFERENCE_TOKEN_ENV), **kwargs)

    def _headers(self) -> dict:
        if not self.token:
            return {}
        value = self.token if self.auth_header.lower() != "authorization" else f"Bearer {self.token}"
        return {self.auth_header: value}

    def complete(self, prompt: RenderedPrompt, params: SamplingParams, policy: Optional[str]) -> list[str]:
        body = {
            "prompt": prompt.text,
            "n": params.n,
            "temperature": params.temperature,
            "top_k": params.top_k,
            "top_p": params.top_p,
            "max_new_tokens": params.max_new_tokens,
        }
        if policy is not None:
            body["policy"] = policy
        delay = self.backoff
        last_exc: Exception | None = None
        for attempt in range(1, self.retries + 1):
            try:
                resp = self.session.post(self.url, json=body, headers=self._headers(), timeout=self.timeout)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise requests.HTTPError(f"server returned {resp.status_code}")
                resp.raise_for_status()
                return _parse_outputs(resp)
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
                last_exc = exc
                logger.warning("generation attempt %d/%d failed: %s", attempt, self.retries, exc)
                if attempt < self.retries:
                    time.sleep(delay)
                    delay *= 2
        raise TransportError(f"generation failed after {self.retries} attempts: {last_exc}")


def _parse_outputs(resp) -> list[str]:
    try:
        payload = resp.json()
    except ValueError:
        raise MalformedResponseError("response is not JSON") from None
    outputs = payload.get("outputs") if isinstance(payload, dict) else None
    if not isinstance(outputs, list) or not all(isinstance(o, str) for o in outputs):
        raise MalformedResponseError("response lacks an 'outputs' list of strings")
    return outputs


# -- extraction --------------------------------------------------------

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)(?:```|\Z)", re.DOTALL)


def fenced_blocks(text: str) -> list[str]:
    return [m.group(2) for m in _FENCE.finditer(text)]


def _def_pattern(name: str) -> re.Pattern:
    return re.compile(rf"^def\s+{re.escape(name)}\s*\(", re.MULTILINE)


_ANY_DEF = re.compile(r"^\s*def\s+\w+\s*\(", re.MULTILINE)


def _normalize(source: str) -> str:
    lines = source.split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _function_bodies(source: str, name: str) -> list[str]:
    """Text of each top-level definition of ``name`` (header through its last indented line)."""
    lines = source.split("\n")
    pat = _def_pattern(name)
    bodies = []
    for i, line in enumerate(lines):
        if pat.match(line):
            j = i + 1
            while j < len(lines) and (not lines[j].strip() or lines[j][:1] in (" ", "\t")):
                j += 1
            bodies.append("\n".join(lines[i:j]).rstrip())
    return bodies


def _check_single(source: str, name: str) -> Optional[ExtractionFailure]:
    bodies = _function_bodies(source, name)
    if len(set(bodies)) > 1:
        return ExtractionFailure("multiple_conflicting_definitions", f"{len(bodies)} definitions of {name}")
    return None


def extract_program(raw: RawOutput | str, required_name: str) -> ExtractedProgram | ExtractionFailure:
    """Pull the candidate program out of a generated output.

    The first fenced block with a top-level ``def required_name(`` wins.
    Otherwise the first such definition in the plain text is taken, together
    with any import lines directly above it, up to the end of its indented
    body. Failures are returned, never raised.
    """
    text = raw.text if isinstance(raw, RawOutput) else raw
    pat = _def_pattern(required_name)
    blocks = fenced_blocks(text)
    for block in blocks:
        if pat.search(block):
            source = _normalize(block)
            failure = _check_single(source, required_name)
            return failure or ExtractedProgram(source, "fenced_block")

    lines = text.split("\n")
    for i, line in enumerate(lines):
        if pat.match(line):
            start = i
            while start > 0 and re.match(r"^(import|from)\s+\w", lines[start - 1]):
                start -= 1
            end = i + 1
            while end < len(lines) and (not lines[end].strip() or lines[end][:1] in (" ", "\t")):
                end += 1
            source = _normalize("\n".join(lines[start:end]))
            failure = _check_single(source, required_name)
            return failure or ExtractedProgram(source, "definition_scan")

    if blocks or _ANY_DEF.search(text):
        return ExtractionFailure("wrong_name", f"no definition of {required_name}()")
    return ExtractionFailure("no_code", "output contains no code")


def wrap_in_fence(source: str, rationale: str = "") -> str:
    head = f"{rationale.strip()}\n\n" if rationale.strip() else ""
    return f"{head}```python\n{source.rstrip(chr(10))}\n```\n"
