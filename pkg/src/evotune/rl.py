"""Preference-loss math, learning-rate schedules, and the trainer hand-off.

Actual fine-tuning is done by an external trainer. This module defines the
job it receives, ships a stub and two transports, and includes a small
categorical policy used to check the loss gradients numerically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

import numpy as np
import requests

logger = logging.getLogger(__name__)

KL_VARIANTS = ("forward", "reverse")
DELTA_CLIP = 30.0


# -- loss ----------------------------------------------------------------

def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def dpo_inner(delta_plus, delta_minus, beta: float, kl_variant: str = "forward"):
    """Argument of the sigmoid, with the log-ratios clipped to +-30."""
    if kl_variant not in KL_VARIANTS:
        raise ValueError(f"kl_variant must be one of {KL_VARIANTS}")
    dp = np.clip(np.asarray(delta_plus, dtype=float), -DELTA_CLIP, DELTA_CLIP)
    dm = np.clip(np.asarray(delta_minus, dtype=float), -DELTA_CLIP, DELTA_CLIP)
    if kl_variant == "reverse":
        return beta * (dp - dm)
    # e^{-dm} - e^{-dp}, written to stay accurate when dp ~ dm
    return beta * np.exp(-dm) * -np.expm1(dm - dp)


def dpo_loss(delta_plus, delta_minus, beta: float = 0.4, kl_variant: str = "forward"):
    """Return ``(loss, (dloss/ddelta_plus, dloss/ddelta_minus))``.

    Works on scalars or arrays. The gradient is zero where a log-ratio was
    clipped.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    dp = np.asarray(delta_plus, dtype=float)
    dm = np.asarray(delta_minus, dtype=float)
    if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dm))):
        raise ValueError("log-ratios must be finite")
    inner = dpo_inner(dp, dm, beta, kl_variant)
    loss = np.logaddexp(0.0, -inner)
    dl_dinner = -_sigmoid(-inner)
    in_p = np.abs(dp) <= DELTA_CLIP
    in_m = np.abs(dm) <= DELTA_CLIP
    cp = np.clip(dp, -DELTA_CLIP, DELTA_CLIP)
    cm = np.clip(dm, -DELTA_CLIP, DELTA_CLIP)
    if kl_variant == "reverse":
        gp, gm = beta * dl_dinner, -beta * dl_dinner
    else:
        gp, gm = beta * np.exp(-cp) * dl_dinner, -beta * np.exp(-cm) * dl_dinner
    gp = np.where(in_p, gp, 0.0)
    gm = np.where(in_m, gm, 0.0)
    if loss.ndim == 0:
        return float(loss), (float(gp), float(gm))
    return loss, (gp, gm)


# -- toy policy harness -----------------------------------------------------

class ToyCategoricalPolicy:
    """Sequences of ``length`` independent tokens over ``vocab`` symbols.

    ``theta`` holds one logit row per position; the sequence log-probability
    is the sum of per-position log-softmax entries.
    """

    def __init__(self, length: int, vocab: int, rng: np.random.Generator, scale: float = 1.0):
        self.length = length
        self.vocab = vocab
        self.ref_theta = rng.normal(0.0, scale, size=(length, vocab))

    @staticmethod
    def log_prob(theta: np.ndarray, tokens: Sequence[int]) -> float:
        logz = np.logaddexp.reduce(theta, axis=1)
        return float(np.sum(theta[np.arange(len(tokens)), tokens] - logz))

    def _grad_log_prob(self, theta: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
        p = np.exp(theta - np.logaddexp.reduce(theta, axis=1, keepdims=True))
        g = -p
        g[np.arange(len(tokens)), tokens] += 1.0
        return g

    def deltas(self, theta: np.ndarray, y_plus, y_minus) -> tuple[float, float]:
        dp = self.log_prob(theta, y_plus) - self.log_prob(self.ref_theta, y_plus)
        dm = self.log_prob(theta, y_minus) - self.log_prob(self.ref_theta, y_minus)
        return dp, dm

    def loss(self, theta, y_plus, y_minus, beta: float, kl_variant: str) -> float:
        dp, dm = self.deltas(theta, y_plus, y_minus)
        return dpo_loss(dp, dm, beta, kl_variant)[0]

    def grad(self, theta, y_plus, y_minus, beta: float, kl_variant: str) -> np.ndarray:
        dp, dm = self.deltas(theta, y_plus, y_minus)
        _, (gp, gm) = dpo_loss(dp, dm, beta, kl_variant)
        return gp * self._grad_log_prob(theta, y_plus) + gm * self._grad_log_prob(theta, y_minus)

    def numeric_grad(self, theta, y_plus, y_minus, beta: float, kl_variant: str, h: float = 1e-5) -> np.ndarray:
        g = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            up, down = theta.copy(), theta.copy()
            up[idx] += h
            down[idx] -= h
            g[idx] = (self.loss(up, y_plus, y_minus, beta, kl_variant)
                      - self.loss(down, y_plus, y_minus, beta, kl_variant)) / (2 * h)
        return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


# -- learning-rate schedules ----------------------------------------------

def lr_at(t: int, alpha_init: float) -> float:
    """Phase starting rate: ``alpha_init * sqrt(1000 / t)``."""
    if t <= 0:
        raise ValueError("timestep must be >= 1")
    return alpha_init * math.sqrt(1000.0 / t)


def phase_schedule(alpha_t: float, steps: int) -> list[float]:
    """Half-cosine decay from ``alpha_t`` towards 0 over ``steps`` optimizer steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return [alpha_t * 0.5 * (1.0 + math.cos(math.pi * s / steps)) for s in range(steps)]


# -- update protocol --------------------------------------------------------

@dataclass
class RLUpdateConfig:
    beta: float = 0.4
    kl_variant: str = "forward"
    epochs: int = 2
    alpha_init: float = 1e-5
    f_rl: int = 400
    method: str = "dpo"  # dpo | rest_em | none
    rest_em_percentile: float = 60.0
    rest_em_stages: int = 3
    backend_opaque: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.f_rl < 1:
            raise ValueError("f_rl must be >= 1")
        if self.kl_variant not in KL_VARIANTS:
            raise ValueError(f"kl_variant must be one of {KL_VARIANTS}")
        if self.method not in ("dpo", "rest_em", "none"):
            raise ValueError("method must be dpo, rest_em or none")
        if self.rest_em_stages < 1:
            raise ValueError("rest_em_stages must be >= 1")


@dataclass(frozen=True)
class PolicyHandle:
    id: str
    base_id: str

    @property
    def is_base(self) -> bool:
        return self.id == self.base_id

    @classmethod
    def base(cls, policy_id: str = "base") -> "PolicyHandle":
        return cls(policy_id, policy_id)


class TrainerError(Exception):
    pass


class TrainerBackend(Protocol):
    def train(self, job: dict) -> dict:
        ...


def optimizer_steps(cfg: RLUpdateConfig, dataset_size: int) -> int:
    steps = cfg.backend_opaque.get("optimizer_steps")
    if steps is not None:
        return int(steps)
    return max(1, cfg.epochs * dataset_size)


def make_job(mode: str, base_policy: str, dataset: Path | str, cfg: RLUpdateConfig,
             t: int, dataset_size: int) -> dict:
    return {
        "mode": mode,
        "base_policy": base_policy,
        "dataset": str(dataset),
        "beta": cfg.beta,
        "kl_variant": cfg.kl_variant,
        "epochs": cfg.epochs,
        "lr_schedule": phase_schedule(lr_at(t, cfg.alpha_init), optimizer_steps(cfg, dataset_size)),
        "opaque": dict(cfg.backend_opaque),
    }


def _handle_from(reply: Any) -> str:
    if not isinstance(reply, dict) or not isinstance(reply.get("policy_handle"), str) or not reply["policy_handle"]:
        raise TrainerError(f"trainer reply lacks a policy_handle: {reply!r}")
    return reply["policy_handle"]


class StubTrainer:
    """Echoes a synthetic handle and records every job it sees.

    The handle is a digest of the base policy, mode and dataset bytes, so
    resumed and uninterrupted runs see the same names.
    """

    def __init__(self, fail: bool = False):
        self.fail = fail
        self.jobs: list[dict] = []

    def train(self, job: dict) -> dict:
        self.jobs.append(job)
        if self.fail:
            raise TrainerError("stub trainer configured to fail")
        h = hashlib.sha256(f"{job['base_policy']}|{job['mode']}|".encode())
        data = Path(job["dataset"])
        if data.exists():
            h.update(data.read_bytes())
        return {"policy_handle": f"{job['base_policy']}+{job['mode']}-{h.hexdigest()[:10]}"}


class CommandTrainer:
    """Runs an external command; the job goes to stdin, the reply comes from stdout as JSON."""

    def __init__(self, command: Sequence[str], timeout: Optional[float] = None):
        self.command = list(command)
        self.timeout = timeout

    def train(self, job: dict) -> dict:
        try:
            proc = subprocess.run(self.command, input=json.dumps(job), capture_output=True,
                                  text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise TrainerError(f"trainer command failed to run: {exc}") from None
        if proc.returncode != 0:
            raise TrainerError(f"trainer exited with {proc.returncode}: {proc.stderr[-2000:]}")
        try:
            return json.loads(proc.stdout)
        except ValueError:
            raise TrainerError("trainer stdout is not JSON") from None


class HttpTrainer:
    def __init__(self, url: str, token: Optional[str] = None, timeout: float = 3600.0):
        self.url = url
        self.token = token
        self.timeout = timeout

    def train(self, job: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            resp = requests.post(self.url, json=job, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise TrainerError(f"trainer endpoint failed: {exc}") from None


def _check_artifact(handle: str, job: dict) -> None:
    # a trainer may name a local checkpoint directory; it must exist
    check = job["opaque"].get("require_artifact_dir")
    if check and not (Path(check) / handle).exists():
        raise TrainerError(f"missing checkpoint artifact for {handle}")


def run_rl_update(base: PolicyHandle, dataset_path: Path | str, cfg: RLUpdateConfig,
                  backend: TrainerBackend, t: int, dataset_size: int) -> Optional[PolicyHandle]:
    """Train a fresh policy from ``base`` on the preference file.

    Returns None (and trains nothing) when the dataset is empty. Backend
    problems surface as :class:`TrainerError`.
    """
    if dataset_size == 0:
        return None
    job = make_job("dpo", base.base_id, dataset_path, cfg, t, dataset_size)
    handle = _handle_from(backend.train(job))
    _check_artifact(handle, job)
    return PolicyHandle(handle, base.base_id)


def rest_em_update(base: PolicyHandle, stages: Sequence[tuple[float, Path | str, int]],
                   cfg: RLUpdateConfig, backend: TrainerBackend, t: int) -> Optional[PolicyHandle]:
    """Chain supervised passes over ``(threshold, dataset_path, size)`` stages.

    Stage 0 starts from the base policy, later stages from the previous
    stage's output.
    """
    if not stages:
        raise ValueError("empty ReST-EM schedule")
    if all(size == 0 for _, _, size in stages):
        return None
    current = base.base_id
    for threshold, path, size in stages:
        job = make_job("sft", current, path, cfg, t, max(size, 1))
        job["threshold"] = threshold
        current = _handle_from(backend.train(job))
        _check_artifact(current, job)
    return PolicyHandle(current, base.base_id)

