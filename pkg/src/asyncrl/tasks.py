"""Synthetic prompt distributions and a rule-based reward service.

Two token-level tasks stand in for verifier-backed math/code problems:

* ``copy``: the prompt carries a short digit payload and the correct answer
  repeats it verbatim.
* ``modular_sum``: the payload is two digits ``a, b`` and the correct answer
  is the single digit ``(a + b) % 10``.

Both tasks are exactly solvable by a small linear-softmax policy, and both
have a unique correct response (the target digits followed by the
end-of-sequence token), which keeps reward evaluation a pure exact-match
check.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

# Token layout. Digits occupy 0..9; ids 12..15 are reserved padding so the
# vocabulary can stay a round 16 symbols.
DIGIT_BASE = 0
SEP_TOKEN = 10
EOS_TOKEN = 11
MIN_VOCAB = 12

COPY = "copy"
MODULAR_SUM = "modular_sum"
TASK_KINDS = (COPY, MODULAR_SUM)


class TaskConfigError(ValueError):
    """Raised for invalid task parameters or unknown task kinds."""


@dataclass(frozen=True)
class TaskConfig:
    """Parameters of the synthetic task distribution.

    ``reward_latency`` is a simulated delay (seconds of event time) charged
    by the drivers before a finished response is scored; the scoring itself
    is instantaneous and pure.
    """

    vocab_size: int = 16
    min_payload: int = 1
    max_payload: int = 3
    max_prompt_len: int = 8
    reward_latency: float = 0.0

    def __post_init__(self):
        if self.vocab_size < MIN_VOCAB:
            raise TaskConfigError(
                f"vocab_size must be >= {MIN_VOCAB} (10 digits + separator + EOS), "
                f"got {self.vocab_size}"
            )
        if not (1 <= self.min_payload <= self.max_payload):
            raise TaskConfigError(
                f"payload bounds must satisfy 1 <= min <= max, got "
                f"[{self.min_payload}, {self.max_payload}]"
            )
        if self.max_prompt_len < self.max_payload + 1:
            raise TaskConfigError(
                "max_prompt_len must cover the payload plus the separator"
            )
        if self.reward_latency < 0:
            raise TaskConfigError("reward_latency must be >= 0")


@dataclass(frozen=True)
class Prompt:
    """One question: a digit payload terminated by the separator token.

    ``target`` is the hidden ground-truth answer (digits only, no EOS).
    """

    id: int
    tokens: tuple[int, ...]
    task_kind: str
    target: tuple[int, ...]

    @property
    def payload(self) -> tuple[int, ...]:
        return self.tokens[:-1]


@dataclass(frozen=True)
class RewardResult:
    trajectory_id: int
    reward: float
    correct: bool


def make_prompt(rng_seed: int, task_kind: str, config: TaskConfig = TaskConfig()) -> Prompt:
    """Build a prompt deterministically from ``rng_seed``.

    The same seed always yields the same prompt; distinct seeds give
    independent draws from the task distribution.
    """
    if task_kind == COPY:
        rng = np.random.default_rng(rng_seed)
        length = int(rng.integers(config.min_payload, config.max_payload + 1))
        payload = tuple(int(d) for d in rng.integers(0, 10, size=length))
        target = payload
    elif task_kind == MODULAR_SUM:
        rng = np.random.default_rng(rng_seed)
        a, b = (int(d) for d in rng.integers(0, 10, size=2))
        payload = (a, b)
        target = ((a + b) % 10,)
    else:
        raise TaskConfigError(f"unknown task kind: {task_kind!r}")
    return Prompt(
        id=rng_seed,
        tokens=payload + (SEP_TOKEN,),
        task_kind=task_kind,
        target=target,
    )


def evaluate_reward(prompt: Prompt, response_tokens, trajectory_id: int = -1) -> RewardResult:
    """Score a terminated response with the exact-match rule.

    The answer is the token run before the first EOS; it must equal the
    target exactly. Responses truncated at the length cap never emitted EOS
    and are scored incorrect rather than discarded. Reward is +5 on the
    final token if correct and -5 otherwise; no other token carries reward.
    """
    tokens = list(response_tokens)
    if EOS_TOKEN in tokens:
        answer = tuple(tokens[: tokens.index(EOS_TOKEN)])
        correct = answer == prompt.target
    else:
        correct = False
    return RewardResult(
        trajectory_id=trajectory_id,
        reward=5.0 if correct else -5.0,
        correct=correct,
    )


class RewardService:
    """Stateless scoring endpoint with a configurable simulated latency.

    Safe to call from any number of concurrent evaluations; the only
    mutable state is a lock-guarded counter.
    """

    def __init__(self, config: TaskConfig = TaskConfig()):
        self.config = config
        self.evaluated = 0
        self._lock = threading.Lock()

    @property
    def latency(self) -> float:
        return self.config.reward_latency

    def evaluate(self, prompt: Prompt, response_tokens, trajectory_id: int) -> RewardResult:
        result = evaluate_reward(prompt, response_tokens, trajectory_id)
        with self._lock:
            self.evaluated += 1
        return result


class PromptSource:
    """Deterministic stream of prompts, each repeated ``n_responses`` times.

    Prompt ``p`` of a run is derived from ``(base_seed, namespace, p)`` so
    that training and evaluation sets never collide.
    """

    def __init__(self, task_kind: str, config: TaskConfig, base_seed: int,
                 n_responses: int = 1, namespace: int = 0):
        if n_responses < 1:
            raise TaskConfigError("n_responses must be >= 1")
        self.task_kind = task_kind
        self.config = config
        self.base_seed = base_seed
        self.n_responses = n_responses
        self.namespace = namespace
        self._next_index = 0

    def prompt_seed(self, prompt_index: int) -> int:
        # Wide, collision-free packing of (seed, namespace, index).
        return ((self.base_seed << 34) | (self.namespace << 32)) + prompt_index

    def next_prompt(self) -> Prompt:
        prompt_index = self._next_index // self.n_responses
        self._next_index += 1
        return make_prompt(self.prompt_seed(prompt_index), self.task_kind, self.config)

    def advance(self, count: int) -> None:
        """Skip ahead, e.g. when resuming a run whose earlier requests were
        already consumed."""
        self._next_index += count


def evaluation_prompts(task_kind: str, config: TaskConfig, base_seed: int,
                       count: int) -> list[Prompt]:
    """Held-out prompt set, disjoint from any training stream of the seed."""
    source = PromptSource(task_kind, config, base_seed, n_responses=1, namespace=1)
    return [make_prompt(source.prompt_seed(p), task_kind, config) for p in range(count)]
