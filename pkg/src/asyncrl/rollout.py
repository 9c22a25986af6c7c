"""Interruptible streaming generation.

A rollout worker serves two kinds of calls: token-by-token ``generate``
execution and ``update_weights``. Weight updates take effect at a token
boundary: every in-flight sequence keeps the tokens it already produced
(with the log-probability and policy version recorded at emission time)
and continues under the new snapshot. Token emission and weight switching
are mutually exclusive, so a token is never produced partly under two
versions.

Because context features are a pure function of the token prefix, the
"re-encode the prefix under new weights" step of a real serving engine is
modeled as an explicit cache rebuild whose size (tokens re-processed) is
reported to the caller so that timing models can charge for it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import policy as P
from .tasks import EOS_TOKEN, Prompt


class WeightVersionError(RuntimeError):
    """Out-of-order weight update; the worker state is unchanged."""


@dataclass(frozen=True)
class GenerateRequest:
    prompt: Prompt
    max_new_tokens: int
    temperature: float = 1.0
    trajectory_id: int = -1

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Trajectory:
    """One generated response plus its per-token provenance record."""

    trajectory_id: int
    prompt: Prompt
    tokens: list[int] = field(default_factory=list)
    behavior_logprobs: list[float] = field(default_factory=list)
    versions: list[int] = field(default_factory=list)
    start_version: int = 0
    reward: object = None
    consumed: bool = False

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def mark_consumed(self) -> None:
        if self.consumed:
            raise RuntimeError(
                f"trajectory {self.trajectory_id} replayed twice (single-use buffer)"
            )
        self.consumed = True


def stitched_behavior_logprob(traj: Trajectory) -> float:
    """Log-likelihood of the whole sequence under the stitched behavior policy.

    Each token contributes the log-probability recorded under the snapshot
    that emitted it, so this equals the sum of per-version segment
    likelihoods.
    """
    return float(sum(traj.behavior_logprobs))


@dataclass
class UpdateAck:
    version: int
    sequences_switched: int
    recompute_tokens: int


class _LiveSequence:
    __slots__ = ("request", "trajectory", "rng", "feat_cache", "done")

    def __init__(self, request, trajectory, rng):
        self.request = request
        self.trajectory = trajectory
        self.rng = rng
        self.feat_cache = None
        self.done = False


class RolloutWorker:
    """Executes generate requests one token at a time over shared weights.

    ``seed`` fixes the sampling streams: each trajectory draws from an rng
    keyed by ``(seed, trajectory_id)``, so its tokens depend only on its id
    and the weights in effect at each step, not on how executions
    interleave.
    """

    def __init__(self, params: P.VersionedParams, featurizer: P.ContextFeaturizer,
                 seed: int = 0, worker_id: int = 0, trace_sink=None):
        self.worker_id = worker_id
        self.featurizer = featurizer
        self.seed = seed
        self.trace_sink = trace_sink
        self._params = params
        self._active: dict[int, _LiveSequence] = {}
        self._next_handle = 0
        self._lock = threading.Lock()

    @property
    def current_version(self) -> int:
        return self._params.version

    @property
    def n_inflight(self) -> int:
        return len(self._active)

    def start(self, request: GenerateRequest) -> int:
        with self._lock:
            traj = Trajectory(
                trajectory_id=request.trajectory_id,
                prompt=request.prompt,
                start_version=self._params.version,
            )
            seq = _LiveSequence(
                request, traj,
                np.random.default_rng([self.seed, request.trajectory_id & 0xFFFFFFFF]),
            )
            seq.feat_cache = self.featurizer.features(request.prompt, traj.tokens)
            handle = self._next_handle
            self._next_handle += 1
            self._active[handle] = seq
            return handle

    def step(self, handle: int) -> bool:
        """Emit one token; returns True when the sequence finished.

        The whole emission (sample, record, cache advance) happens under the
        worker lock, making it atomic with respect to ``update_weights``.
        """
        with self._lock:
            seq = self._active[handle]
            if seq.done:
                raise RuntimeError("step() on a finished sequence")
            params = self._params
            features = seq.feat_cache
            token = P.sample(params, features, seq.rng, seq.request.temperature)
            logprob = P.log_prob(params, features, token)
            traj = seq.trajectory
            traj.tokens.append(token)
            traj.behavior_logprobs.append(logprob)
            traj.versions.append(params.version)
            if self.trace_sink is not None:
                self.trace_sink({
                    "trajectory_id": traj.trajectory_id,
                    "step": len(traj.tokens) - 1,
                    "version": params.version,
                    "logprob": logprob,
                })
            if token == EOS_TOKEN or len(traj.tokens) >= seq.request.max_new_tokens:
                seq.done = True
            else:
                seq.feat_cache = self.featurizer.features(seq.request.prompt, traj.tokens)
            return seq.done

    def finish(self, handle: int) -> Trajectory:
        with self._lock:
            seq = self._active.pop(handle)
            if not seq.done:
                raise RuntimeError("finish() on an unfinished sequence")
            return seq.trajectory

    def update_weights(self, new_params: P.VersionedParams) -> UpdateAck:
        """Switch every in-flight sequence to ``new_params`` at its current
        token boundary and rebuild its context cache from the token prefix.

        Returns only after all in-flight sequences have switched. The number
        of prefix tokens re-processed is reported so simulated drivers can
        charge latency for it.
        """
        with self._lock:
            if new_params.version != self._params.version + 1:
                raise WeightVersionError(
                    f"expected version {self._params.version + 1}, "
                    f"got {new_params.version}"
                )
            self._params = new_params
            recompute = 0
            switched = 0
            for seq in self._active.values():
                if seq.done:
                    continue
                traj = seq.trajectory
                recompute += len(seq.request.prompt.tokens) + len(traj.tokens)
                seq.feat_cache = self.featurizer.features(seq.request.prompt, traj.tokens)
                switched += 1
            return UpdateAck(
                version=new_params.version,
                sequences_switched=switched,
                recompute_tokens=recompute,
            )

    def generate(self, request: GenerateRequest) -> Trajectory:
        """Run a request to completion (no external interruption between
        steps unless another thread calls ``update_weights``)."""
        handle = self.start(request)
        while not self.step(handle):
            pass
        return self.finish(handle)
