"""Discrete-event model of generation/training wall time.

A single event loop drives the real rollout-controller protocol under four
schedules:

* ``sync``: strict alternation; training starts only after the whole batch
  finished generating, and nothing generates while training runs.
* ``one_step_overlap``: batch-granular pipelining; batch ``j+1`` is
  generated (entirely by one policy version) while batch ``j`` trains.
* ``async_noninterruptible``: streaming admission under the staleness
  gate; weight updates wait for each worker's in-flight sequences to
  drain before loading.
* ``async_interruptible``: streaming admission; weight updates pause
  in-flight sequences at a token boundary, charge a prefix-recompute cost,
  and resume under the new version.

The engine is deterministic and single-threaded: it models concurrency, it
does not use it. Simulated time is decoupled from wall time. Workers and
the trainer are pluggable, so the same loop runs either the synthetic
length-only model (`simulate`) or real policy sampling and PPO updates
(the experiment harness).

A worker counts as busy while at least one of its decode slots holds an
unfinished sequence (weight-sync or recompute pauses with sequences in
flight are busy time; an empty worker paying a weight sync is idle).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .controller import ConfigurationError, RolloutController
from .tasks import RewardResult

SCHEDULE_MODES = ("sync", "one_step_overlap", "async_noninterruptible",
                  "async_interruptible")


@dataclass(frozen=True)
class CostModel:
    """Simulated latencies; all in seconds of event time."""

    gen_seconds_per_token: float = 1.0
    train_seconds_per_token: float = 0.25
    weight_sync_seconds: float = 0.0
    recompute_seconds_per_token: float = 0.0

    def __post_init__(self):
        for name in ("gen_seconds_per_token", "train_seconds_per_token",
                     "weight_sync_seconds", "recompute_seconds_per_token"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LengthDistribution:
    """Response-length model: fixed, uniform, or truncated Pareto.

    The Pareto option reproduces the long right tail of reasoning-model
    generation lengths that makes batch-synchronous systems wait.
    """

    kind: str = "uniform"
    fixed: int = 32
    low: int = 8
    high: int = 64
    alpha: float = 1.2
    scale: float = 8.0
    cap: int = 512

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "pareto"):
            raise ConfigurationError(f"unknown length distribution {self.kind!r}")
        if self.kind == "fixed" and self.fixed < 1:
            raise ConfigurationError("fixed length must be >= 1")
        if self.kind == "uniform" and not (1 <= self.low <= self.high):
            raise ConfigurationError("uniform bounds must satisfy 1 <= low <= high")
        if self.kind == "pareto" and (self.alpha <= 0 or self.scale <= 0 or self.cap < 1):
            raise ConfigurationError("pareto needs alpha > 0, scale > 0, cap >= 1")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.fixed
        if self.kind == "uniform":
            return int(rng.integers(self.low, self.high + 1))
        draw = self.scale * (1.0 + rng.pareto(self.alpha))
        return int(min(max(draw, 1.0), self.cap))


@dataclass(frozen=True)
class SimConfig:
    schedule_mode: str = "async_interruptible"
    n_workers: int = 4
    worker_slots: int = 1
    batch_size: int = 16
    eta: int | None = 1
    train_steps: int = 20
    lengths: LengthDistribution = field(default_factory=LengthDistribution)
    seed: int = 0
    reward_latency: float = 0.0

    def __post_init__(self):
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ConfigurationError(f"unknown schedule mode {self.schedule_mode!r}")
        if self.n_workers < 1 or self.worker_slots < 1:
            raise ConfigurationError("need at least one worker and one slot")
        if self.train_steps < 1:
            raise ConfigurationError("train_steps must be >= 1")


@dataclass
class TimelineReport:
    schedule_mode: str
    total_time: float
    worker_busy: list[float]
    worker_idle: list[float]
    trainer_busy_fraction: float
    effective_throughput: float
    tokens_generated: int
    tokens_trained: int
    trajectories_completed: int
    train_steps: int
    staleness_counts: dict[int, int]
    interruptions: int

    def to_dict(self) -> dict:
        return {
            "schedule_mode": self.schedule_mode,
            "total_time": self.total_time,
            "worker_busy": self.worker_busy,
            "worker_idle": self.worker_idle,
            "trainer_busy_fraction": self.trainer_busy_fraction,
            "effective_throughput": self.effective_throughput,
            "tokens_generated": self.tokens_generated,
            "tokens_trained": self.tokens_trained,
            "trajectories_completed": self.trajectories_completed,
            "train_steps": self.train_steps,
            "staleness_counts": {str(k): v for k, v in
                                 sorted(self.staleness_counts.items())},
            "interruptions": self.interruptions,
        }


# -- synthetic stand-ins for the policy-backed components -------------------


@dataclass(frozen=True)
class VersionStamp:
    """Weight publication carrying only its version number."""

    version: int


@dataclass
class SimTrajectory:
    trajectory_id: int
    start_version: int
    n_tokens: int
    prompt: object = None
    tokens: tuple = ()
    reward: object = None
    consumed: bool = False

    def mark_consumed(self) -> None:
        if self.consumed:
            raise ConfigurationError(
                f"trajectory {self.trajectory_id} replayed twice")
        self.consumed = True


class ConstantRewardService:
    """Scores everything correct; timing models don't care about accuracy."""

    def __init__(self, latency: float = 0.0):
        self.latency = latency

    def evaluate(self, prompt, tokens, trajectory_id) -> RewardResult:
        return RewardResult(trajectory_id=trajectory_id, reward=5.0, correct=True)


class SyntheticWorker:
    """Length-only stand-in for a rollout worker.

    Each admitted trajectory's length is keyed by ``(seed, trajectory_id)``
    so the drawn workload is identical across schedule modes and staleness
    budgets.
    """

    def __init__(self, lengths: LengthDistribution, seed: int, version: int = 0):
        self.lengths = lengths
        self.seed = seed
        self.current_version = version
        self._seqs: dict[int, list] = {}
        self._next_handle = 0

    def start(self, trajectory_id: int) -> int:
        length = self.lengths.sample(
            np.random.default_rng([self.seed, trajectory_id]))
        handle = self._next_handle
        self._next_handle += 1
        # [trajectory_id, start_version, produced, total]
        self._seqs[handle] = [trajectory_id, self.current_version, 0, length]
        return handle

    def step(self, handle: int) -> bool:
        seq = self._seqs[handle]
        seq[2] += 1
        return seq[2] >= seq[3]

    def finish(self, handle: int) -> SimTrajectory:
        traj_id, start_version, produced, total = self._seqs.pop(handle)
        if produced < total:
            raise ConfigurationError("finish() on an unfinished sequence")
        return SimTrajectory(trajectory_id=traj_id, start_version=start_version,
                             n_tokens=total)

    def update_weights(self, stamp) -> "SyntheticAck":
        if stamp.version != self.current_version + 1:
            raise ConfigurationError(
                f"expected version {self.current_version + 1}, got {stamp.version}")
        self.current_version = stamp.version
        inflight = [s for s in self._seqs.values() if s[2] < s[3]]
        return SyntheticAck(
            version=stamp.version,
            sequences_switched=len(inflight),
            recompute_tokens=sum(s[2] for s in inflight),
        )


@dataclass
class SyntheticAck:
    version: int
    sequences_switched: int
    recompute_tokens: int


# -- the event engine --------------------------------------------------------


class _WorkerState:
    __slots__ = ("model", "slots", "available_at", "draining", "pending",
                 "epoch", "n_active", "last_change", "busy_time")

    def __init__(self, model, n_slots: int):
        self.model = model
        self.slots: list = [None] * n_slots
        self.available_at = 0.0
        self.draining = False
        self.pending: list = []
        self.epoch = 0
        self.n_active = 0
        self.last_change = 0.0
        self.busy_time = 0.0


class EventEngine:
    """Replays the generate/reward/train/publish cycle on an event clock.

    ``workers`` follow the rollout-worker surface (start/step/finish/
    update_weights); ``train_fn(batch, step_index, now)`` must return
    ``(publishable_params, trained_token_count, stats_or_None)`` with the
    publication tagged one version above the controller's current one.
    ``on_step_record`` (optional) receives a dict per completed training
    step.
    """

    def __init__(self, *, controller: RolloutController, workers, worker_slots: int,
                 train_fn, cost: CostModel, schedule_mode: str, train_steps: int,
                 reward_latency: float = 0.0, on_step_record=None, trace: bool = False):
        if schedule_mode not in SCHEDULE_MODES:
            raise ConfigurationError(f"unknown schedule mode {schedule_mode!r}")
        self.controller = controller
        self.cost = cost
        self.schedule_mode = schedule_mode
        self.train_steps = train_steps
        self.reward_latency = reward_latency
        self.train_fn = train_fn
        self.on_step_record = on_step_record
        self.workers = [_WorkerState(w, worker_slots) for w in workers]
        self._heap: list = []
        self._event_seq = 0
        self._now = 0.0
        self._stopping = False
        self._admission_waiters: list[tuple[int, int]] = []
        self._steps_started = 0
        self._steps_done = 0
        self._trainer_busy = False
        self._trainer_busy_time = 0.0
        self._pending_publication = None  # one_step_overlap stash
        self._budget = None  # one_step_overlap admission budget
        if schedule_mode == "one_step_overlap":
            self._budget = controller.state.batch_size
        self.tokens_generated = 0
        self.tokens_trained = 0
        self.trajectories_completed = 0
        self.interruptions = 0
        self.end_time = 0.0
        self.spans: list[dict] | None = [] if trace else None
        self._seq_started_at: dict[tuple[int, int], float] = {}

    # -- event plumbing ----------------------------------------------------

    def _push(self, time: float, fn, *args) -> None:
        heapq.heappush(self._heap, (time, self._event_seq, fn, args))
        self._event_seq += 1

    def run(self) -> None:
        for w in range(len(self.workers)):
            for slot in range(len(self.workers[w].slots)):
                self._push(0.0, self._try_fill, w, slot)
        self._push(0.0, self._maybe_train)
        while self._heap and not self._stopping:
            time, _, fn, args = heapq.heappop(self._heap)
            self._now = time
            fn(*args)
        if not self._stopping:
            raise ConfigurationError(
                f"generation starved after {self._steps_done}/{self.train_steps} "
                "training steps (no events left)")
        for st in self.workers:
            self._occupancy_flush(st, self.end_time)
        if self._trainer_busy:
            raise ConfigurationError("trainer busy past the final step")

    def _occupancy_flush(self, st: _WorkerState, t: float) -> None:
        if st.n_active > 0:
            st.busy_time += t - st.last_change
        st.last_change = t

    def _occupancy(self, st: _WorkerState, delta: int, t: float) -> None:
        self._occupancy_flush(st, t)
        st.n_active += delta

    # -- generation --------------------------------------------------------

    def _try_fill(self, w: int, slot: int) -> None:
        st = self.workers[w]
        if self._stopping or st.slots[slot] is not None or st.draining:
            return
        t = self._now
        if t < st.available_at:
            self._push(st.available_at, self._try_fill, w, slot)
            return
        if self._budget is not None and self._budget <= 0:
            self._admission_waiters.append((w, slot))
            return
        request = self.controller.try_admit()
        if request is None:
            self._admission_waiters.append((w, slot))
            return
        if self._budget is not None:
            self._budget -= 1
        handle = st.model.start(request)
        st.slots[slot] = handle
        self._occupancy(st, +1, t)
        if self.spans is not None:
            self._seq_started_at[(w, handle)] = t
        self._push(t + self.cost.gen_seconds_per_token, self._token,
                   w, slot, handle, st.epoch)

    def _token(self, w: int, slot: int, handle: int, epoch: int) -> None:
        st = self.workers[w]
        if self._stopping or epoch != st.epoch or st.slots[slot] != handle:
            return
        t = self._now
        done = st.model.step(handle)
        self.tokens_generated += 1
        if not done:
            self._push(t + self.cost.gen_seconds_per_token, self._token,
                       w, slot, handle, st.epoch)
            return
        traj = st.model.finish(handle)
        st.slots[slot] = None
        self._occupancy(st, -1, t)
        self.trajectories_completed += 1
        if self.spans is not None:
            self.spans.append({
                "entity": f"worker{w}", "kind": "sequence",
                "start": self._seq_started_at.pop((w, handle)), "end": t,
                "detail": traj.trajectory_id,
            })
        if st.draining and st.n_active == 0:
            self._apply_pending(w)
        else:
            self._push(t, self._try_fill, w, slot)
        self._push(t + self.reward_latency, self._reward, traj)

    def _reward(self, traj) -> None:
        self.controller.on_response(traj)
        self._maybe_train()

    # -- training ----------------------------------------------------------

    def _maybe_train(self) -> None:
        if (self._stopping or self._trainer_busy
                or self._steps_started >= self.train_steps
                or not self.controller.batch_ready()):
            return
        t = self._now
        batch = self.controller.form_batch()
        staleness = self.controller.batch_staleness(batch)
        step_index = self._steps_started
        self._steps_started += 1
        new_params, batch_tokens, stats = self.train_fn(batch, step_index, t)
        if self.tokens_trained + batch_tokens > self.tokens_generated:
            raise ConfigurationError("conservation violated: training would "
                                     "consume tokens never generated")
        self.tokens_trained += batch_tokens
        self._trainer_busy = True
        duration = batch_tokens * self.cost.train_seconds_per_token
        if self.schedule_mode == "one_step_overlap":
            self._budget = self.controller.state.batch_size
            self._apply_overlap_publication()
            self._wake_admission_waiters()
        self._push(t + duration, self._train_done,
                   step_index, new_params, batch_tokens, duration, staleness, stats)

    def _train_done(self, step_index: int, new_params, batch_tokens: int,
                    duration: float, staleness: dict, stats) -> None:
        t = self._now
        self._trainer_busy = False
        self._trainer_busy_time += duration
        self._steps_done += 1
        if self.spans is not None:
            self.spans.append({"entity": "trainer", "kind": "train",
                               "start": t - duration, "end": t,
                               "detail": step_index})
        self.controller.on_weights_published(new_params)
        if self.schedule_mode == "one_step_overlap":
            self._pending_publication = new_params
        elif self.schedule_mode == "async_interruptible":
            self._publish_interruptible(new_params)
        else:  # sync, async_noninterruptible
            self._publish_draining(new_params)
        if self.on_step_record is not None:
            self.on_step_record({
                "step": step_index,
                "time": t,
                "batch_tokens": batch_tokens,
                "staleness": staleness,
                "stats": stats,
            })
        if self._steps_done >= self.train_steps:
            self._stopping = True
            self.end_time = t
            return
        self._wake_admission_waiters()
        self._maybe_train()

    # -- weight publication semantics ---------------------------------------

    def _publish_interruptible(self, new_params) -> None:
        t = self._now
        for w, st in enumerate(self.workers):
            ack = st.model.update_weights(new_params)
            self.interruptions += ack.sequences_switched
            pause = (self.cost.weight_sync_seconds
                     + ack.recompute_tokens * self.cost.recompute_seconds_per_token)
            if pause <= 0:
                continue
            st.available_at = t + pause
            st.epoch += 1
            if self.spans is not None and ack.sequences_switched:
                self.spans.append({"entity": f"worker{w}", "kind": "pause",
                                   "start": t, "end": t + pause,
                                   "detail": new_params.version})
            for slot, handle in enumerate(st.slots):
                if handle is not None:
                    self._push(st.available_at + self.cost.gen_seconds_per_token,
                               self._token, w, slot, handle, st.epoch)

    def _publish_draining(self, new_params) -> None:
        for w, st in enumerate(self.workers):
            st.pending.append(new_params)
            if st.n_active == 0:
                self._apply_pending(w)
            else:
                st.draining = True

    def _apply_pending(self, w: int) -> None:
        st = self.workers[w]
        t = self._now
        pause = self.cost.weight_sync_seconds * len(st.pending)
        for params in st.pending:
            st.model.update_weights(params)
        st.pending.clear()
        st.draining = False
        st.available_at = max(st.available_at, t + pause)
        for slot in range(len(st.slots)):
            if st.slots[slot] is None:
                self._push(st.available_at, self._try_fill, w, slot)

    def _apply_overlap_publication(self) -> None:
        # Batch-granular pipelining loads weights only between generation
        # batches; workers are idle at this point by construction.
        if self._pending_publication is None:
            return
        params = self._pending_publication
        self._pending_publication = None
        t = self._now
        for w, st in enumerate(self.workers):
            if st.n_active != 0:
                raise ConfigurationError(
                    "overlap schedule published weights with sequences in flight")
            st.model.update_weights(params)
            st.available_at = max(st.available_at, t + self.cost.weight_sync_seconds)

    def _wake_admission_waiters(self) -> None:
        waiters, self._admission_waiters = self._admission_waiters, []
        for w, slot in waiters:
            self._push(max(self._now, self.workers[w].available_at),
                       self._try_fill, w, slot)

    # -- reporting -----------------------------------------------------------

    def report(self) -> TimelineReport:
        total = self.end_time
        busy = [st.busy_time / total if total > 0 else 0.0 for st in self.workers]
        return TimelineReport(
            schedule_mode=self.schedule_mode,
            total_time=total,
            worker_busy=busy,
            worker_idle=[1.0 - b for b in busy],
            trainer_busy_fraction=self._trainer_busy_time / total if total > 0 else 0.0,
            effective_throughput=self.tokens_trained / total if total > 0 else 0.0,
            tokens_generated=self.tokens_generated,
            tokens_trained=self.tokens_trained,
            trajectories_completed=self.trajectories_completed,
            train_steps=self._steps_done,
            staleness_counts=dict(self.controller.metrics.staleness_counts),
            interruptions=self.interruptions,
        )


def effective_eta(schedule_mode: str, eta: int | None) -> int | None:
    """Staleness budget actually enforced by each schedule."""
    if schedule_mode == "sync":
        return 0
    if schedule_mode == "one_step_overlap":
        return 1
    return eta


def simulate(config: SimConfig, cost: CostModel) -> TimelineReport:
    """Run the length-only workload model and report timing and staleness."""
    workers = [SyntheticWorker(config.lengths, seed=config.seed)
               for _ in range(config.n_workers)]
    controller = RolloutController(
        batch_size=config.batch_size,
        eta=effective_eta(config.schedule_mode, config.eta),
        reward_service=ConstantRewardService(config.reward_latency),
        request_factory=lambda trajectory_id: trajectory_id,
    )

    def train_fn(batch, step_index, now):
        del step_index, now
        tokens = sum(t.n_tokens for t in batch)
        return VersionStamp(controller.state.version + 1), tokens, None

    engine = EventEngine(
        controller=controller,
        workers=workers,
        worker_slots=config.worker_slots,
        train_fn=train_fn,
        cost=cost,
        schedule_mode=config.schedule_mode,
        train_steps=config.train_steps,
        reward_latency=config.reward_latency,
    )
    engine.run()
    return engine.report()
