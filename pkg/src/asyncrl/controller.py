"""Rollout controller: admission gate, reward routing, batching, publication.

The controller rate-limits generation so that every training batch stays
within the configured staleness budget. With batch size ``B``, current
published version ``i`` and budget ``eta``, a new request is admitted only
if the incremented request count ``N_r`` keeps

    floor((N_r - 1) / B) <= i + eta.

Admitted counts include in-flight generations, which is the only reading
that prevents over-admission bursts. ``eta=None`` disables the gate.
Setting ``eta=0`` recovers synchronous alternation exactly: nothing can be
admitted for step ``i+1`` until the step-``i`` batch has been trained and
published.

Completed responses are rewarded, buffered, and consumed oldest-first
(start version, then arrival); each trajectory trains exactly once.
"""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field


class ConfigurationError(RuntimeError):
    """Protocol violation that invalidates the run (e.g. version gap)."""


@dataclass
class AdmissionState:
    """Counters driving the staleness gate."""

    batch_size: int
    eta: int | None
    n_requested: int = 0
    version: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.eta is not None and self.eta < 0:
            raise ConfigurationError("eta must be >= 0 or None (unbounded)")

    def admissible(self) -> bool:
        """Would admitting one more request keep the gate satisfied?"""
        if self.eta is None:
            return True
        # floor(((N_r + 1) - 1) / B) == floor(N_r / B) with the current N_r.
        return self.n_requested // self.batch_size <= self.version + self.eta

    def gate_holds(self) -> bool:
        """The invariant over already-admitted requests."""
        if self.eta is None or self.n_requested == 0:
            return True
        return (self.n_requested - 1) // self.batch_size <= self.version + self.eta


class ReplayBuffer:
    """Completed, rewarded, unconsumed trajectories in oldest-first order.

    Ordering key is (start_version, arrival index); duplicate trajectory ids
    are rejected. Trajectories leave the buffer exactly once.
    """

    def __init__(self):
        self._heap: list[tuple[int, int, object]] = []
        self._arrivals = 0
        self._seen_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self._heap)

    def insert(self, traj) -> bool:
        if traj.reward is None:
            raise ConfigurationError("only rewarded trajectories may be buffered")
        if traj.trajectory_id in self._seen_ids:
            return False
        self._seen_ids.add(traj.trajectory_id)
        heapq.heappush(self._heap, (traj.start_version, self._arrivals, traj))
        self._arrivals += 1
        return True

    def pop_oldest(self, count: int) -> list:
        if count > len(self._heap):
            raise ConfigurationError("pop_oldest beyond buffer size")
        return [heapq.heappop(self._heap)[2] for _ in range(count)]


@dataclass
class ControllerMetrics:
    admitted: int = 0
    rejected: int = 0
    duplicates: int = 0
    dropped_rewards: int = 0
    batches_formed: int = 0
    trajectories_buffered: int = 0
    # staleness (version at formation - start_version) -> trajectory count
    staleness_counts: dict[int, int] = field(default_factory=dict)


class RolloutController:
    """Coordinates admission, reward routing, batching and weight broadcast.

    The drivers own timing: they decide *when* ``try_admit``/``on_response``
    run (event clock or real threads); this class owns the protocol state
    and keeps it consistent under a single lock.

    ``request_factory(trajectory_id)`` must return the generate request for
    a freshly admitted trajectory. ``broadcast`` (optional) is invoked with
    each newly published snapshot; event-driven drivers leave it unset and
    sequence worker updates themselves.
    """

    def __init__(self, batch_size: int, eta: int | None, reward_service,
                 request_factory, broadcast=None, audit: bool = True):
        self.state = AdmissionState(batch_size=batch_size, eta=eta)
        self.buffer = ReplayBuffer()
        self.reward_service = reward_service
        self.request_factory = request_factory
        self.broadcast = broadcast
        self.audit = audit
        self.metrics = ControllerMetrics()
        self._consumed_ids: set[int] = set()
        self._lock = threading.RLock()
        # Live-mode synchronization: admission waiters / batch-ready waiters.
        self.admission_changed = threading.Condition(self._lock)
        self.buffer_changed = threading.Condition(self._lock)

    # -- admission ---------------------------------------------------------

    def try_admit(self):
        """Admit one generation request, or return None if gated.

        The gate check, the counter increment and the id assignment form one
        atomic step.
        """
        with self._lock:
            if not self.state.admissible():
                self.metrics.rejected += 1
                return None
            trajectory_id = self.state.n_requested
            self.state.n_requested += 1
            if self.audit and not self.state.gate_holds():
                raise ConfigurationError(
                    f"staleness gate violated at admission: N_r={self.state.n_requested}, "
                    f"i={self.state.version}, eta={self.state.eta}"
                )
            self.metrics.admitted += 1
            return self.request_factory(trajectory_id)

    # -- responses ---------------------------------------------------------

    def on_response(self, traj) -> bool:
        """Reward a completed trajectory and buffer it.

        A failed reward evaluation drops the trajectory (with a counted
        diagnostic) without decrementing the admission counter, which keeps
        the gate conservative.
        """
        if traj.reward is None:
            try:
                traj.reward = self.reward_service.evaluate(
                    traj.prompt, traj.tokens, traj.trajectory_id)
            except Exception:
                with self._lock:
                    self.metrics.dropped_rewards += 1
                return False
        with self._lock:
            if not self.buffer.insert(traj):
                self.metrics.duplicates += 1
                return False
            self.metrics.trajectories_buffered += 1
            self.buffer_changed.notify_all()
            return True

    # -- batching ----------------------------------------------------------

    def batch_ready(self) -> bool:
        with self._lock:
            return len(self.buffer) >= self.state.batch_size

    def form_batch(self):
        """Remove and return the B oldest trajectories, or None if not ready."""
        with self._lock:
            size = self.state.batch_size
            if len(self.buffer) < size:
                return None
            batch = self.buffer.pop_oldest(size)
            for traj in batch:
                traj.mark_consumed()
                if self.audit:
                    if traj.trajectory_id in self._consumed_ids:
                        raise ConfigurationError(
                            f"trajectory {traj.trajectory_id} consumed twice")
                    self._consumed_ids.add(traj.trajectory_id)
                lag = self.state.version - traj.start_version
                counts = self.metrics.staleness_counts
                counts[lag] = counts.get(lag, 0) + 1
            self.metrics.batches_formed += 1
            return batch

    def batch_staleness(self, batch) -> dict[int, int]:
        """Staleness histogram of a batch relative to the current version."""
        with self._lock:
            hist: dict[int, int] = {}
            for traj in batch:
                lag = self.state.version - traj.start_version
                hist[lag] = hist.get(lag, 0) + 1
            return hist

    # -- publication -------------------------------------------------------

    def on_weights_published(self, new_params) -> None:
        """Advance the published version and broadcast the new snapshot.

        Re-opens the admission gate for throughput that was previously
        rejected.
        """
        with self._lock:
            if new_params.version != self.state.version + 1:
                raise ConfigurationError(
                    f"out-of-order publication: have version {self.state.version}, "
                    f"got {new_params.version}"
                )
            self.state.version = new_params.version
            if self.broadcast is not None:
                self.broadcast(new_params)
            self.admission_changed.notify_all()
