"""Experiment driver: end-to-end training runs, ablations, and exports.

Two execution modes share all module logic:

* ``simulated``: the event engine from :mod:`asyncrl.timeline` drives real
  policy sampling, reward evaluation and PPO updates on the simulated
  clock. Runs are bit-deterministic given the config and seed.
* ``live``: rollout workers, reward evaluation, the controller and the
  trainer run as real threads communicating through the controller; used
  to soak-test the concurrency contracts. Live mode supports the
  interruptible asynchronous schedule only.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import policy as P
from . import trainer as T
from .controller import ConfigurationError, RolloutController
from .rollout import GenerateRequest, RolloutWorker
from .tasks import (EOS_TOKEN, TASK_KINDS, PromptSource, RewardService,
                    TaskConfig, evaluation_prompts)
from .timeline import (SCHEDULE_MODES, CostModel, EventEngine, effective_eta)

EXECUTION_MODES = ("simulated", "live")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; validated up front and serialized alongside
    the results.

    The training batch holds ``n_prompts * n_responses`` trajectories.
    (Large-model practice uses 512 prompts x 16 responses; the desk-scale
    default is 32 x 4.) ``eta=None`` means unbounded staleness.
    """

    task_kind: str = "copy"
    n_prompts: int = 32
    n_responses: int = 4
    eta: int | None = 0
    objective: str = "decoupled"
    total_steps: int = 300
    seed: int = 1
    n_workers: int = 4
    worker_slots: int = 4
    schedule_mode: str = "async_interruptible"
    mode: str = "simulated"
    max_new_tokens: int = 8
    temperature: float = 1.0
    eval_prompts: int = 256
    checkpoint_every: int = 0
    trace: bool = False
    task: TaskConfig = field(default_factory=TaskConfig)
    policy: P.PolicyConfig = field(default_factory=P.PolicyConfig)
    trainer: T.TrainerConfig = field(default_factory=T.TrainerConfig)
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {self.task_kind!r}")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ConfigurationError(f"unknown schedule mode {self.schedule_mode!r}")
        if self.mode not in EXECUTION_MODES:
            raise ConfigurationError(f"unknown execution mode {self.mode!r}")
        if self.mode == "live" and self.schedule_mode != "async_interruptible":
            raise ConfigurationError(
                "live mode supports only the async_interruptible schedule")
        if min(self.n_prompts, self.n_responses, self.total_steps,
               self.n_workers, self.worker_slots, self.max_new_tokens) < 1:
            raise ConfigurationError("counts must be >= 1")
        if self.eta is not None and self.eta < 0:
            raise ConfigurationError("eta must be >= 0 or None")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.policy.vocab_size != self.task.vocab_size:
            raise ConfigurationError("policy and task vocabularies differ")
        if self.trainer.objective != self.objective:
            object.__setattr__(self, "trainer",
                               replace(self.trainer, objective=self.objective))

    @property
    def batch_size(self) -> int:
        return self.n_prompts * self.n_responses

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        for key, cls in (("task", TaskConfig), ("policy", P.PolicyConfig),
                         ("trainer", T.TrainerConfig), ("cost", CostModel)):
            if key in data and isinstance(data[key], dict):
                sub = dict(data[key])
                if key == "trainer" and isinstance(sub.get("adam"), dict):
                    sub["adam"] = P.AdamConfig(**sub["adam"])
                data[key] = cls(**sub)
        return ExperimentConfig(**data)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: Path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunRecord:
    """Per-training-step metrics."""

    step: int
    time: float
    version: int
    reward_mean: float
    success_rate: float
    loss: float
    clip_fraction: float
    mean_ratio: float
    tokens: int
    buffer_depth: int
    throughput: float
    staleness: dict[str, int]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[RunRecord]
    final_success: float
    final_params: P.VersionedParams
    out_dir: Path | None
    timeline: dict | None = None


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(path, params: P.VersionedParams, opt: P.AdamState) -> None:
    np.savez(path, version=np.array(params.version), weights=params.weights,
             bias=params.bias, m_weights=opt.m_weights, v_weights=opt.v_weights,
             m_bias=opt.m_bias, v_bias=opt.v_bias, opt_step=np.array(opt.step))


def load_checkpoint(path) -> tuple[P.VersionedParams, P.AdamState]:
    with np.load(path) as data:
        params = P.VersionedParams(version=int(data["version"]),
                                   weights=data["weights"].copy(),
                                   bias=data["bias"].copy())
        opt = P.AdamState(m_weights=data["m_weights"].copy(),
                          v_weights=data["v_weights"].copy(),
                          m_bias=data["m_bias"].copy(),
                          v_bias=data["v_bias"].copy(),
                          step=int(data["opt_step"]))
    return params, opt


# -- evaluation ---------------------------------------------------------------


def greedy_decode(params: P.VersionedParams, featurizer: P.ContextFeaturizer,
                  prompt, max_new_tokens: int) -> list[int]:
    tokens: list[int] = []
    for _ in range(max_new_tokens):
        tok = P.greedy_token(params, featurizer.features(prompt, tokens))
        tokens.append(tok)
        if tok == EOS_TOKEN:
            break
    return tokens

def evaluate_success(params: P.VersionedParams, featurizer: P.ContextFeaturizer,
                     prompts, max_new_tokens: int) -> float:
    """Exact-match success rate of greedy decoding over a prompt set."""
    hits = 0
    for prompt in prompts:
        tokens = greedy_decode(params, featurizer, prompt, max_new_tokens)
        if tokens == list(prompt.target) + [EOS_TOKEN]:
            hits += 1
    return hits / len(prompts) if prompts else 0.0


# -- shared run plumbing -------------------------------------------------------


class _RunState:
    """Mutable training-side state shared between the driver and train_fn."""

    def __init__(self, config: ExperimentConfig, resume_from=None):
        self.config = config
        self.featurizer = P.ContextFeaturizer(config.policy)
        if resume_from is not None:
            self.params, self.opt = load_checkpoint(resume_from)
        else:
            self.params = P.init_params(self.featurizer)
            self.opt = P.AdamState.zeros_like(self.params)
        self.start_version = self.params.version
        self.records: list[RunRecord] = []

    def train(self, batch_trajs, step_index):
        batch = T.build_train_batch(batch_trajs, self.featurizer,
                                    self.start_version + step_index)
        new_params, stats = T.train_step(batch, self.params, self.opt,
                                         self.config.trainer)
        self.params = new_params
        return new_params, batch.n_tokens, stats


def _make_controller(config: ExperimentConfig, state: _RunState, broadcast=None):
    source = PromptSource(config.task_kind, config.task, config.seed,
                          n_responses=config.n_responses)
    service = RewardService(config.task)

    def request_factory(trajectory_id: int) -> GenerateRequest:
        return GenerateRequest(prompt=source.next_prompt(),
                               max_new_tokens=config.max_new_tokens,
                               temperature=config.temperature,
                               trajectory_id=trajectory_id)

    controller = RolloutController(
        batch_size=config.batch_size,
        eta=effective_eta(config.schedule_mode, config.eta),
        reward_service=service,
        request_factory=request_factory,
        broadcast=broadcast,
    )
    # Resumed runs continue the version/admission counters as if the
    # trajectories of prior steps had been admitted and consumed.
    controller.state.version = state.start_version
    controller.state.n_requested = state.start_version * config.batch_size
    source.advance(controller.state.n_requested)
    return controller


def _record_from_step(controller, event: dict,
                      tokens_trained_total: int) -> RunRecord:
    stats: T.TrainStepStats = event["stats"]
    batch_rewards = event["batch_rewards"]
    t = event["time"]
    return RunRecord(
        step=event["step"],
        time=t,
        version=controller.state.version,
        reward_mean=float(np.mean(batch_rewards)),
        success_rate=float(np.mean([r > 0 for r in batch_rewards])),
        loss=stats.loss,
        clip_fraction=stats.clip_fraction,
        mean_ratio=stats.mean_ratio,
        tokens=stats.tokens,
        buffer_depth=len(controller.buffer),
        throughput=tokens_trained_total / t if t > 0 else 0.0,
        staleness={str(k): v for k, v in sorted(event["staleness"].items())},
    )


class _MetricsWriter:
    def __init__(self, out_dir: Path | None):
        self.path = out_dir / "metrics.jsonl" if out_dir else None
        self._fh = open(self.path, "w") if self.path else None

    def write(self, record: RunRecord) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


# -- simulated-time execution --------------------------------------------------


def _run_simulated(config: ExperimentConfig, state: _RunState,
                   out_dir: Path | None) -> RunResult:
    token_trace = None
    trace_sink = None
    if config.trace and out_dir:
        token_trace = open(out_dir / "token_trace.jsonl", "w")
        trace_sink = lambda rec: token_trace.write(
            json.dumps(rec, sort_keys=True) + "\n")
    workers = [RolloutWorker(state.params, state.featurizer, seed=config.seed,
                             worker_id=w, trace_sink=trace_sink)
               for w in range(config.n_workers)]
    controller = _make_controller(config, state)
    writer = _MetricsWriter(out_dir)
    engine: EventEngine | None = None

    def train_fn(batch_trajs, step_index, now):
        del now
        new_params, n_tokens, stats = state.train(batch_trajs, step_index)
        return new_params, n_tokens, {
            "stats": stats,
            "batch_rewards": [traj.reward.reward for traj in batch_trajs],
        }

    def on_step_record(event: dict) -> None:
        payload = event["stats"]
        record = _record_from_step(controller, {
            "step": event["step"],
            "time": event["time"],
            "staleness": event["staleness"],
            "stats": payload["stats"],
            "batch_rewards": payload["batch_rewards"],
        }, engine.tokens_trained)
        state.records.append(record)
        writer.write(record)
        if (out_dir and config.checkpoint_every
                and (record.step + 1) % config.checkpoint_every == 0):
            save_checkpoint(out_dir / f"checkpoint_{record.step + 1:06d}.npz",
                            state.params, state.opt)

    engine = EventEngine(
        controller=controller,
        workers=workers,
        worker_slots=config.worker_slots,
        train_fn=train_fn,
        cost=config.cost,
        schedule_mode=config.schedule_mode,
        train_steps=config.total_steps - state.start_version,
        reward_latency=config.task.reward_latency,
        on_step_record=on_step_record,
        trace=config.trace,
    )
    try:
        engine.run()
    finally:
        writer.close()
        if token_trace is not None:
            token_trace.close()

    return _finalize(config, state, controller, out_dir,
                     timeline=engine.report().to_dict(),
                     spans=engine.spans)


# -- live (threaded) execution ---------------------------------------------------


def _run_live(config: ExperimentConfig, state: _RunState,
              out_dir: Path | None) -> RunResult:
    workers = [RolloutWorker(state.params, state.featurizer, seed=config.seed,
                             worker_id=w) for w in range(config.n_workers)]

    def broadcast(params):
        for worker in workers:
            worker.update_weights(params)

    controller = _make_controller(config, state, broadcast=broadcast)
    writer = _MetricsWriter(out_dir)
    stop = threading.Event()
    errors: list[BaseException] = []
    started = time.monotonic()
    reward_pool = ThreadPoolExecutor(max_workers=2)

    def deliver(traj):
        if config.task.reward_latency > 0:
            time.sleep(config.task.reward_latency)
        controller.on_response(traj)

    def worker_loop(worker: RolloutWorker):
        try:
            while not stop.is_set():
                with controller.admission_changed:
                    request = controller.try_admit()
                    if request is None:
                        controller.admission_changed.wait(timeout=0.02)
                        continue
                traj = worker.generate(request)
                reward_pool.submit(deliver, traj)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)
            stop.set()

    def trainer_loop():
        tokens_trained = 0
        try:
            for step_index in range(config.total_steps - state.start_version):
                while not stop.is_set():
                    with controller.buffer_changed:
                        if controller.batch_ready():
                            break
                        controller.buffer_changed.wait(timeout=0.02)
                if stop.is_set():
                    return
                batch_trajs = controller.form_batch()
                staleness = controller.batch_staleness(batch_trajs)
                new_params, n_tokens, stats = state.train(batch_trajs, step_index)
                tokens_trained += n_tokens
                controller.on_weights_published(new_params)
                record = _record_from_step(controller, {
                    "step": step_index,
                    "time": time.monotonic() - started,
                    "staleness": staleness,
                    "stats": stats,
                    "batch_rewards": [t.reward.reward for t in batch_trajs],
                }, tokens_trained_total=tokens_trained)
                state.records.append(record)
                writer.write(record)
        except BaseException as exc:
            errors.append(exc)
        finally:
            stop.set()
            with controller.admission_changed:
                controller.admission_changed.notify_all()

    threads = [threading.Thread(target=worker_loop, args=(w,), daemon=True)
               for w in workers]
    trainer_thread = threading.Thread(target=trainer_loop, daemon=True)
    for thread in threads:
        thread.start()
    trainer_thread.start()
    trainer_thread.join()
    for thread in threads:
        thread.join(timeout=10.0)
    reward_pool.shutdown(wait=True)
    writer.close()
    if errors:
        raise errors[0]
    return _finalize(config, state, controller, out_dir, timeline=None, spans=None)


# -- run finalization --------------------------------------------------------------


def _finalize(config: ExperimentConfig, state: _RunState, controller,
              out_dir: Path | None, timeline, spans) -> RunResult:
    prompts = evaluation_prompts(config.task_kind, config.task, config.seed,
                                 config.eval_prompts)
    final_success = evaluate_success(state.params, state.featurizer, prompts,
                                     config.max_new_tokens)
    if out_dir:
        summary = {
            "final_success": final_success,
            "final_version": state.params.version,
            "steps": len(state.records),
            "admitted": controller.metrics.admitted,
            "rejected": controller.metrics.rejected,
            "dropped_rewards": controller.metrics.dropped_rewards,
            "duplicates": controller.metrics.duplicates,
            "staleness_counts": {str(k): v for k, v in
                                 sorted(controller.metrics.staleness_counts.items())},
        }
        if timeline is not None:
            summary["timeline"] = timeline
        (out_dir / "final.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
        save_checkpoint(out_dir / "checkpoint_final.npz", state.params, state.opt)
        if spans is not None:
            with open(out_dir / "trace.jsonl", "w") as fh:
                for span in spans:
                    fh.write(json.dumps(span, sort_keys=True) + "\n")
    return RunResult(config=config, records=state.records,
                     final_success=final_success, final_params=state.params,
                     out_dir=out_dir, timeline=timeline)


def run_experiment(config: ExperimentConfig, out_dir=None,
                   resume_from=None) -> RunResult:
    """Wire the components per the configuration and train to completion.

    Writes ``config.json``, incremental ``metrics.jsonl``, ``final.json``
    and a final checkpoint into ``out_dir`` when given. ``resume_from``
    restarts from a saved checkpoint: parameters, optimizer moments and the
    version counter continue; the generation pipeline is rebuilt fresh.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")
    state = _RunState(config, resume_from=resume_from)
    if state.start_version >= config.total_steps:
        raise ConfigurationError(
            f"checkpoint already at version {state.start_version}; nothing to do")
    if config.mode == "simulated":
        return _run_simulated(config, state, out_dir)
    return _run_live(config, state, out_dir)


# -- ablation matrix ------------------------------------------------------------


@dataclass
class AblationCell:
    eta: int | None
    objective: str
    seed: int
    final_success: float
    run_dir: str | None


def _eta_label(eta: int | None) -> str:
    return "inf" if eta is None else str(eta)


def run_ablation(base_config: ExperimentConfig, eta_values, objectives,
                 seeds=(1, 2, 3), out_dir=None) -> dict:
    """Run the staleness x objective matrix with shared seeds.

    Returns per-run rows plus a mean-success summary keyed by
    ``(eta, objective)``; mirrors the with/without-decoupling comparison
    table structure.
    """
    eta_values = list(eta_values)
    if not eta_values:
        raise ConfigurationError("eta_values must be non-empty")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    cells: list[AblationCell] = []
    for eta in eta_values:
        for objective in objectives:
            for seed in seeds:
                name = f"eta{_eta_label(eta)}_{objective}_seed{seed}"
                run_dir = out_dir / name if out_dir else None
                config = replace(base_config, eta=eta, objective=objective,
                                 seed=seed)
                result = run_experiment(config, out_dir=run_dir)
                cells.append(AblationCell(
                    eta=eta, objective=objective, seed=seed,
                    final_success=result.final_success,
                    run_dir=str(run_dir) if run_dir else None,
                ))
    summary: dict[tuple[str, str], float] = {}
    for eta in eta_values:
        for objective in objectives:
            scores = [c.final_success for c in cells
                      if c.eta == eta and c.objective == objective]
            summary[(_eta_label(eta), objective)] = float(np.mean(scores))
    if out_dir:
        with open(out_dir / "ablation_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eta", "objective", "seed", "final_success"])
            for c in cells:
                writer.writerow([_eta_label(c.eta), c.objective, c.seed,
                                 f"{c.final_success:.6f}"])
            writer.writerow([])
            writer.writerow(["eta", "objective", "mean_final_success"])
            for (eta, objective), mean in summary.items():
                writer.writerow([eta, objective, f"{mean:.6f}"])
    return {"cells": cells, "summary": summary}


# -- exports ---------------------------------------------------------------------


def export_report(run_dirs, out_dir) -> list[Path]:
    """Convert run directories into plot-ready delimited text files.

    Per run: a learning-curve CSV and, when a trace was recorded, a Gantt
    CSV of busy spans. Across runs: a throughput/success-vs-eta table.
    Missing pieces produce warnings and a partial export.
    """
    run_dirs = [Path(d) for d in run_dirs]
    out_dir = Path(out_dir)
    written: list[Path] = []
    if not run_dirs:
        warnings.warn("export_report: no runs given, nothing exported")
        return written
    out_dir.mkdir(parents=True, exist_ok=True)
    eta_rows = []
    for run_dir in run_dirs:
        metrics_path = run_dir / "metrics.jsonl"
        if not metrics_path.exists():
            warnings.warn(f"export_report: {metrics_path} missing, skipped")
            continue
        records = [json.loads(line) for line in metrics_path.read_text().splitlines()]
        name = run_dir.name
        curve = out_dir / f"curve_{name}.csv"
        with open(curve, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "time", "reward_mean", "success_rate",
                             "loss", "clip_fraction", "throughput"])
            for r in records:
                writer.writerow([r["step"], r["time"], r["reward_mean"],
                                 r["success_rate"], r["loss"],
                                 r["clip_fraction"], r["throughput"]])
        written.append(curve)
        config_path = run_dir / "config.json"
        final_path = run_dir / "final.json"
        if config_path.exists() and final_path.exists():
            config = json.loads(config_path.read_text())
            final = json.loads(final_path.read_text())
            eta_rows.append([
                _eta_label(config.get("eta")), config.get("objective"),
                config.get("seed"), final.get("final_success"),
                records[-1]["throughput"] if records else 0.0,
            ])
        trace_path = run_dir / "trace.jsonl"
        if trace_path.exists():
            gantt = out_dir / f"gantt_{name}.csv"
            with open(gantt, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["entity", "kind", "start", "end", "detail"])
                for line in trace_path.read_text().splitlines():
                    span = json.loads(line)
                    writer.writerow([span["entity"], span["kind"], span["start"],
                                     span["end"], span["detail"]])
            written.append(gantt)
    if eta_rows:
        table = out_dir / "throughput_vs_eta.csv"
        with open(table, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eta", "objective", "seed", "final_success",
                             "throughput"])
            writer.writerows(eta_rows)
        written.append(table)
    return written
