"""PPO training on replayed trajectories.

The objective disentangles three policies per token: the *behavior* policy
that sampled the token (its log-probability was recorded at emission time,
possibly under several versions along one trajectory), the *proximal*
policy anchoring the trust region (the parameters current when the global
batch arrived, recomputed here once per batch), and the policy being
optimized. With ``r = prox/behav`` and ``u = pi_theta/prox`` the per-token
contribution is

    r * min(u * A, clip(u, 1 - eps, 1 + eps) * A)

and the loss is the negated mean over tokens. ``r`` is constant with
respect to the parameters; when the clipped branch is selected the token
contributes no gradient. The *naive* variant anchors the ratio directly at
the behavior policy (``r = 1``), which is only sound for on-policy data
and is kept for ablations.

Advantages: with no critic, discount and GAE lambda both 1, and reward on
the final token only, the raw advantage of every token is the trajectory's
scalar reward; advantages are then normalized to zero mean and unit
population standard deviation across all tokens of the global batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as P


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    clip_eps: float = 0.2
    minibatches: int = 4
    micro_token_budget: int = 512
    micro_min_groups: int = 1
    objective: str = "decoupled"  # or "naive"
    adam: P.AdamConfig = field(default_factory=P.AdamConfig)

    def __post_init__(self):
        if not (0 < self.clip_eps < 1):
            raise BatchError("clip_eps must be in (0, 1)")
        if self.minibatches < 1:
            raise BatchError("minibatches must be >= 1")
        if self.objective not in ("decoupled", "naive"):
            raise BatchError(f"unknown objective {self.objective!r}")


@dataclass
class TrainBatch:
    """A global batch flattened to per-token arrays.

    ``traj_bounds[k]:traj_bounds[k+1]`` is the token range of trajectory
    ``k`` in formation order. ``prox_logprobs`` and ``advantages`` start
    unset and are populated exactly once per batch.
    """

    trajectories: list
    step_index: int
    features: np.ndarray  # (n_tokens, feature_dim)
    tokens: np.ndarray  # (n_tokens,) int
    behavior_logprobs: np.ndarray  # (n_tokens,)
    traj_bounds: np.ndarray  # (n_traj + 1,) int
    prox_logprobs: np.ndarray | None = None
    prox_version: int | None = None
    advantages: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def token_range(self, traj_index: int) -> np.ndarray:
        return np.arange(self.traj_bounds[traj_index], self.traj_bounds[traj_index + 1])


def build_train_batch(trajectories, featurizer: P.ContextFeaturizer,
                      step_index: int) -> TrainBatch:
    """Flatten trajectories into the per-token table the losses consume.

    Context features are recomputed from each token prefix; they are a pure
    function of the tokens, so this reproduces exactly what the rollout
    worker saw.
    """
    feats, tokens, behav, bounds = [], [], [], [0]
    for traj in trajectories:
        if traj.reward is None:
            raise BatchError(f"trajectory {traj.trajectory_id} is unrewarded")
        prefix: list[int] = []
        for tok in traj.tokens:
            feats.append(featurizer.features(traj.prompt, prefix))
            prefix.append(tok)
        tokens.extend(traj.tokens)
        behav.extend(traj.behavior_logprobs)
        bounds.append(len(tokens))
    n = len(tokens)
    dim = featurizer.feature_dim
    return TrainBatch(
        trajectories=list(trajectories),
        step_index=step_index,
        features=np.array(feats).reshape(n, dim),
        tokens=np.array(tokens, dtype=np.int64),
        behavior_logprobs=np.array(behav, dtype=np.float64),
        traj_bounds=np.array(bounds, dtype=np.int64),
    )


def compute_advantages(batch: TrainBatch) -> np.ndarray:
    """Per-token advantages: trajectory return, normalized across the batch."""
    raw = np.empty(batch.n_tokens)
    for k, traj in enumerate(batch.trajectories):
        raw[batch.token_range(k)] = traj.reward.reward
    std = float(np.std(raw))
    if std == 0.0:
        adv = np.zeros_like(raw)
    else:
        adv = (raw - np.mean(raw)) / std
    batch.advantages = adv
    return adv


def recompute_prox_logprobs(batch: TrainBatch, current_params: P.VersionedParams) -> np.ndarray:
    """Token log-probabilities under the parameters at batch arrival.

    Computed once per global batch, before any minibatch update, and never
    refreshed within the step.
    """
    prox = P.batch_token_log_probs(current_params, batch.features, batch.tokens)
    batch.prox_logprobs = prox
    batch.prox_version = current_params.version
    return prox


@dataclass
class LossResult:
    loss: float
    grad: P.ParamGrad
    n_tokens: int
    clip_fraction: float
    mean_ratio: float
    excluded: int


def _surrogate_terms(batch: TrainBatch, idx: np.ndarray, params: P.VersionedParams,
                     clip_eps: float, decoupled: bool):
    """Objective sum and gradient sums over one token subset.

    Returns raw sums so micro-batch accumulation stays exact; callers
    normalize by the token count of the unit they optimize.
    """
    feats = batch.features[idx]
    toks = batch.tokens[idx]
    behav = batch.behavior_logprobs[idx]
    prox = batch.prox_logprobs[idx]
    adv = batch.advantages[idx]

    all_lp = P.log_softmax(feats @ params.weights.T + params.bias)
    lp = all_lp[np.arange(len(toks)), toks]
    if decoupled:
        scale = np.exp(prox - behav)  # constant w.r.t. parameters
        ratio = np.exp(lp - prox)
    else:
        scale = np.ones_like(lp)
        ratio = np.exp(lp - behav)

    valid = np.isfinite(scale) & np.isfinite(ratio)
    term_plain = ratio * adv
    term_clip = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    objective = scale * np.minimum(term_plain, term_clip)
    objective = np.where(valid, objective, 0.0)
    take_plain = (term_plain <= term_clip) & valid

    coef = np.where(take_plain, scale * adv * ratio, 0.0)
    resid = -np.exp(all_lp)
    resid[np.arange(len(toks)), toks] += 1.0
    resid *= coef[:, None]
    grad_w = resid.T @ feats
    grad_b = resid.sum(axis=0)

    clipped = int(np.count_nonzero(valid & (term_clip < term_plain)))
    return {
        "objective_sum": float(objective.sum()),
        "grad_w_sum": grad_w,
        "grad_b_sum": grad_b,
        "n_valid": int(np.count_nonzero(valid)),
        "n_clipped": clipped,
        "ratio_sum": float(np.where(valid, ratio, 0.0).sum()),
        "n_excluded": int(len(toks) - np.count_nonzero(valid)),
    }


def _ppo_loss(batch: TrainBatch, params: P.VersionedParams, clip_eps: float,
              decoupled: bool) -> LossResult:
    if batch.prox_logprobs is None or batch.advantages is None:
        raise BatchError("populate prox_logprobs and advantages before the loss")
    idx = np.arange(batch.n_tokens)
    t = _surrogate_terms(batch, idx, params, clip_eps, decoupled)
    n = max(t["n_valid"], 1)
    grad = P.ParamGrad(-t["grad_w_sum"] / n, -t["grad_b_sum"] / n)
    return LossResult(
        loss=-t["objective_sum"] / n,
        grad=grad,
        n_tokens=t["n_valid"],
        clip_fraction=t["n_clipped"] / n,
        mean_ratio=t["ratio_sum"] / n,
        excluded=t["n_excluded"],
    )


def decoupled_ppo_loss(batch: TrainBatch, params: P.VersionedParams,
                       clip_eps: float = 0.2) -> LossResult:
    """Staleness-robust clipped objective anchored at the proximal policy."""
    return _ppo_loss(batch, params, clip_eps, decoupled=True)


def naive_ppo_loss(batch: TrainBatch, params: P.VersionedParams,
                   clip_eps: float = 0.2) -> LossResult:
    """Standard clipped objective treating the behavior policy as the anchor."""
    return _ppo_loss(batch, params, clip_eps, decoupled=False)


@dataclass(frozen=True)
class MicrobatchPlan:
    groups: tuple[tuple[int, ...], ...]
    capacity: int
    min_groups: int


def allocate_microbatches(lengths, capacity: int, min_groups: int = 1) -> MicrobatchPlan:
    """Partition variable-length sequences into token-capacity-bounded groups.

    Longest-first placement: while fewer than ``min_groups`` groups exist,
    or when no open group can fit the sequence, a new group is opened;
    otherwise the sequence joins the fitting group holding the fewest
    sequences (lowest index on ties). Deterministic for a fixed input
    order. The group count reaches ``min_groups`` whenever at least that
    many sequences exist (with fewer, every sequence gets its own group).
    """
    lengths = list(lengths)
    if min_groups < 1:
        raise BatchError("min_groups must be >= 1")
    for s in lengths:
        if s < 1:
            raise BatchError(f"sequence lengths must be positive, got {s}")
        if s > capacity:
            raise BatchError(f"sequence length {s} exceeds capacity {capacity}")
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    groups: list[list[int]] = []
    totals: list[int] = []
    for i in order:
        s = lengths[i]
        fitting = [g for g in range(len(groups)) if totals[g] + s <= capacity]
        if len(groups) < min_groups or not fitting:
            groups.append([i])
            totals.append(s)
        else:
            g = min(fitting, key=lambda g: (len(groups[g]), g))
            groups[g].append(i)
            totals[g] += s
    return MicrobatchPlan(
        groups=tuple(tuple(g) for g in groups),
        capacity=capacity,
        min_groups=min_groups,
    )


@dataclass
class TrainStepStats:
    step_index: int
    loss: float
    clip_fraction: float
    mean_ratio: float
    tokens: int
    minibatch_updates: int
    microbatches: int
    excluded_tokens: int


def train_step(batch: TrainBatch, params: P.VersionedParams, opt: P.AdamState,
               config: TrainerConfig = TrainerConfig()) -> tuple[P.VersionedParams, TrainStepStats]:
    """One PPO step over a global batch.

    Proximal log-probabilities and advantages are computed once, then the
    batch is split into ``minibatches`` trajectory groups updated
    sequentially; within each, gradients accumulate across capacity-bounded
    micro-batches before a single optimizer update. Returns parameters
    tagged ``version + 1``, left for the controller to publish.
    """
    recompute_prox_logprobs(batch, params)
    compute_advantages(batch)
    decoupled = config.objective == "decoupled"

    n_traj = len(batch.trajectories)
    mb_splits = [s for s in np.array_split(np.arange(n_traj), config.minibatches)
                 if len(s) > 0]
    loss_sum = 0.0
    clip_sum = 0.0
    ratio_sum = 0.0
    token_total = 0
    excluded = 0
    micro_count = 0
    updates = 0
    for mb in mb_splits:
        traj_ids = [k for k in mb if batch.traj_bounds[k + 1] > batch.traj_bounds[k]]
        if not traj_ids:
            continue
        lengths = [int(batch.traj_bounds[k + 1] - batch.traj_bounds[k]) for k in traj_ids]
        plan = allocate_microbatches(lengths, config.micro_token_budget,
                                     config.micro_min_groups)
        grad = P.ParamGrad.zeros_like(params)
        obj_sum = 0.0
        n_valid = 0
        for group in plan.groups:
            idx = np.concatenate([batch.token_range(traj_ids[j]) for j in group])
            t = _surrogate_terms(batch, idx, params, config.clip_eps, decoupled)
            grad.add_(P.ParamGrad(t["grad_w_sum"], t["grad_b_sum"]))
            obj_sum += t["objective_sum"]
            n_valid += t["n_valid"]
            clip_sum += t["n_clipped"]
            ratio_sum += t["ratio_sum"]
            excluded += t["n_excluded"]
            micro_count += 1
        n = max(n_valid, 1)
        grad.scale_(-1.0 / n)
        params = P.apply_update(params, grad, opt, config.adam)
        updates += 1
        loss_sum += -obj_sum
        token_total += n_valid

    stats = TrainStepStats(
        step_index=batch.step_index,
        loss=loss_sum / max(token_total, 1),
        clip_fraction=clip_sum / max(token_total, 1),
        mean_ratio=ratio_sum / max(token_total, 1),
        tokens=batch.n_tokens,
        minibatch_updates=updates,
        microbatches=micro_count,
        excluded_tokens=excluded,
    )
    return replace(params, version=params.version + 1), stats
