import numpy as np
import pytest

from asyncrl import policy as P
from asyncrl.rollout import (GenerateRequest, RolloutWorker, Trajectory,
                             WeightVersionError, stitched_behavior_logprob)
from asyncrl.tasks import EOS_TOKEN

from conftest import make_copy_prompt, random_params


def suppressed_eos_params(featurizer, rng, version=0):
    """Random params that never emit EOS, so sequences run to max length."""
    params = random_params(featurizer, rng, scale=0.3, version=version)
    bias = params.bias.copy()
    bias[EOS_TOKEN] = -1e9
    return P.VersionedParams(version, params.weights.copy(), bias)


def bump(params, rng, version=None):
    """A materially different snapshot at version + 1."""
    return P.VersionedParams(
        version=params.version + 1 if version is None else version,
        weights=params.weights + rng.normal(0, 0.2, params.weights.shape),
        bias=params.bias.copy(),
    )


def test_uninterrupted_generation_matches_naive_sampling(featurizer):
    rng = np.random.default_rng(0)
    params = random_params(featurizer, rng)
    worker = RolloutWorker(params, featurizer, seed=123)
    request = GenerateRequest(prompt=make_copy_prompt([5, 2]), max_new_tokens=8,
                              trajectory_id=77)
    traj = worker.generate(request)

    # Reference: plain on-policy sampling with the same per-trajectory rng.
    ref_rng = np.random.default_rng([123, 77])
    tokens, logprobs = [], []
    for _ in range(8):
        feats = featurizer.features(request.prompt, tokens)
        tok = P.sample(params, feats, ref_rng)
        tokens.append(tok)
        logprobs.append(P.log_prob(params, feats, tok))
        if tok == EOS_TOKEN:
            break
    assert traj.tokens == tokens
    assert traj.behavior_logprobs == logprobs
    assert traj.versions == [params.version] * len(tokens)
    assert traj.start_version == params.version


def test_scripted_interruption_splits_versions(featurizer):
    rng = np.random.default_rng(1)
    params5 = suppressed_eos_params(featurizer, rng, version=5)
    worker = RolloutWorker(params5, featurizer, seed=9)
    handle = worker.start(GenerateRequest(prompt=make_copy_prompt([1, 2, 3]),
                                          max_new_tokens=8, trajectory_id=0))
    for _ in range(3):
        assert not worker.step(handle)
    ack = worker.update_weights(bump(params5, rng))
    assert ack.version == 6
    assert ack.sequences_switched == 1
    assert ack.recompute_tokens == 4 + 3  # prompt tokens + generated prefix
    while not worker.step(handle):
        pass
    traj = worker.finish(handle)
    assert traj.versions == [5, 5, 5, 6, 6, 6, 6, 6]
    assert traj.start_version == 5


def test_update_after_completion_leaves_trajectory_unchanged(featurizer):
    rng = np.random.default_rng(2)
    params = suppressed_eos_params(featurizer, rng)
    worker = RolloutWorker(params, featurizer, seed=11)
    handle = worker.start(GenerateRequest(prompt=make_copy_prompt([4]),
                                          max_new_tokens=3, trajectory_id=1))
    while not worker.step(handle):
        pass
    ack = worker.update_weights(bump(params, rng))
    assert ack.sequences_switched == 0
    traj = worker.finish(handle)
    assert traj.versions == [0, 0, 0]


def test_consecutive_updates_skip_middle_version(featurizer):
    rng = np.random.default_rng(3)
    params = suppressed_eos_params(featurizer, rng)
    worker = RolloutWorker(params, featurizer, seed=13)
    handle = worker.start(GenerateRequest(prompt=make_copy_prompt([9, 9]),
                                          max_new_tokens=6, trajectory_id=2))
    worker.step(handle)
    params1 = bump(params, rng)
    params2 = bump(params1, rng)
    worker.update_weights(params1)
    worker.update_weights(params2)  # no tokens in between
    while not worker.step(handle):
        pass
    traj = worker.finish(handle)
    assert traj.versions == [0, 2, 2, 2, 2, 2]
    assert 1 not in traj.versions
    assert all(a <= b for a, b in zip(traj.versions, traj.versions[1:]))


def test_version_gap_rejected_without_state_change(featurizer):
    rng = np.random.default_rng(4)
    params = random_params(featurizer, rng)
    worker = RolloutWorker(params, featurizer)
    skip_ahead = P.VersionedParams(2, params.weights.copy(), params.bias.copy())
    with pytest.raises(WeightVersionError):
        worker.update_weights(skip_ahead)
    assert worker.current_version == 0


def test_update_switches_all_inflight_sequences(featurizer):
    rng = np.random.default_rng(5)
    params = suppressed_eos_params(featurizer, rng)
    worker = RolloutWorker(params, featurizer, seed=17)
    handles = [worker.start(GenerateRequest(prompt=make_copy_prompt([i % 10]),
                                            max_new_tokens=6, trajectory_id=10 + i))
               for i in range(8)]
    for handle in handles:
        worker.step(handle)
        worker.step(handle)
    ack = worker.update_weights(bump(params, rng))
    assert ack.sequences_switched == 8
    for handle in handles:
        while not worker.step(handle):
            pass
        traj = worker.finish(handle)
        assert traj.versions[:2] == [0, 0]
        assert all(v == 1 for v in traj.versions[2:])


def test_recompute_under_recorded_version_reproduces_logprobs(featurizer):
    rng = np.random.default_rng(6)
    snapshots = {5: suppressed_eos_params(featurizer, rng, version=5)}
    worker = RolloutWorker(snapshots[5], featurizer, seed=19)
    handle = worker.start(GenerateRequest(prompt=make_copy_prompt([8, 8, 1]),
                                          max_new_tokens=8, trajectory_id=3))
    for n_steps in (2, 3):
        for _ in range(n_steps):
            worker.step(handle)
        nxt = bump(snapshots[worker.current_version], rng)
        snapshots[nxt.version] = nxt
        worker.update_weights(nxt)
    while not worker.step(handle):
        pass
    traj = worker.finish(handle)
    assert sorted(set(traj.versions)) == [5, 6, 7]
    for t, token in enumerate(traj.tokens):
        feats = featurizer.features(traj.prompt, traj.tokens[:t])
        recomputed = P.log_prob(snapshots[traj.versions[t]], feats, token)
        assert recomputed == traj.behavior_logprobs[t]  # identical code path


def test_stitched_logprob_equals_segment_sums(featurizer):
    rng = np.random.default_rng(7)
    params = suppressed_eos_params(featurizer, rng)
    worker = RolloutWorker(params, featurizer, seed=23)
    handle = worker.start(GenerateRequest(prompt=make_copy_prompt([2, 7]),
                                          max_new_tokens=8, trajectory_id=4))
    for _ in range(4):
        worker.step(handle)
    worker.update_weights(bump(params, rng))
    while not worker.step(handle):
        pass
    traj = worker.finish(handle)
    seg_a = sum(lp for lp, v in zip(traj.behavior_logprobs, traj.versions) if v == 0)
    seg_b = sum(lp for lp, v in zip(traj.behavior_logprobs, traj.versions) if v == 1)
    assert stitched_behavior_logprob(traj) == pytest.approx(seg_a + seg_b, abs=1e-12)


def test_stitched_logprob_immediate_eos(featurizer):
    eos_only = P.VersionedParams(
        0, np.zeros((16, featurizer.feature_dim)),
        np.where(np.arange(16) == EOS_TOKEN, 1e3, 0.0))
    worker = RolloutWorker(eos_only, featurizer, seed=29)
    traj = worker.generate(GenerateRequest(prompt=make_copy_prompt([1]),
                                           max_new_tokens=8, trajectory_id=5))
    assert traj.tokens == [EOS_TOKEN]
    assert stitched_behavior_logprob(traj) == traj.behavior_logprobs[0]


def test_trace_sink_records_each_token(featurizer):
    rng = np.random.default_rng(8)
    params = random_params(featurizer, rng)
    records = []
    worker = RolloutWorker(params, featurizer, seed=31, trace_sink=records.append)
    traj = worker.generate(GenerateRequest(prompt=make_copy_prompt([6]),
                                           max_new_tokens=5, trajectory_id=6))
    assert len(records) == len(traj.tokens)
    assert [r["step"] for r in records] == list(range(len(traj.tokens)))
    assert [r["logprob"] for r in records] == traj.behavior_logprobs
    assert all(r["trajectory_id"] == 6 for r in records)


def test_trajectory_single_use():
    traj = Trajectory(trajectory_id=0, prompt=make_copy_prompt([1]))
    traj.mark_consumed()
    with pytest.raises(RuntimeError):
        traj.mark_consumed()


def test_generate_request_validation():
    with pytest.raises(ValueError):
        GenerateRequest(prompt=make_copy_prompt([1]), max_new_tokens=0)
