import math

import numpy as np
import pytest

from asyncrl import policy as P
from asyncrl.tasks import EOS_TOKEN

from conftest import make_copy_prompt, numerical_grad, random_params


def test_zero_params_give_uniform_softmax(featurizer):
    params = P.init_params(featurizer)
    prompt = make_copy_prompt([3, 1])
    feats = featurizer.features(prompt, [])
    assert np.all(P.logits(params, feats) == 0.0)
    lp = P.token_log_probs(params, feats)
    assert np.allclose(lp, math.log(1 / 16), atol=1e-15)


def test_one_hot_feature_selects_weight_column(featurizer):
    rng = np.random.default_rng(1)
    params = random_params(featurizer, rng)
    feats = np.zeros(featurizer.feature_dim)
    feats[11] = 1.0
    assert np.allclose(P.logits(params, feats),
                       params.weights[:, 11] + params.bias, atol=0)


def test_logits_match_manual_matvec(featurizer):
    rng = np.random.default_rng(2)
    params = random_params(featurizer, rng)
    feats = rng.normal(size=featurizer.feature_dim)
    manual = np.array([
        sum(params.weights[v, f] * feats[f] for f in range(featurizer.feature_dim))
        + params.bias[v]
        for v in range(16)
    ])
    assert np.allclose(P.logits(params, feats), manual, atol=1e-10)


def test_logits_dimension_mismatch_rejected(featurizer):
    params = P.init_params(featurizer)
    with pytest.raises(P.PolicyConfigError):
        P.logits(params, np.zeros(featurizer.feature_dim + 1))


def test_log_prob_two_token_hand_case():
    params = P.VersionedParams(version=0, weights=np.zeros((2, 1)),
                               bias=np.array([0.0, math.log(3.0)]))
    feats = np.zeros(1)
    assert P.log_prob(params, feats, 1) == pytest.approx(math.log(0.75), abs=1e-15)
    assert P.log_prob(params, feats, 0) == pytest.approx(math.log(0.25), abs=1e-15)


def test_probabilities_normalize(featurizer):
    rng = np.random.default_rng(3)
    prompt = make_copy_prompt([7, 2, 9])
    for _ in range(100):
        params = random_params(featurizer, rng, scale=rng.uniform(0.1, 3.0))
        feats = featurizer.features(prompt, [int(t) for t in rng.integers(0, 16, 2)])
        total = np.exp(P.token_log_probs(params, feats)).sum()
        assert abs(total - 1.0) <= 1e-12


def test_sample_degenerate_peak(featurizer):
    params = P.VersionedParams(
        version=0,
        weights=np.zeros((16, featurizer.feature_dim)),
        bias=np.where(np.arange(16) == 7, 1e6, 0.0),
    )
    rng = np.random.default_rng(4)
    feats = featurizer.features(make_copy_prompt([1]), [])
    draws = [P.sample(params, feats, rng) for _ in range(1000)]
    assert all(d == 7 for d in draws)


def test_sample_uniform_frequencies(featurizer):
    params = P.init_params(featurizer)
    rng = np.random.default_rng(5)
    feats = featurizer.features(make_copy_prompt([1]), [])
    counts = np.zeros(16)
    n = 16000
    for _ in range(n):
        counts[P.sample(params, feats, rng)] += 1
    expected = n / 16
    stderr = math.sqrt(n * (1 / 16) * (15 / 16))
    assert np.all(np.abs(counts - expected) <= 4 * stderr)


def test_sample_deterministic_given_seed(featurizer):
    rng_a = np.random.default_rng(6)
    rng_b = np.random.default_rng(6)
    params = random_params(featurizer, np.random.default_rng(7))
    feats = featurizer.features(make_copy_prompt([4, 4]), [4])
    seq_a = [P.sample(params, feats, rng_a) for _ in range(50)]
    seq_b = [P.sample(params, feats, rng_b) for _ in range(50)]
    assert seq_a == seq_b


def test_sample_rejects_bad_temperature(featurizer):
    params = P.init_params(featurizer)
    feats = featurizer.features(make_copy_prompt([1]), [])
    with pytest.raises(P.PolicyConfigError):
        P.sample(params, feats, np.random.default_rng(0), temperature=0.0)


def test_grad_log_prob_uniform_residual(featurizer):
    params = P.init_params(featurizer)
    feats = featurizer.features(make_copy_prompt([9]), [])
    grad = P.grad_log_prob(params, feats, token=9)
    expected = np.full(16, -1 / 16)
    expected[9] += 1.0
    assert np.allclose(grad.bias, expected, atol=1e-12)
    assert np.allclose(grad.weights, np.outer(expected, feats), atol=1e-12)


def test_grad_log_prob_matches_finite_differences_small():
    # Coordinate-wise central differences on compact random instances.
    rng = np.random.default_rng(8)
    for _ in range(100):
        vocab, dim = int(rng.integers(3, 9)), int(rng.integers(2, 12))
        params = P.VersionedParams(
            version=0,
            weights=rng.normal(0, 1.0, size=(vocab, dim)),
            bias=rng.normal(0, 1.0, size=vocab),
        )
        feats = rng.normal(size=dim)
        token = int(rng.integers(0, vocab))
        analytic = P.grad_log_prob(params, feats, token)
        numeric = numerical_grad(lambda p: P.log_prob(p, feats, token), params)
        scale = max(numeric.global_norm(), 1e-8)
        err_w = np.max(np.abs(analytic.weights - numeric.weights))
        err_b = np.max(np.abs(analytic.bias - numeric.bias))
        assert max(err_w, err_b) / scale <= 1e-4


def test_grad_log_prob_directional_full_size(featurizer):
    rng = np.random.default_rng(9)
    prompt = make_copy_prompt([2, 8, 5])
    step = 1e-5
    for _ in range(5):
        params = random_params(featurizer, rng)
        feats = featurizer.features(prompt, [2])
        token = int(rng.integers(0, 16))
        analytic = P.grad_log_prob(params, feats, token)
        d_w = rng.normal(size=params.weights.shape)
        d_b = rng.normal(size=params.bias.shape)
        plus = P.VersionedParams(0, params.weights + step * d_w, params.bias + step * d_b)
        minus = P.VersionedParams(0, params.weights - step * d_w, params.bias - step * d_b)
        numeric = (P.log_prob(plus, feats, token) - P.log_prob(minus, feats, token)) / (2 * step)
        direct = float(np.sum(analytic.weights * d_w) + np.sum(analytic.bias * d_b))
        assert abs(numeric - direct) / max(abs(numeric), 1e-8) <= 1e-4


def test_score_function_identity(featurizer):
    rng = np.random.default_rng(10)
    prompt = make_copy_prompt([6, 6])
    for _ in range(20):
        params = random_params(featurizer, rng)
        feats = featurizer.features(prompt, [6])
        probs = np.exp(P.token_log_probs(params, feats))
        total = P.ParamGrad.zeros_like(params)
        for token in range(16):
            g = P.grad_log_prob(params, feats, token)
            g.scale_(probs[token])
            total.add_(g)
        assert total.global_norm() <= 1e-10


def test_adam_zero_gradient_is_fixed_point(featurizer):
    rng = np.random.default_rng(11)
    params = random_params(featurizer, rng)
    opt = P.AdamState.zeros_like(params)
    cfg = P.AdamConfig(weight_decay=0.0)
    out = P.apply_update(params, P.ParamGrad.zeros_like(params), opt, cfg)
    assert np.array_equal(out.weights, params.weights)
    assert np.array_equal(out.bias, params.bias)
    assert out.version == params.version


def test_adam_steady_state_step_size_approaches_lr():
    params = P.VersionedParams(0, np.zeros((1, 1)), np.zeros(1))
    opt = P.AdamState.zeros_like(params)
    cfg = P.AdamConfig(lr=1e-3, weight_decay=0.0)
    grad = P.ParamGrad(np.array([[0.5]]), np.zeros(1))
    prev = params.weights[0, 0]
    for _ in range(500):
        params = P.apply_update(params, grad, opt, cfg)
    delta = params.weights[0, 0] - prev
    # 500 steps at the steady-state magnitude lr, in the -sign(g) direction.
    assert delta < 0
    assert abs(abs(delta) / 500 - cfg.lr) / cfg.lr <= 1e-2


def test_gradient_clipped_to_unit_global_norm(featurizer):
    params = P.init_params(featurizer)
    raw = P.ParamGrad.zeros_like(params)
    raw.bias[:4] = 5.0  # norm 10
    assert raw.global_norm() == pytest.approx(10.0)
    clipped, norm = P.clip_by_global_norm(raw, 1.0)
    assert norm == pytest.approx(10.0)
    assert clipped.global_norm() == pytest.approx(1.0, abs=1e-12)


def test_non_finite_gradient_aborts(featurizer):
    params = P.init_params(featurizer)
    opt = P.AdamState.zeros_like(params)
    bad = P.ParamGrad.zeros_like(params)
    bad.weights[0, 0] = np.nan
    with pytest.raises(P.NonFiniteGradientError):
        P.apply_update(params, bad, opt)


def test_params_are_immutable_snapshots(featurizer):
    params = P.init_params(featurizer)
    with pytest.raises(ValueError):
        params.weights[0, 0] = 1.0


def test_params_serialization_roundtrip(tmp_path, featurizer):
    rng = np.random.default_rng(12)
    params = random_params(featurizer, rng, version=42)
    path = tmp_path / "params.npz"
    P.save_params(path, params)
    loaded = P.load_params(path)
    assert loaded.version == 42
    assert np.array_equal(loaded.weights, params.weights)
    assert np.array_equal(loaded.bias, params.bias)


def test_featurizer_blocks(featurizer):
    prompt = make_copy_prompt([3, 1])
    vocab = 16
    slot = vocab + 1

    feats = featurizer.features(prompt, [])
    assert feats[3] == 1.0  # aligned payload digit at position 0
    for k in range(4):  # window empty -> padding slot everywhere
        assert feats[slot + k * slot + vocab] == 1.0
    assert feats[slot * 5 + 3 * 10 + 1] == 1.0  # digit pair (3, 1)
    assert feats.sum() == 6.0  # one active index per block

    feats = featurizer.features(prompt, [3])
    assert feats[1] == 1.0  # aligned moves to payload[1]
    assert feats[slot + 3] == 1.0  # most recent generated token

    feats = featurizer.features(prompt, [3, 1])
    assert feats[vocab] == 1.0  # past payload end

    # Pure function of the token sequence.
    a = featurizer.features(prompt, [3, 1, EOS_TOKEN])
    b = featurizer.features(prompt, [3, 1, EOS_TOKEN])
    assert np.array_equal(a, b)
