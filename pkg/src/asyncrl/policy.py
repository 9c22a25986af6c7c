"""Linear-softmax token policy with exact log-probabilities and gradients.

The policy maps a deterministic feature vector of the decoding context to
vocabulary logits through a single dense layer. Everything is float64 and
analytically differentiable, so gradient checks against finite differences
are exact to rounding.

Context features are a pure function of ``(prompt, generated prefix)``:

* an *alignment* block: one-hot of the payload digit at the current output
  position, or a dedicated past-end slot once the payload is exhausted
  (this makes copying and EOS timing linearly expressible);
* a *window* block: one-hot of each of the last ``window`` generated
  tokens, with a padding slot before the sequence starts;
* a *digit-pair* block: joint one-hot over the first two payload digits,
  which makes modular arithmetic on the payload linearly expressible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tasks import Prompt

PAIR_DIGITS = 10


class PolicyConfigError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient with NaN/inf entries reaches the optimizer."""


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 16
    window: int = 4

    def __post_init__(self):
        if self.vocab_size < 2:
            raise PolicyConfigError("vocab_size must be >= 2")
        if self.window < 1:
            raise PolicyConfigError("window must be >= 1")


class ContextFeaturizer:
    """Deterministic featurization of a decoding position.

    No state is carried across calls or weight updates; the feature vector
    depends only on the token sequence.
    """

    def __init__(self, config: PolicyConfig = PolicyConfig()):
        self.config = config
        v = config.vocab_size
        # Per-slot one-hot width is vocab+1: the extra index encodes
        # "no token here" (past payload end / before generation start).
        self._slot = v + 1
        self._align_off = 0
        self._window_off = self._slot
        self._pair_off = self._slot * (1 + config.window)
        self.feature_dim = self._pair_off + PAIR_DIGITS * PAIR_DIGITS

    def features(self, prompt: Prompt, generated) -> np.ndarray:
        cfg = self.config
        out = np.zeros(self.feature_dim)
        payload = prompt.payload
        pos = len(generated)
        aligned = payload[pos] if pos < len(payload) else cfg.vocab_size
        out[self._align_off + aligned] = 1.0
        for k in range(cfg.window):
            idx = pos - 1 - k
            tok = generated[idx] if idx >= 0 else cfg.vocab_size
            out[self._window_off + k * self._slot + tok] = 1.0
        if len(payload) >= 2 and payload[0] < PAIR_DIGITS and payload[1] < PAIR_DIGITS:
            out[self._pair_off + payload[0] * PAIR_DIGITS + payload[1]] = 1.0
        return out


@dataclass(frozen=True)
class VersionedParams:
    """Immutable policy snapshot tagged with a monotone version."""

    version: int
    weights: np.ndarray  # (vocab, feature_dim)
    bias: np.ndarray  # (vocab,)

    def __post_init__(self):
        if self.version < 0:
            raise PolicyConfigError("version must be non-negative")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise PolicyConfigError("weights must be (vocab, features), bias (vocab,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise PolicyConfigError("parameters must be finite")
        self.weights.setflags(write=False)
        self.bias.setflags(write=False)


def init_params(featurizer: ContextFeaturizer, version: int = 0) -> VersionedParams:
    """Zero initialization: every context starts at the uniform softmax."""
    v = featurizer.config.vocab_size
    return VersionedParams(
        version=version,
        weights=np.zeros((v, featurizer.feature_dim)),
        bias=np.zeros(v),
    )


@dataclass
class ParamGrad:
    weights: np.ndarray
    bias: np.ndarray

    @staticmethod
    def zeros_like(params: VersionedParams) -> "ParamGrad":
        return ParamGrad(np.zeros_like(params.weights), np.zeros_like(params.bias))

    def add_(self, other: "ParamGrad") -> None:
        self.weights += other.weights
        self.bias += other.bias

    def scale_(self, factor: float) -> None:
        self.weights *= factor
        self.bias *= factor

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights**2) + np.sum(self.bias**2)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias)))


def logits(params: VersionedParams, features: np.ndarray) -> np.ndarray:
    if features.shape[-1] != params.weights.shape[1]:
        raise PolicyConfigError(
            f"feature dim {features.shape[-1]} != weights dim {params.weights.shape[1]}"
        )
    return params.weights @ features + params.bias


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def token_log_probs(params: VersionedParams, features: np.ndarray) -> np.ndarray:
    """Log-probabilities of every token at one context."""
    return log_softmax(logits(params, features))


def log_prob(params: VersionedParams, features: np.ndarray, token: int) -> float:
    return float(token_log_probs(params, features)[token])


def batch_token_log_probs(params: VersionedParams, features: np.ndarray,
                          tokens: np.ndarray) -> np.ndarray:
    """Vectorized ``log_prob`` across rows of a (n, features) matrix."""
    all_lp = log_softmax(features @ params.weights.T + params.bias)
    return all_lp[np.arange(len(tokens)), tokens]


def sample(params: VersionedParams, features: np.ndarray, rng: np.random.Generator,
           temperature: float = 1.0) -> int:
    """Draw one token from softmax(logits / temperature)."""
    if temperature <= 0:
        raise PolicyConfigError(f"temperature must be positive, got {temperature}")
    lp = log_softmax(logits(params, features) / temperature)
    return int(rng.choice(len(lp), p=np.exp(lp)))


def greedy_token(params: VersionedParams, features: np.ndarray) -> int:
    return int(np.argmax(logits(params, features)))


def grad_log_prob(params: VersionedParams, features: np.ndarray, token: int) -> ParamGrad:
    """Analytic score function: (one_hot(token) - softmax) outer features."""
    residual = -np.exp(token_log_probs(params, features))
    residual[token] += 1.0
    return ParamGrad(weights=np.outer(residual, features), bias=residual)


@dataclass(frozen=True)
class AdamConfig:
    # Learning rate is a desk-scale default pinned by baseline runs; the
    # remaining values are the usual large-model PPO settings.
    lr: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-5
    weight_decay: float = 0.05
    clip_norm: float = 1.0


@dataclass
class AdamState:
    m_weights: np.ndarray
    v_weights: np.ndarray
    m_bias: np.ndarray
    v_bias: np.ndarray
    step: int = 0

    @staticmethod
    def zeros_like(params: VersionedParams) -> "AdamState":
        return AdamState(
            m_weights=np.zeros_like(params.weights),
            v_weights=np.zeros_like(params.weights),
            m_bias=np.zeros_like(params.bias),
            v_bias=np.zeros_like(params.bias),
        )


def clip_by_global_norm(grad: ParamGrad, max_norm: float) -> tuple[ParamGrad, float]:
    """Scale the gradient so its global norm is at most ``max_norm``."""
    norm = grad.global_norm()
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grad = ParamGrad(grad.weights * factor, grad.bias * factor)
    return grad, norm


def apply_update(params: VersionedParams, grad: ParamGrad, opt: AdamState,
                 config: AdamConfig = AdamConfig()) -> VersionedParams:
    """One Adam step with decoupled weight decay.

    The gradient is clipped to ``clip_norm`` (global norm) before the moment
    update. ``opt`` is mutated in place; the returned snapshot keeps the
    incoming version, since tagging a new version is the trainer's job and
    publishing it is the controller's.
    """
    if not grad.is_finite():
        raise NonFiniteGradientError(
            f"non-finite gradient at optimizer step {opt.step + 1}: "
            f"|w|_nan={int(np.isnan(grad.weights).sum())}, "
            f"|b|_nan={int(np.isnan(grad.bias).sum())}"
        )
    grad, _ = clip_by_global_norm(grad, config.clip_norm)
    opt.step += 1
    b1, b2 = config.beta1, config.beta2
    opt.m_weights = b1 * opt.m_weights + (1 - b1) * grad.weights
    opt.v_weights = b2 * opt.v_weights + (1 - b2) * grad.weights**2
    opt.m_bias = b1 * opt.m_bias + (1 - b1) * grad.bias
    opt.v_bias = b2 * opt.v_bias + (1 - b2) * grad.bias**2
    corr1 = 1 - b1**opt.step
    corr2 = 1 - b2**opt.step
    lr, wd = config.lr, config.weight_decay
    new_w = params.weights - lr * (
        (opt.m_weights / corr1) / (np.sqrt(opt.v_weights / corr2) + config.eps)
        + wd * params.weights
    )
    new_b = params.bias - lr * (
        (opt.m_bias / corr1) / (np.sqrt(opt.v_bias / corr2) + config.eps)
        + wd * params.bias
    )
    return replace(params, weights=new_w, bias=new_b)


def save_params(path, params: VersionedParams) -> None:
    """Serialize a snapshot (version header + flat arrays)."""
    np.savez(path, version=np.array(params.version), weights=params.weights,
             bias=params.bias)


def load_params(path) -> VersionedParams:
    with np.load(path) as data:
        return VersionedParams(
            version=int(data["version"]),
            weights=data["weights"].copy(),
            bias=data["bias"].copy(),
        )
