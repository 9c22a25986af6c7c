import numpy as np
import pytest

from asyncrl import policy as P
from asyncrl.tasks import SEP_TOKEN, Prompt


@pytest.fixture
def featurizer():
    return P.ContextFeaturizer(P.PolicyConfig())


def make_copy_prompt(payload, prompt_id=0):
    return Prompt(id=prompt_id, tokens=tuple(payload) + (SEP_TOKEN,),
                  task_kind="copy", target=tuple(payload))


def random_params(featurizer, rng, scale=0.5, version=0):
    v = featurizer.config.vocab_size
    return P.VersionedParams(
        version=version,
        weights=rng.normal(0, scale, size=(v, featurizer.feature_dim)),
        bias=rng.normal(0, scale, size=v),
    )


def numerical_grad(fn, params, step=1e-5):
    """Coordinate-wise central finite difference of a scalar function of
    VersionedParams."""
    grad_w = np.zeros_like(params.weights)
    grad_b = np.zeros_like(params.bias)
    w = params.weights.copy()
    b = params.bias.copy()

    def at(weights, bias):
        return fn(P.VersionedParams(params.version, weights, bias))

    for idx in np.ndindex(w.shape):
        delta = np.zeros_like(w)
        delta[idx] = step
        grad_w[idx] = (at(w + delta, b) - at(w - delta, b)) / (2 * step)
    for i in range(b.size):
        delta = np.zeros_like(b)
        delta[i] = step
        grad_b[i] = (at(w, b + delta) - at(w, b - delta)) / (2 * step)
    return P.ParamGrad(grad_w, grad_b)
