import numpy as np
import pytest

from metaboot import autodiff as ad
from metaboot.matching import (
    KINDS,
    MatchingFunction,
    kl_divergence,
    l2_params,
    policy_divergence,
    symmetric_kl,
    value_l2,
)


def _logp(graph, rng, shape=(6, 4), requires_grad=False):
    logits = rng.standard_normal(shape)
    logits -= np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    return graph.leaf("", logits, requires_grad)


def test_kl_is_zero_on_identical_and_positive_otherwise(graph, rng):
    p = _logp(graph, rng)
    q = _logp(graph, rng)
    assert abs(float(kl_divergence(p, p).value)) < 1e-12
    assert float(kl_divergence(p, q).value) > 0.0


def test_kl_directions_differ_and_symmetric_averages(graph, rng):
    p = _logp(graph, rng)
    q = _logp(graph, rng)
    forward = float(kl_divergence(p, q).value)
    backward = float(kl_divergence(q, p).value)
    assert not np.isclose(forward, backward)
    assert np.isclose(float(symmetric_kl(p, q).value), 0.5 * (forward + backward))
    assert np.isclose(float(policy_divergence("kl_target_first", p, q).value), forward)
    assert np.isclose(float(policy_divergence("kl_online_first", p, q).value), backward)


def test_policy_divergence_rejects_non_policy_kind(graph, rng):
    p = _logp(graph, rng)
    with pytest.raises(ValueError):
        policy_divergence("l2_params", p, p)


def test_gradient_flows_into_online_side_only(graph, rng):
    target = _logp(graph, rng)
    online = _logp(graph, rng, requires_grad=True)
    loss = kl_divergence(target, online)
    assert ad.has_gradient_path(loss, online)
    assert not target.requires_grad


def test_l2_and_value_matching(graph):
    t = [graph.constant(np.array([1.0, 2.0])), graph.constant(np.array([[0.0]]))]
    o = [graph.leaf("a", np.array([0.0, 0.0])), graph.leaf("b", np.array([[3.0]]))]
    assert float(l2_params(t, o).value) == pytest.approx(1.0 + 4.0 + 9.0)
    assert float(value_l2(graph.constant(np.array([1.0, 1.0])), graph.leaf("v", np.array([0.0, 3.0]))).value) == 2.5
    with pytest.raises(ValueError):
        l2_params([], [])


@pytest.mark.parametrize("kind", KINDS)
def test_matching_function_kinds(kind):
    mu = MatchingFunction(kind)
    assert mu.needs_values == (kind in ("value_l2", "policy_plus_value"))


def test_matching_function_validation():
    with pytest.raises(ValueError):
        MatchingFunction("kl_backwards")
    with pytest.raises(ValueError):
        MatchingFunction("policy_plus_value", lambda_v=-1.0)
