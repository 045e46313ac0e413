import numpy as np
import pytest
from scipy.stats import chisquare

from metaboot import autodiff as ad
from metaboot.gradcheck import small_learner, synthetic_rollouts
from metaboot.learners import (
    QLambdaLearner,
    Rollout,
    Transition,
    actor_critic_loss,
    collect_rollout,
    epsilon_greedy,
    inner_loop,
    nstep_returns,
    nstep_returns_np,
    peng_returns,
    q_lambda_loss,
    q_lambda_step,
    sample_action,
    unroll_on_rollouts,
)
from metaboot.models import MLPSpec, MetaStats, as_leaves, init_mlp_arrays, softmax_np
from metaboot.optim import InnerOptimState
from metaboot.TwoColorsEnv import N_ACTIONS, OBS_DIM, reset


def test_nstep_returns_truncate_at_rollout_end():
    out = nstep_returns_np(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 0.0, 10.0]), 0.5, 2)
    assert np.allclose(out, [2.0, 6.0, 8.0])


def test_nstep_return_of_constant_reward():
    out = nstep_returns_np(np.ones(3), np.zeros(4), 0.99, 3)
    assert out[0] == pytest.approx(2.9701)


def test_nstep_returns_validation(graph, rng):
    rollout = synthetic_rollouts(rng, 1, 4)[0]
    with pytest.raises(ValueError):
        nstep_returns(rollout, np.zeros(5), 1.0, 2)
    with pytest.raises(ValueError):
        nstep_returns(rollout, np.zeros(4), 0.9, 2)
    with pytest.raises(ValueError):
        nstep_returns(rollout, np.zeros(5), 0.9, 0)


def test_rollout_consistency():
    with pytest.raises(ValueError):
        Rollout(np.zeros((3, OBS_DIM)), np.zeros(3, dtype=np.int64), np.zeros(3), 0)


def test_collect_rollout(rng):
    state, _ = reset(0)
    nxt, rollout = collect_rollout(lambda o: np.full(N_ACTIONS, 0.25), state, 8, rng)
    assert rollout.n == 8
    assert rollout.states.shape == (9, OBS_DIM)
    assert rollout.start_env_step == 0
    assert nxt.step_count == 8
    assert np.allclose(rollout.behaviour, 0.25)


def test_sample_action_follows_distribution(rng):
    assert sample_action(np.array([0.0, 0.0, 1.0, 0.0]), rng) == 2
    draws = [sample_action(np.array([0.5, 0.5, 0.0, 0.0]), rng) for _ in range(200)]
    assert set(draws) == {0, 1}


@pytest.mark.parametrize("probs", [
    np.full(N_ACTIONS, 0.25),
    epsilon_greedy(np.array([1.0, 3.0, 2.0, 0.0]), 0.2),
    softmax_np(np.array([0.5, -1.0, 2.0, 0.0])),
])
def test_sampled_action_frequencies(probs):
    rng = np.random.default_rng(99)
    n = 100_000
    counts = np.bincount([sample_action(probs, rng) for _ in range(n)], minlength=N_ACTIONS)
    assert chisquare(counts, probs * n).pvalue > 0.01


def test_uniform_policy_entropy_term(graph, rng):
    learner = small_learner()
    x = [np.zeros_like(a) for a in init_mlp_arrays(learner.pi_spec, rng)]
    z = init_mlp_arrays(learner.v_spec, rng)
    rollout = synthetic_rollouts(rng, 1)[0]
    terms = learner.terms(as_leaves(learner.pi_spec, x, "x"), as_leaves(learner.v_spec, z, "z"), rollout)
    assert np.isclose(float(terms.en.value), -np.log(N_ACTIONS))
    assert float(terms.td.value) >= 0.0


def _ac_nodes(learner, rng):
    x = as_leaves(learner.pi_spec, init_mlp_arrays(learner.pi_spec, rng), "x")
    z = as_leaves(learner.v_spec, init_mlp_arrays(learner.v_spec, rng), "z")
    w = as_leaves(learner.meta_spec, init_mlp_arrays(learner.meta_spec, rng), "w")
    return x, z, w


def test_recorded_inner_loop_is_differentiable_in_w(graph, rng):
    learner = small_learner()
    x, z, w = _ac_nodes(learner, rng)
    stats = MetaStats(len(w[0].value))
    state, _ = reset(0)
    res = inner_loop(learner, x, z, state, w, 3, 5, stats, rng)
    assert len(res.trace) == 3
    assert res.state.step_count == 15
    assert stats.vector()[-1] == pytest.approx(res.rollout.mean_reward)
    assert ad.has_gradient_path(ad.sum(res.x[0]), w[0])
    assert all(0.0 < e < 1.0 for e in res.epsilons)


def test_unrecorded_inner_loop_detaches(graph, rng):
    learner = small_learner()
    x, z, w = _ac_nodes(learner, rng)
    state, _ = reset(0)
    res = inner_loop(learner, x, z, state, None, 2, 4, MetaStats(4), rng, fixed_epsilon=0.1, record=False)
    assert not ad.has_gradient_path(ad.sum(res.x[0]), w[0])
    assert res.epsilons == [0.1, 0.1]
    with pytest.raises(ValueError):
        inner_loop(learner, x, z, state, None, 0, 4, MetaStats(4), rng)


def test_unroll_on_rollouts_leaves_stats_alone(graph, rng):
    learner = small_learner()
    x, z, w = _ac_nodes(learner, rng)
    stats = MetaStats(4, np.arange(4.0))
    trace = unroll_on_rollouts(learner, x, z, w, synthetic_rollouts(rng, 2), stats)
    assert len(trace) == 2
    assert stats.vector().tolist() == [0.0, 1.0, 2.0, 3.0]


def test_epsilon_greedy():
    probs = epsilon_greedy(np.array([1.0, 3.0, 2.0]), 0.3)
    assert np.allclose(probs, [0.1, 0.8, 0.1])
    assert np.allclose(epsilon_greedy(np.array([1.0, 3.0, 2.0, 0.0]), 0.2), [0.05, 0.85, 0.05, 0.05])
    tie = epsilon_greedy(np.array([[2.0, 2.0]]), 0.0)
    assert tie.tolist() == [[1.0, 0.0]]
    with pytest.raises(ValueError):
        epsilon_greedy(np.zeros(3), 1.5)


def test_peng_returns_limits():
    r = np.array([1.0, 0.0, 2.0])
    maxq = np.array([3.0, 4.0, 5.0])
    assert np.allclose(peng_returns(r, maxq, 0.5, 0.0), r + 0.5 * maxq)
    # lam = 1: discounted rewards plus a bootstrap on the last maxq
    assert np.isclose(peng_returns(r, maxq, 0.5, 1.0)[0], 1.0 + 0.5 * 0.0 + 0.25 * 2.0 + 0.125 * 5.0)


def test_q_lambda_updates_once_window_is_full(rng):
    spec = MLPSpec(OBS_DIM, 1, 8, N_ACTIONS)
    params = init_mlp_arrays(spec, rng)
    learner = QLambdaLearner(spec, params, InnerOptimState.create("sgd", params, 0.1), window=3)
    rollout = synthetic_rollouts(rng, 1, 5)[0]
    updated = []
    for t in range(rollout.n):
        updated.append(learner.observe(Transition(rollout.states[t], int(rollout.actions[t]),
                                                  float(rollout.rewards[t]), rollout.states[t + 1])))
    assert updated == [False, False, True, True, True]
    assert any(not np.array_equal(a, b) for a, b in zip(params, learner.params))
    assert np.allclose(learner.act_probs(rollout.states[0], 0.0).sum(), 1.0)


def test_actor_critic_loss_weights_the_terms(graph, rng):
    learner = small_learner()
    x, z, _ = _ac_nodes(learner, rng)
    rollout = synthetic_rollouts(rng, 1)[0]
    t = learner.terms(x, z, rollout)
    loss = actor_critic_loss(learner, x, z, rollout, 1.0, 0.5, 2.0)
    expected = float(t.pg.value) + 0.5 * float(t.en.value) + 2.0 * float(t.td.value)
    assert np.isclose(float(loss.value), expected)
    assert np.isclose(float(learner.loss(x, z, rollout, 0.5).value),
                      float(t.pg.value) + 0.5 * float(t.en.value) + float(t.td.value))


def test_q_lambda_step_lowers_the_oldest_td_error(rng):
    spec = MLPSpec(OBS_DIM, 1, 8, N_ACTIONS)
    params = init_mlp_arrays(spec, rng)
    rollout = synthetic_rollouts(rng, 1, 4)[0]
    buffer = [Transition(rollout.states[t], int(rollout.actions[t]), float(rollout.rewards[t]),
                         rollout.states[t + 1]) for t in range(rollout.n)]
    with ad.Graph("before") as g:
        before = float(q_lambda_loss(spec, as_leaves(spec, params, "q", graph=g), buffer, params, 0.9, 0.7).value)
    new = q_lambda_step(spec, params, InnerOptimState.create("sgd", params, 1e-2), buffer, 0.7, 0.9)
    with ad.Graph("after") as g:
        after = float(q_lambda_loss(spec, as_leaves(spec, new, "q", graph=g), buffer, params, 0.9, 0.7).value)
    assert after < before
    with pytest.raises(ValueError):
        q_lambda_step(spec, params, InnerOptimState.create("sgd", params, 1e-2), [], 0.7, 0.9)
