"""Inner-loop RL machinery: rollouts, the actor-critic objective, the
K-step inner loop and the online Peng's Q(lambda) learner."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .base import NumericError
from .models import (
    MLPSpec,
    MetaStats,
    meta_forward,
    policy_log_probs,
    policy_probs_np,
    q_forward,
    q_values_np,
    value_forward,
)
from .optim import InnerOptimState, differentiable_sgd
from .TwoColorsEnv import N_ACTIONS, EnvState, TrajectoryWriter, encode_obs, step as env_step

_LOGGER = logging.getLogger("learners")

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Rollout:
    """N-step trajectory s0, a0, r1, s1, ..., rN, sN.

    behaviour holds the action distribution each action was sampled from.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    start_env_step: int
    behaviour: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.actions)
        if n < 1 or len(self.rewards) != n or len(self.states) != n + 1:
            raise ValueError(
                f"inconsistent rollout: {len(self.states)} states, {n} actions, {len(self.rewards)} rewards"
            )

    @property
    def n(self) -> int:
        return len(self.actions)

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def collect_rollout(policy: Policy, state: EnvState, n: int, rng: np.random.Generator,
                    recorder: Optional[TrajectoryWriter] = None) -> Tuple[EnvState, Rollout]:
    """Run ``policy`` for ``n`` environment steps starting from ``state``."""
    if n < 1:
        raise ValueError("rollout length must be >= 1")

    start = state.step_count
    obs = encode_obs(state)
    states = [obs]
    actions = np.zeros(n, dtype=np.int64)
    rewards = np.zeros(n)
    behaviour = np.zeros((n, N_ACTIONS))
    for t in range(n):
        probs = policy(obs)
        a = sample_action(probs, rng)
        state, obs, r = env_step(state, a)
        if recorder is not None:
            recorder.write(state, a, r)
        states.append(obs)
        actions[t] = a
        rewards[t] = r
        behaviour[t] = probs
    return state, Rollout(np.stack(states), actions, rewards, start, behaviour)


def nstep_returns_np(rewards: np.ndarray, bootstrap: np.ndarray, gamma: float, n: int) -> np.ndarray:
    """G_t = sum_{i<k} gamma^i r_{t+i} + gamma^k v(s_{t+k}), k = min(n, N - t).

    ``bootstrap`` holds values for all N + 1 states.
    """
    N = len(rewards)
    out = np.zeros(N)
    for t in range(N):
        k = min(n, N - t)
        g = 0.0
        for i in range(k):
            g += gamma ** i * rewards[t + i]
        out[t] = g + gamma ** k * bootstrap[t + k]
    return out


def nstep_returns(rollout: Rollout, bootstrap_values: Union[Node, np.ndarray], gamma: float, n: int) -> Node:
    """n-step targets from a frozen critic; the bootstrap never carries gradient."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    if isinstance(bootstrap_values, Node):
        frozen = ad.stop_gradient(bootstrap_values)
        graph = frozen.graph
        boot = frozen.value
    else:
        graph = ad.current_graph()
        boot = np.asarray(bootstrap_values, dtype=np.float64)
    if boot.shape != (rollout.n + 1,):
        raise ValueError(f"bootstrap values must have shape ({rollout.n + 1},), got {boot.shape}")
    return graph.constant(nstep_returns_np(rollout.rewards, boot, gamma, n))


@dataclass(frozen=True)
class LossTerms:
    pg: Node
    en: Node
    td: Node


@dataclass
class ActorCriticLearner:
    """Network shapes and fixed hyperparameters of the inner actor-critic."""
    pi_spec: MLPSpec
    v_spec: MLPSpec
    meta_spec: Optional[MLPSpec] = None
    gamma: float = 0.99
    n_step: int = 16
    lr: float = 0.1
    eps_pg: float = 1.0
    eps_td: float = 1.0

    def terms(self, x: Sequence[Node], z: Sequence[Node], rollout: Rollout,
              zbar: Optional[Sequence[Node]] = None) -> LossTerms:
        return actor_critic_terms(self, x, z, rollout, zbar)

    def loss(self, x: Sequence[Node], z: Sequence[Node], rollout: Rollout,
             eps_en: Union[Node, float], zbar: Optional[Sequence[Node]] = None) -> Node:
        return actor_critic_loss(self, x, z, rollout, self.eps_pg, eps_en, self.eps_td, zbar)


def actor_critic_terms(learner: ActorCriticLearner, x: Sequence[Node], z: Sequence[Node],
                       rollout: Rollout, zbar: Optional[Sequence[Node]] = None) -> LossTerms:
    graph = x[0].graph
    N = rollout.n
    states = graph.constant(rollout.states)
    values = value_forward(learner.v_spec, z, states)
    boot = values if zbar is None else value_forward(learner.v_spec, zbar, states)
    G = nstep_returns(rollout, boot, learner.gamma, learner.n_step)
    v = ad.slice_(values, slice(0, N))

    logp = policy_log_probs(learner.pi_spec, x, ad.slice_(states, slice(0, N)))
    onehot = graph.constant(np.eye(N_ACTIONS)[rollout.actions])
    logp_a = ad.sum(logp * onehot, axis=-1)
    adv = ad.stop_gradient(G - v)

    pg = -ad.mean(logp_a * adv)
    en = ad.mean(ad.sum(ad.exp(logp) * logp, axis=-1))
    td = 0.5 * ad.mean(ad.square(G - v))
    return LossTerms(pg, en, td)


def actor_critic_loss(learner: ActorCriticLearner, x: Sequence[Node], z: Sequence[Node], rollout: Rollout,
                      eps_pg: float, eps_en: Union[Node, float], eps_td: float,
                      zbar: Optional[Sequence[Node]] = None) -> Node:
    """eps_pg * l_PG + eps_en * l_EN + eps_td * l_TD, each averaged over the rollout."""
    t = actor_critic_terms(learner, x, z, rollout, zbar)
    return eps_pg * t.pg + eps_en * t.en + eps_td * t.td


def _check_finite(where: str, node: Node) -> None:
    if not np.all(np.isfinite(node.value)):
        raise NumericError(where, f"value {node.value!r}")


def sgd_update(params: Sequence[Node], loss: Node, lr: float, create_graph: bool,
               names: Optional[Sequence[str]] = None) -> List[Node]:
    """One SGD step on ``loss``.

    With ``create_graph`` the new parameters are graph functions of whatever
    ``loss`` depends on; otherwise they are fresh leaves.
    """
    grads = ad.grad(loss, list(params), create_graph=create_graph)
    if create_graph:
        return differentiable_sgd(params, grads, lr)
    graph = loss.graph
    names = names or [p.name for p in params]
    return [graph.leaf(nm, p.value - lr * g.value) for nm, p, g in zip(names, params, grads)]


def inner_update(learner: ActorCriticLearner, x: Sequence[Node], z: Sequence[Node], rollout: Rollout,
                 eps_en: Union[Node, float], create_graph: bool) -> Tuple[List[Node], List[Node], Node]:
    loss = learner.loss(x, z, rollout, eps_en)
    _check_finite("actor_critic_loss", loss)
    params = list(x) + list(z)
    names = learner.pi_spec.param_names("x") + learner.v_spec.param_names("z")
    new = sgd_update(params, loss, learner.lr, create_graph, names)
    return new[:len(x)], new[len(x):], loss


@dataclass
class TraceEntry:
    """One inner step: the rollout it used and the parameters after the update."""
    rollout: Rollout
    x: List[Node]
    z: List[Node]
    epsilon: Node


@dataclass
class InnerLoopResult:
    x: List[Node]
    z: List[Node]
    state: EnvState
    rollout: Rollout
    trace: List[TraceEntry] = field(default_factory=list)

    @property
    def epsilons(self) -> List[float]:
        return [float(e.epsilon.value) for e in self.trace]


def entropy_weight(learner: ActorCriticLearner, w: Optional[Sequence[Node]], stats: MetaStats,
                   fixed_epsilon: Optional[float], graph: ad.Graph) -> Node:
    if fixed_epsilon is not None:
        return graph.constant(fixed_epsilon)
    if w is None or learner.meta_spec is None:
        raise ValueError("meta-learned entropy weight needs meta parameters and a meta spec")
    return meta_forward(learner.meta_spec, w, stats)


def inner_loop(learner: ActorCriticLearner, x: Sequence[Node], z: Sequence[Node], state: EnvState,
               w: Optional[Sequence[Node]], K: int, N: int, stats: MetaStats, rng: np.random.Generator,
               fixed_epsilon: Optional[float] = None, record: bool = True,
               recorder: Optional[TrajectoryWriter] = None) -> InnerLoopResult:
    """K alternations of rollout collection and one SGD step.

    With ``record`` every update stays on the graph, so the final iterate
    (and each traced iterate) is differentiable with respect to ``w``.
    ``stats`` is advanced in place with each rollout's mean reward.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    x, z = list(x), list(z)
    graph = x[0].graph
    trace: List[TraceEntry] = []
    rollout: Optional[Rollout] = None
    for _ in range(K):
        x_np = [p.value for p in x]
        state, rollout = collect_rollout(
            lambda o: policy_probs_np(learner.pi_spec, x_np, o), state, N, rng, recorder)
        stats.push(rollout.mean_reward)
        eps = entropy_weight(learner, w, stats, fixed_epsilon, graph)
        x, z, _ = inner_update(learner, x, z, rollout, eps, create_graph=record)
        trace.append(TraceEntry(rollout, x, z, eps))
    assert rollout is not None
    return InnerLoopResult(x, z, state, rollout, trace)


def unroll_on_rollouts(learner: ActorCriticLearner, x: Sequence[Node], z: Sequence[Node],
                       w: Optional[Sequence[Node]], rollouts: Sequence[Rollout], stats: MetaStats,
                       fixed_epsilon: Optional[float] = None) -> List[TraceEntry]:
    """Replay the inner loop on pre-collected rollouts, one update each.

    The statistics window is copied, so ``stats`` is left untouched.
    """
    x, z = list(x), list(z)
    graph = x[0].graph
    stats = stats.copy()
    trace: List[TraceEntry] = []
    for rollout in rollouts:
        stats.push(rollout.mean_reward)
        eps = entropy_weight(learner, w, stats, fixed_epsilon, graph)
        x, z, _ = inner_update(learner, x, z, rollout, eps, create_graph=True)
        trace.append(TraceEntry(rollout, x, z, eps))
    return trace


# ---------------------------------------------------------------------------
# epsilon-greedy Q(lambda)

def epsilon_greedy(qvals: np.ndarray, eps: float) -> np.ndarray:
    """Argmax gets 1 - eps + eps/A, the rest eps/A; lowest index wins ties."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {eps}")
    qvals = np.asarray(qvals, dtype=np.float64)
    n = qvals.shape[-1]
    probs = np.full(qvals.shape, eps / n)
    idx = np.argmax(qvals, axis=-1)
    if qvals.ndim == 1:
        probs[idx] += 1.0 - eps
    else:
        probs[np.arange(qvals.shape[0]), idx] += 1.0 - eps
    return probs


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray


def peng_returns(rewards: np.ndarray, next_max_q: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Truncated forward-view Peng's Q(lambda) returns over one window.

    G_i = r_i + gamma * ((1 - lam) * maxq_i + lam * G_{i+1}); the last
    element bootstraps fully on maxq.
    """
    W = len(rewards)
    out = np.zeros(W)
    out[W - 1] = rewards[W - 1] + gamma * next_max_q[W - 1]
    for i in range(W - 2, -1, -1):
        out[i] = rewards[i] + gamma * ((1.0 - lam) * next_max_q[i] + lam * out[i + 1])
    return out


def q_lambda_loss(spec: MLPSpec, x: Sequence[Node], window: Sequence[Transition],
                  target_params: Sequence[np.ndarray], gamma: float, lam: float) -> Node:
    """Half squared TD error on the oldest transition of the window."""
    next_obs = np.stack([t.next_obs for t in window])
    next_max = q_values_np(spec, target_params, next_obs).max(axis=-1)
    rewards = np.array([t.reward for t in window])
    G = float(peng_returns(rewards, next_max, gamma, lam)[0])
    oldest = window[0]
    q = q_forward(spec, x, oldest.obs)
    q_a = ad.slice_(q, oldest.action)
    return 0.5 * ad.square(G - q_a)


def q_lambda_step(spec: MLPSpec, x: Sequence[np.ndarray], optim: InnerOptimState,
                  buffer: Sequence[Transition], lam: float, gamma: float) -> List[np.ndarray]:
    """One online Q(lambda) update; returns new parameter arrays."""
    if not buffer:
        raise ValueError("transition buffer is empty")
    with ad.Graph("q-lambda") as g:
        leaves = [g.leaf(nm, arr) for nm, arr in zip(spec.param_names("q"), x)]
        loss = q_lambda_loss(spec, leaves, list(buffer), x, gamma, lam)
        _check_finite("q_lambda_loss", loss)
        grads = [gr.value for gr in ad.grad(loss, leaves)]
    return optim.step(x, grads)


class QLambdaLearner:
    """Online Q(lambda) agent: keeps the window and applies one update per step
    once the window is full."""

    def __init__(self, spec: MLPSpec, params: List[np.ndarray], optim: InnerOptimState,
                 gamma: float = 0.99, lam: float = 0.7, window: int = 16) -> None:
        if window < 1:
            raise ValueError("window must be >= 1")
        self.spec = spec
        self.params = params
        self.optim = optim
        self.gamma = gamma
        self.lam = lam
        self.buffer: Deque[Transition] = deque(maxlen=window)

    def act_probs(self, obs: np.ndarray, eps: float) -> np.ndarray:
        return epsilon_greedy(q_values_np(self.spec, self.params, obs), eps)

    def observe(self, transition: Transition) -> bool:
        self.buffer.append(transition)
        if len(self.buffer) < self.buffer.maxlen:
            return False
        self.params = q_lambda_step(self.spec, self.params, self.optim, self.buffer, self.lam, self.gamma)
        return True
