"""Meta-gradient updates.

``mg_update`` descends the learner's own objective evaluated at the
unrolled iterates. ``bmg_update`` instead pulls the K-step iterate towards
a bootstrapped target with a matching function; the target is frozen, so
the meta-gradient only flows through the online branch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .learners import (
    ActorCriticLearner,
    Rollout,
    TraceEntry,
    _check_finite,
    entropy_weight,
    inner_loop,
    sgd_update,
)
from .matching import MatchingFunction, l2_params, policy_divergence, value_l2
from .models import MLPSpec, MetaStats, as_leaves, policy_log_probs, q_values_np, value_forward
from .optim import InnerOptimState, global_norm
from .TwoColorsEnv import EnvState, TrajectoryWriter

_LOGGER = logging.getLogger("meta-core")

FINAL_RULES = ("objective", "meta")
MG_OBJECTIVES = ("mean", "final")


@dataclass(frozen=True)
class TargetBootstrapSpec:
    """L - 1 meta-learned updates followed by one step on the objective.

    final_rule "objective" uses eps_meta as entropy weight in the final step;
    "meta" keeps the meta-learned weight for all L steps.
    """
    L: int = 1
    eps_meta: float = 0.0
    final_step_lr: float = 0.1
    final_rule: str = "objective"

    def __post_init__(self) -> None:
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.final_rule not in FINAL_RULES:
            raise ValueError(f"final_rule must be one of {FINAL_RULES}")
        if self.eps_meta < 0:
            raise ValueError("eps_meta must be >= 0")


@dataclass(frozen=True)
class Target:
    """Frozen bootstrapped parameters; they never carry gradient."""
    x: Tuple[np.ndarray, ...]
    z: Tuple[np.ndarray, ...] = ()
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frozen = []
        for group in (self.x, self.z):
            arrs = tuple(np.array(a, dtype=np.float64) for a in group)
            for a in arrs:
                a.flags.writeable = False
            frozen.append(arrs)
        object.__setattr__(self, "x", frozen[0])
        object.__setattr__(self, "z", frozen[1])

    def x_nodes(self, spec: MLPSpec, graph: Optional[ad.Graph] = None) -> List[Node]:
        return as_leaves(spec, self.x, "target/x", requires_grad=False, graph=graph)

    def z_nodes(self, spec: MLPSpec, graph: Optional[ad.Graph] = None) -> List[Node]:
        return as_leaves(spec, self.z, "target/z", requires_grad=False, graph=graph)


@dataclass
class MetaStep:
    w: List[np.ndarray]
    grads: List[np.ndarray]
    loss: float

    @property
    def grad_norm(self) -> float:
        return global_norm(self.grads)


def apply_meta_gradient(loss: Node, w: Sequence[Node], meta_optim: InnerOptimState, where: str) -> MetaStep:
    _check_finite(where, loss)
    grads = [g.value for g in ad.grad(loss, list(w))]
    new_w = meta_optim.step([p.value for p in w], grads)
    return MetaStep(new_w, grads, float(loss.value))


def mg_objective(learner: ActorCriticLearner, trace: Sequence[TraceEntry], eps_meta: float,
                 objective: str = "mean") -> Node:
    """Average of l_PG + eps_meta * l_EN over the traced iterates (or the last one)."""
    if objective not in MG_OBJECTIVES:
        raise ValueError(f"objective must be one of {MG_OBJECTIVES}")
    if not trace:
        raise ValueError("empty inner trace")
    entries = trace[-1:] if objective == "final" else trace
    total = None
    for entry in entries:
        t = learner.terms(entry.x, entry.z, entry.rollout)
        term = t.pg + eps_meta * t.en
        total = term if total is None else total + term
    return total / float(len(entries))


def mg_update(w: Sequence[Node], trace: Sequence[TraceEntry], meta_optim: InnerOptimState, eps_meta: float,
              learner: ActorCriticLearner, objective: str = "mean") -> MetaStep:
    loss = mg_objective(learner, trace, eps_meta, objective)
    step = apply_meta_gradient(loss, w, meta_optim, "mg_objective")
    _LOGGER.debug("MG step: objective=%.6f |grad|=%.3e", step.loss, step.grad_norm)
    return step


@dataclass
class BootstrapResult:
    target: Target
    x: List[Node]
    z: List[Node]
    state: EnvState
    rollouts: List[Rollout]
    epsilons: List[float]


def _detached(spec: MLPSpec, params: Sequence[Node], prefix: str, requires_grad: bool = True) -> List[Node]:
    return as_leaves(spec, [p.value for p in params], prefix, requires_grad, graph=params[0].graph)


def bootstrap_target(learner: ActorCriticLearner, x: Sequence[Node], z: Sequence[Node], w: Optional[Sequence[Node]],
                     state: EnvState, spec: TargetBootstrapSpec, stats: MetaStats, rng: np.random.Generator,
                     last_rollout: Rollout, fixed_epsilon: Optional[float] = None,
                     recorder: Optional[TrajectoryWriter] = None) -> BootstrapResult:
    """Continue L - 1 steps under the meta-learned rule, then take one
    objective step on the most recent rollout.

    The continuation steps are the agent's own next updates: the returned
    ``x``, ``z`` and ``state`` are where the agent carries on from.
    """
    w_frozen = None
    if w is not None and learner.meta_spec is not None:
        w_frozen = _detached(learner.meta_spec, w, "w/frozen", requires_grad=False)
    cx = _detached(learner.pi_spec, x, "x")
    cz = _detached(learner.v_spec, z, "z")
    rollouts: List[Rollout] = []
    epsilons: List[float] = []
    rollout = last_rollout
    if spec.L > 1:
        res = inner_loop(learner, cx, cz, state, w_frozen, spec.L - 1, last_rollout.n, stats, rng,
                         fixed_epsilon=fixed_epsilon, record=False, recorder=recorder)
        cx, cz, state, rollout = res.x, res.z, res.state, res.rollout
        rollouts = [e.rollout for e in res.trace]
        epsilons = res.epsilons

    graph = cx[0].graph
    if spec.final_rule == "meta":
        eps = float(entropy_weight(learner, w_frozen, stats, fixed_epsilon, graph).value)
    else:
        eps = spec.eps_meta
    loss = learner.loss(cx, cz, rollout, eps)
    _check_finite("bootstrap_target", loss)
    names = learner.pi_spec.param_names("target/x") + learner.v_spec.param_names("target/z")
    final = sgd_update(list(cx) + list(cz), loss, spec.final_step_lr, create_graph=False, names=names)
    tx, tz = final[:len(cx)], final[len(cx):]
    target = Target(
        x=tuple(p.value for p in tx),
        z=tuple(p.value for p in tz),
        provenance={"L": spec.L, "eps_final": eps, "final_rule": spec.final_rule,
                    "rollout_start": rollout.start_env_step},
    )
    return BootstrapResult(target, cx, cz, state, rollouts, epsilons)


def matching_loss(mu: MatchingFunction, target: Target, x: Sequence[Node], z: Sequence[Node],
                  states: np.ndarray, learner: ActorCriticLearner) -> Node:
    """mu(target, online) over the given states; gradient flows only into x, z."""
    graph = x[0].graph
    if mu.kind == "l2_params":
        t_nodes = target.x_nodes(learner.pi_spec, graph) + (target.z_nodes(learner.v_spec, graph) if target.z else [])
        o_nodes = list(x) + (list(z) if target.z else [])
        return l2_params(t_nodes, o_nodes)

    obs = graph.constant(states)
    loss: Optional[Node] = None
    if mu.kind != "value_l2":
        kind = "kl_target_first" if mu.kind == "policy_plus_value" else mu.kind
        t_logp = policy_log_probs(learner.pi_spec, target.x_nodes(learner.pi_spec, graph), obs)
        o_logp = policy_log_probs(learner.pi_spec, x, obs)
        loss = policy_divergence(kind, t_logp, o_logp)
    if mu.needs_values:
        vt = value_forward(learner.v_spec, target.z_nodes(learner.v_spec, graph), obs)
        vo = value_forward(learner.v_spec, z, obs)
        term = value_l2(vt, vo)
        loss = term if loss is None else loss + mu.lambda_v * term
    assert loss is not None
    return loss


def bmg_update(w: Sequence[Node], x: Sequence[Node], z: Sequence[Node], target: Target, mu: MatchingFunction,
               states: np.ndarray, meta_optim: InnerOptimState, learner: ActorCriticLearner) -> MetaStep:
    loss = matching_loss(mu, target, x, z, states, learner)
    step = apply_meta_gradient(loss, w, meta_optim, "matching_loss")
    _LOGGER.debug("BMG step: matching=%.6f |grad|=%.3e", step.loss, step.grad_norm)
    return step


# ---------------------------------------------------------------------------
# Q-agent matching: the target is a further-trained Q-net, the online side
# is the epsilon-greedy policy of an earlier Q-net. Only epsilon carries
# gradient, so nothing is backpropagated through the Q update rule.

def q_policy_matching(spec: MLPSpec, target_x: Sequence[np.ndarray], online_x: Sequence[np.ndarray],
                      eps: Node, states: np.ndarray) -> Node:
    """Mean over states of -log pi_eps(argmax q_target | s)."""
    n = spec.output_dim
    target_a = q_values_np(spec, target_x, states).argmax(axis=-1)
    online_a = q_values_np(spec, online_x, states).argmax(axis=-1)
    agree = eps.graph.constant((target_a == online_a).astype(np.float64))
    p_greedy = 1.0 - eps + eps / float(n)
    p_other = eps / float(n)
    prob = agree * p_greedy + (1.0 - agree) * p_other
    return -ad.mean(ad.log(prob))


def induced_value_np(qvals: np.ndarray, eps: float) -> np.ndarray:
    """u(s) = sum_a pi_eps(a|s) q(s, a) for the epsilon-greedy policy."""
    return (1.0 - eps) * qvals.max(axis=-1) + eps * qvals.mean(axis=-1)


def q_value_matching(spec: MLPSpec, target_x: Sequence[np.ndarray], online_x: Sequence[np.ndarray],
                     eps: Node, states: np.ndarray, target_eps: float) -> Node:
    """Mean squared difference of the induced state values.

    ``target_eps`` is the epsilon the target side is evaluated with. It is a
    plain float, read off the online epsilon once by the caller, so the
    target carries no gradient.
    """
    graph = eps.graph
    q_t = q_values_np(spec, target_x, states)
    q_o = q_values_np(spec, online_x, states)
    u_t = graph.constant(induced_value_np(q_t, float(target_eps)))
    u_o = (1.0 - eps) * graph.constant(q_o.max(axis=-1)) + eps * graph.constant(q_o.mean(axis=-1))
    return ad.mean(ad.square(u_t - u_o))


# ---------------------------------------------------------------------------
# MG/BMG equivalence: with mu = squared L2 and the half-step target
# x - 0.5 * grad f(x), the BMG meta-gradient equals the MG one.

def half_step_target(iterate: Sequence[Node], objective: Callable[[List[Node]], Node]) -> List[np.ndarray]:
    f = objective(list(iterate))
    grads = ad.grad(f, list(iterate))
    return [p.value - 0.5 * g.value for p, g in zip(iterate, grads)]


def equivalence_gap(w: Sequence[Node], iterate: Sequence[Node],
                    objective: Callable[[List[Node]], Node]) -> Tuple[List[np.ndarray], List[np.ndarray], float]:
    """Return (MG meta-gradient, BMG meta-gradient, relative L2 error)."""
    f = objective(list(iterate))
    mg = [g.value for g in ad.grad(f, list(w))]
    graph = iterate[0].graph
    target = [graph.constant(t) for t in half_step_target(iterate, objective)]
    mu = l2_params(target, iterate)
    bmg = [g.value for g in ad.grad(mu, list(w))]
    num = global_norm([a - b for a, b in zip(mg, bmg)])
    den = max(global_norm(mg), 1e-300)
    return mg, bmg, num / den
