"""Finite-difference checks of every gradient path in the package.

Checks register themselves with ``@register(name)``. Each returns a pair
(analytic, numeric) of flat arrays; ``run_checks`` compares them with a
relative error. Second-order checks differentiate a Hessian-vector
product: the directional derivative <grad f(p), c> for a fixed random c.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .learners import (
    ActorCriticLearner,
    Rollout,
    Transition,
    collect_rollout,
    inner_update,
    q_lambda_loss,
    unroll_on_rollouts,
)
from .matching import KINDS as MATCHING_KINDS
from .matching import MatchingFunction, l2_params, policy_divergence
from .meta import Target, equivalence_gap, matching_loss, mg_objective, q_policy_matching, q_value_matching
from .models import MLPSpec, MetaStats, init_mlp_arrays, meta_forward, meta_np, mlp_forward
from .multitask import (
    TaskGenerator,
    adapt,
    classifier_spec,
    multitask_equivalence,
    predictive_log_probs,
    task_bootstrap,
    task_loss,
)
from .theory import compute_gram, quadratic_objective, random_problem, unroll, unroll_np
from .TwoColorsEnv import N_ACTIONS, OBS_DIM, reset

_LOGGER = logging.getLogger("gradcheck")

Pair = Tuple[np.ndarray, np.ndarray]
CheckFn = Callable[[np.random.Generator, float], Pair]
Builder = Callable[[List[Node]], Node]

_CHECKS: "OrderedDict[str, CheckFn]" = OrderedDict()


def register(name: str) -> Callable[[CheckFn], CheckFn]:
    def deco(fn: CheckFn) -> CheckFn:
        if name in _CHECKS:
            raise ValueError(f"gradient check {name!r} registered twice")
        _CHECKS[name] = fn
        return fn
    return deco


def registered() -> List[str]:
    return list(_CHECKS.keys())


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, grad = x.reshape(-1), out.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _split(flat: np.ndarray, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    out, start = [], 0
    for arr in like:
        out.append(flat[start:start + arr.size].reshape(arr.shape))
        start += arr.size
    return out


def _value(build: Builder, arrays: Sequence[np.ndarray]) -> float:
    with ad.Graph("gradcheck-fd") as graph:
        return float(build([graph.leaf(f"p{i}", a) for i, a in enumerate(arrays)]).value)


def param_check(build: Builder, arrays: Sequence[np.ndarray], h: float) -> Pair:
    """Reverse-mode gradient of ``build`` against central differences."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with ad.Graph("gradcheck") as graph:
        leaves = [graph.leaf(f"p{i}", a) for i, a in enumerate(arrays)]
        analytic = np.concatenate([g.value.ravel() for g in ad.grad(build(leaves), leaves)])
    flat0 = np.concatenate([a.ravel() for a in arrays])
    numeric = numeric_grad(lambda v: _value(build, _split(v, arrays)), flat0, h)
    return analytic, numeric


def directional(build: Builder, arrays: Sequence[np.ndarray], rng: np.random.Generator) -> Builder:
    """p -> <grad build(p), c> as a differentiable graph function."""
    dirs = [rng.standard_normal(np.shape(a)) for a in arrays]

    def fn(leaves: List[Node]) -> Node:
        grads = ad.grad(build(leaves), leaves, create_graph=True)
        graph = leaves[0].graph
        total: Optional[Node] = None
        for g, c in zip(grads, dirs):
            term = ad.sum(g * graph.constant(c))
            total = term if total is None else total + term
        assert total is not None
        return total
    return fn


def second_order_check(build: Builder, arrays: Sequence[np.ndarray], rng: np.random.Generator, h: float) -> Pair:
    return param_check(directional(build, arrays, rng), arrays, h)


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    passed: bool
    size: int


def run_checks(h: float = 1e-5, tolerance: float = 1e-3, seed: int = 0,
               names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    selected = list(names) if names is not None else registered()
    unknown = [n for n in selected if n not in _CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks: {', '.join(unknown)}")
    seqs = np.random.SeedSequence(seed).spawn(len(_CHECKS))
    index = {name: i for i, name in enumerate(_CHECKS)}
    results: List[CheckResult] = []
    for name in selected:
        rng = np.random.default_rng(seqs[index[name]])
        analytic, numeric = _CHECKS[name](rng, h)
        err = relative_error(analytic, numeric)
        res = CheckResult(name, err, err <= tolerance, int(np.size(analytic)))
        if res.passed:
            _LOGGER.debug("%-40s rel err %.3e (%d entries)", name, err, res.size)
        else:
            _LOGGER.warning("%-40s rel err %.3e exceeds %.1e", name, err, tolerance)
        results.append(res)
    worst = max((r.error for r in results), default=0.0)
    _LOGGER.info("Gradient checks: %d/%d passed, max rel err %.3e",
                 sum(r.passed for r in results), len(results), worst)
    return results


# ---------------------------------------------------------------------------
# primitives: every op is wrapped in a fixed nonlinear head so that the
# second-order checks see non-zero curvature even for linear ops

def _head(y: Node) -> Node:
    weights = np.random.default_rng(1234).standard_normal(y.shape)
    return ad.sum(ad.tanh(y) * y.graph.constant(weights))


def _const(x: Node, shape: Tuple[int, ...], seed: int) -> Node:
    return x.graph.constant(np.random.default_rng(seed).standard_normal(shape))


_PRIMITIVE_CASES: Dict[str, Callable[[Node], Node]] = {
    "add": lambda x: x + _const(x, (4,), 1),
    "sub": lambda x: _const(x, (3, 4), 2) - x,
    "mul": lambda x: x * x,
    "div": lambda x: x / (ad.square(x) + 1.0),
    "neg": lambda x: -x,
    "matmul": lambda x: ad.matmul(x, _const(x, (4, 2), 3)),
    "dot": lambda x: ad.dot(x[0], x[1]),
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": lambda x: ad.exp(0.5 * x),
    "log": lambda x: ad.log(ad.square(x) + 1.0),
    "square": ad.square,
    "sum": lambda x: ad.sum(x, axis=0),
    "mean": lambda x: ad.mean(x, axis=1, keepdims=True),
    "max": lambda x: ad.max(x, axis=-1),
    "softmax": ad.softmax,
    "concat": lambda x: ad.concat([x, 2.0 * x], axis=1),
    "slice": lambda x: x[1:, :2],
    "reshape": lambda x: ad.reshape(x, (2, 6)),
    "log_softmax": ad.log_softmax,
    "softplus": ad.softplus,
    "transpose": ad.transpose,
    "broadcast_to": lambda x: ad.broadcast_to(x[0], (3, 4)),
    "sum_to": lambda x: ad.sum_to(x, (4,)),
    "unslice": lambda x: ad.unslice(x, (slice(0, 3),), (5, 4)),
}


def _register_primitive(op: str, body: Callable[[Node], Node]) -> None:
    def build(leaves: List[Node]) -> Node:
        return _head(body(leaves[0]))

    @register(f"primitive/{op}")
    def _first(rng: np.random.Generator, h: float) -> Pair:
        return param_check(build, [rng.standard_normal((3, 4))], h)

    @register(f"primitive/{op}/second")
    def _second(rng: np.random.Generator, h: float) -> Pair:
        return second_order_check(build, [rng.standard_normal((3, 4))], rng, h)


# every recorded op tag gets a first- and second-order check
for _op in ad.PRIMITIVES + ad.EXTRA_OPS:
    _register_primitive(_op, _PRIMITIVE_CASES[_op])


# ---------------------------------------------------------------------------
# networks

def _mlp_build(spec: MLPSpec, inputs: np.ndarray, labels: np.ndarray) -> Builder:
    def build(leaves: List[Node]) -> Node:
        logp = ad.log_softmax(mlp_forward(spec, leaves, inputs))
        onehot = leaves[0].graph.constant(np.eye(spec.output_dim)[labels])
        return -ad.mean(ad.sum(onehot * logp, axis=-1))
    return build


def _register_mlp(act: str) -> None:
    spec = MLPSpec(5, 1, 6, 3, activation=act)

    @register(f"mlp/{act}")
    def _first(rng: np.random.Generator, h: float) -> Pair:
        build = _mlp_build(spec, rng.standard_normal((4, 5)), rng.integers(0, 3, 4))
        return param_check(build, init_mlp_arrays(spec, rng), h)

    @register(f"mlp/{act}/second")
    def _second(rng: np.random.Generator, h: float) -> Pair:
        build = _mlp_build(spec, rng.standard_normal((4, 5)), rng.integers(0, 3, 4))
        return second_order_check(build, init_mlp_arrays(spec, rng), rng, h)


for _act in ("relu", "tanh"):
    _register_mlp(_act)


# ---------------------------------------------------------------------------
# actor-critic on fixed synthetic rollouts

STATS_LEN = 4


def small_learner(hidden: int = 8) -> ActorCriticLearner:
    return ActorCriticLearner(
        MLPSpec(OBS_DIM, 1, hidden, N_ACTIONS, activation="tanh"),
        MLPSpec(OBS_DIM, 1, hidden, 1, activation="tanh"),
        MLPSpec(STATS_LEN, 1, 6, 1, activation="tanh", output_activation="sigmoid"),
        gamma=0.9, n_step=4, lr=0.1,
    )


def synthetic_rollouts(rng: np.random.Generator, count: int, n: int = 6) -> List[Rollout]:
    """Rollouts of a uniform-random policy on two-colors."""
    state, _ = reset(rng)
    out = []
    for _ in range(count):
        state, rollout = collect_rollout(lambda o: np.full(N_ACTIONS, 1.0 / N_ACTIONS), state, n, rng)
        out.append(rollout)
    return out


def _ac_setup(rng: np.random.Generator, K: int = 2):
    learner = small_learner()
    assert learner.meta_spec is not None
    x = init_mlp_arrays(learner.pi_spec, rng)
    z = init_mlp_arrays(learner.v_spec, rng)
    w = init_mlp_arrays(learner.meta_spec, rng)
    stats = MetaStats(STATS_LEN, rng.normal(-0.04, 0.1, STATS_LEN))
    return learner, x, z, w, stats, synthetic_rollouts(rng, K)


def _nodes(graph: ad.Graph, arrays: Sequence[np.ndarray], prefix: str) -> List[Node]:
    return [graph.leaf(f"{prefix}{i}", a, requires_grad=False) for i, a in enumerate(arrays)]


@register("actor_critic/x")
def _ac_x(rng: np.random.Generator, h: float) -> Pair:
    learner, x, z, _, _, rollouts = _ac_setup(rng, 1)

    def build(leaves: List[Node]) -> Node:
        return learner.loss(leaves, _nodes(leaves[0].graph, z, "z"), rollouts[0], 0.3)
    return param_check(build, x, h)


@register("actor_critic/z")
def _ac_z(rng: np.random.Generator, h: float) -> Pair:
    # the bootstrap comes from a frozen copy so the TD target stays fixed
    learner, x, z, _, _, rollouts = _ac_setup(rng, 1)

    def build(leaves: List[Node]) -> Node:
        graph = leaves[0].graph
        return learner.terms(_nodes(graph, x, "x"), leaves, rollouts[0], zbar=_nodes(graph, z, "zbar")).td
    return param_check(build, z, h)


def _mg_build(learner: ActorCriticLearner, x: Sequence[np.ndarray], z: Sequence[np.ndarray],
              stats: MetaStats, rollouts: Sequence[Rollout], eps_meta: float) -> Builder:
    def build(leaves: List[Node]) -> Node:
        graph = leaves[0].graph
        xs = [graph.leaf(f"x{i}", a) for i, a in enumerate(x)]
        zs = [graph.leaf(f"z{i}", a) for i, a in enumerate(z)]
        trace = unroll_on_rollouts(learner, xs, zs, leaves, rollouts, stats)
        return mg_objective(learner, trace, eps_meta)
    return build


@register("actor_critic/w")
def _ac_w(rng: np.random.Generator, h: float) -> Pair:
    learner, x, z, w, stats, rollouts = _ac_setup(rng, 2)
    return param_check(_mg_build(learner, x, z, stats, rollouts, 0.1), w, h)


@register("inner_step/x")
def _inner_step(rng: np.random.Generator, h: float) -> Pair:
    learner, x, z, _, _, rollouts = _ac_setup(rng, 2)

    def build(leaves: List[Node]) -> Node:
        graph = leaves[0].graph
        zs = [graph.leaf(f"z{i}", a) for i, a in enumerate(z)]
        x1, z1, _ = inner_update(learner, leaves, zs, rollouts[0], 0.2, create_graph=True)
        return learner.terms(x1, z1, rollouts[1]).pg
    return param_check(build, x, h)


def _register_matching(kind: str) -> None:
    @register(f"matching/{kind}")
    def _check(rng: np.random.Generator, h: float) -> Pair:
        learner, x, z, w, stats, rollouts = _ac_setup(rng, 1)
        mu = MatchingFunction(kind)
        target = Target(x=tuple(a + 0.05 * rng.standard_normal(a.shape) for a in x),
                        z=tuple(a + 0.05 * rng.standard_normal(a.shape) for a in z))

        def build(leaves: List[Node]) -> Node:
            graph = leaves[0].graph
            xs = [graph.leaf(f"x{i}", a) for i, a in enumerate(x)]
            zs = [graph.leaf(f"z{i}", a) for i, a in enumerate(z)]
            trace = unroll_on_rollouts(learner, xs, zs, leaves, rollouts, stats)
            return matching_loss(mu, target, trace[-1].x, trace[-1].z, rollouts[-1].states, learner)
        return param_check(build, w, h)


for _kind in MATCHING_KINDS:
    _register_matching(_kind)


# ---------------------------------------------------------------------------
# Q(lambda) and epsilon matching

def _q_setup(rng: np.random.Generator):
    spec = MLPSpec(OBS_DIM, 1, 8, N_ACTIONS, activation="tanh")
    x = init_mlp_arrays(spec, rng)
    rollout = synthetic_rollouts(rng, 1, 6)[0]
    window = [Transition(rollout.states[t], int(rollout.actions[t]), float(rollout.rewards[t]),
                         rollout.states[t + 1]) for t in range(rollout.n)]
    return spec, x, rollout, window


@register("q_lambda/x")
def _q_lambda(rng: np.random.Generator, h: float) -> Pair:
    spec, x, _, window = _q_setup(rng)
    return param_check(lambda leaves: q_lambda_loss(spec, leaves, window, x, 0.9, 0.7), x, h)


def _register_q_matching(kind: str) -> None:
    @register(f"q_matching/{kind}")
    def _check(rng: np.random.Generator, h: float) -> Pair:
        spec, x, rollout, _ = _q_setup(rng)
        target_x = [a + 0.3 * rng.standard_normal(a.shape) for a in x]
        meta_spec = MLPSpec(STATS_LEN, 1, 6, 1, activation="tanh", output_activation="sigmoid")
        stats = rng.normal(-0.04, 0.1, STATS_LEN)
        w0 = init_mlp_arrays(meta_spec, rng)
        # the target epsilon is fixed at w0; perturbing w must not move it
        target_eps = meta_np(meta_spec, w0, stats)

        def build(leaves: List[Node]) -> Node:
            eps = meta_forward(meta_spec, leaves, stats)
            if kind == "policy":
                return q_policy_matching(spec, target_x, x, eps, rollout.states)
            return q_value_matching(spec, target_x, x, eps, rollout.states, target_eps)
        return param_check(build, w0, h)


for _kind in ("policy", "value"):
    _register_q_matching(_kind)


# ---------------------------------------------------------------------------
# theory and multitask

@register("theory/jacobian")
def _theory_jacobian(rng: np.random.Generator, h: float) -> Pair:
    problem = random_problem(rng, n_x=5, K=3)
    bundle = compute_gram(problem)
    cols = [numeric_grad(lambda w: float(unroll_np(problem, w)[i]), problem.w0, h) for i in range(problem.n_x)]
    return bundle.D.ravel(), np.stack(cols, axis=1).ravel()


@register("theory/meta_gradient")
def _theory_meta(rng: np.random.Generator, h: float) -> Pair:
    problem = random_problem(rng, n_x=6, K=4)

    def build(leaves: List[Node]) -> Node:
        return quadratic_objective(problem, unroll(problem, leaves[0]))
    return param_check(build, [problem.w0], h)


def _mt_setup(rng: np.random.Generator):
    gen = TaskGenerator(rng, ways=3, shots=2, queries=3, dim=4)
    spec = classifier_spec(4, 5, 3)
    return spec, gen.sample(), init_mlp_arrays(spec, rng)


@register("multitask/mg")
def _mt_mg(rng: np.random.Generator, h: float) -> Pair:
    spec, task, w = _mt_setup(rng)

    def build(leaves: List[Node]) -> Node:
        return task_loss(spec, adapt(spec, leaves, task, 2, 0.4), task.x_val, task.y_val)
    return param_check(build, w, h)


def _register_mt_bmg(kind: str) -> None:
    @register(f"multitask/bmg/{kind}")
    def _check(rng: np.random.Generator, h: float) -> Pair:
        spec, task, w = _mt_setup(rng)
        with ad.Graph("target") as graph:
            leaves = [graph.leaf(f"w{i}", a) for i, a in enumerate(w)]
            target = task_bootstrap(spec, adapt(spec, leaves, task, 1, 0.4, create_graph=False), task, 3, 0.4)

        def build(leaves: List[Node]) -> Node:
            x_K = adapt(spec, leaves, task, 1, 0.4)
            t_nodes = target.x_nodes(spec, leaves[0].graph)
            if kind == "l2_params":
                return l2_params(t_nodes, x_K)
            return policy_divergence(kind, predictive_log_probs(spec, t_nodes, task.x_val, 2.0),
                                     predictive_log_probs(spec, x_K, task.x_val))
        return param_check(build, w, h)


for _kind in ("kl_target_first", "kl_online_first", "l2_params"):
    _register_mt_bmg(_kind)


# ---------------------------------------------------------------------------
# MG/BMG equivalence: analytic = MG meta-gradient, numeric = BMG one

@register("equivalence/quadratic")
def _eq_quadratic(rng: np.random.Generator, h: float) -> Pair:
    problem = random_problem(rng, n_x=8, K=3)
    with ad.Graph("equivalence") as graph:
        w = graph.leaf("w", problem.w0)
        mg, bmg, _ = equivalence_gap([w], [unroll(problem, w)], lambda it: quadratic_objective(problem, it[0]))
    return np.concatenate([g.ravel() for g in mg]), np.concatenate([g.ravel() for g in bmg])


@register("equivalence/actor_critic")
def _eq_actor_critic(rng: np.random.Generator, h: float) -> Pair:
    learner, x, z, w, stats, rollouts = _ac_setup(rng, 2)
    with ad.Graph("equivalence") as graph:
        wl = [graph.leaf(f"w{i}", a) for i, a in enumerate(w)]
        xs = [graph.leaf(f"x{i}", a) for i, a in enumerate(x)]
        zs = [graph.leaf(f"z{i}", a) for i, a in enumerate(z)]
        trace = unroll_on_rollouts(learner, xs, zs, wl, rollouts, stats)
        n_x = len(xs)
        last = rollouts[-1]

        def objective(it: List[Node]) -> Node:
            return learner.terms(it[:n_x], it[n_x:], last).pg
        mg, bmg, _ = equivalence_gap(wl, trace[-1].x + trace[-1].z, objective)
    return np.concatenate([g.ravel() for g in mg]), np.concatenate([g.ravel() for g in bmg])


@register("equivalence/multitask")
def _eq_multitask(rng: np.random.Generator, h: float) -> Pair:
    spec, task, w = _mt_setup(rng)
    mg, bmg, _ = multitask_equivalence(spec, w, task, 2, 0.4)
    return np.concatenate([g.ravel() for g in mg]), np.concatenate([g.ravel() for g in bmg])
