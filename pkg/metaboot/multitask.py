"""Few-shot classification with a meta-learned shared initialisation.

Each task is an N-way Gaussian-blob problem. ``adapt`` runs K plain
gradient-descent steps on the task's training split from the shared
initialisation w, keeping the steps on the graph so the meta-gradient can
flow back into w. MG descends the validation loss of the adapted
parameters; BMG instead matches them to a target obtained by L further
(detached) steps on the validation split.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .learners import _check_finite, sgd_update
from .matching import MatchingFunction, l2_params, policy_divergence
from .meta import Target, equivalence_gap
from .models import MLPSpec, as_leaves, init_mlp_arrays, mlp_forward, mlp_np
from .optim import InnerOptimState, global_norm

_LOGGER = logging.getLogger("multitask")

MODES = ("mg", "bmg")


@dataclass(frozen=True)
class Task:
    """Class-balanced train and validation splits of one classification task."""
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    ways: int

    def __post_init__(self) -> None:
        for x, y, split in ((self.x_train, self.y_train, "train"), (self.x_val, self.y_val, "validation")):
            if x.ndim != 2 or y.shape != (x.shape[0],):
                raise ValueError(f"{split} split: expected (B, d) inputs and (B,) labels")
            counts = np.bincount(y, minlength=self.ways)
            if counts.shape[0] != self.ways or np.any(counts != counts[0]):
                raise ValueError(f"{split} split is not class-balanced: {counts.tolist()}")

    def one_hot(self, y: np.ndarray) -> np.ndarray:
        return np.eye(self.ways)[y]


class TaskGenerator:
    """Seeded sampler of N-way Gaussian-blob tasks.

    Class means lie on a sphere of radius ``radius`` and are redrawn until
    every pair is at least ``min_separation * sigma`` apart; examples are the
    means plus isotropic noise of scale ``sigma``.
    """

    def __init__(self, rng: np.random.Generator, ways: int = 5, shots: int = 5, queries: int = 15,
                 dim: int = 8, sigma: float = 1.0, radius: float = 3.0, min_separation: float = 3.0,
                 max_tries: int = 1000) -> None:
        if ways < 2 or shots < 1 or queries < 1 or dim < 1:
            raise ValueError("need ways >= 2, shots >= 1, queries >= 1 and dim >= 1")
        self.rng = rng
        self.ways = ways
        self.shots = shots
        self.queries = queries
        self.dim = dim
        self.sigma = sigma
        self.radius = radius
        self.min_separation = min_separation
        self.max_tries = max_tries

    def sample_means(self) -> np.ndarray:
        for _ in range(self.max_tries):
            m = self.rng.standard_normal((self.ways, self.dim))
            m = self.radius * m / np.linalg.norm(m, axis=1, keepdims=True)
            dist = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=-1)
            dist[np.diag_indices(self.ways)] = np.inf
            if dist.min() >= self.min_separation * self.sigma:
                return m
        raise RuntimeError(f"could not place {self.ways} means {self.min_separation} sigma apart "
                           f"on a radius-{self.radius} sphere")

    def _split(self, means: np.ndarray, per_class: int) -> Tuple[np.ndarray, np.ndarray]:
        y = np.repeat(np.arange(self.ways), per_class)
        x = means[y] + self.sigma * self.rng.standard_normal((y.shape[0], self.dim))
        order = self.rng.permutation(y.shape[0])
        return x[order], y[order]

    def sample(self) -> Task:
        means = self.sample_means()
        x_tr, y_tr = self._split(means, self.shots)
        x_va, y_va = self._split(means, self.queries)
        return Task(x_tr, y_tr, x_va, y_va, self.ways)

    def sample_batch(self, n: int) -> List[Task]:
        return [self.sample() for _ in range(n)]


def classifier_spec(dim: int, hidden: int, ways: int) -> MLPSpec:
    return MLPSpec(dim, 1, hidden, ways)


def predictive_log_probs(spec: MLPSpec, params: Sequence[Node], x: np.ndarray, temperature: float = 1.0) -> Node:
    logits = mlp_forward(spec, params, x)
    if temperature != 1.0:
        logits = logits / temperature
    return ad.log_softmax(logits)


def task_loss(spec: MLPSpec, params: Sequence[Node], x: np.ndarray, y: np.ndarray) -> Node:
    """Mean negative log-likelihood."""
    logp = predictive_log_probs(spec, params, x)
    onehot = params[0].graph.constant(np.eye(spec.output_dim)[y])
    return -ad.mean(ad.sum(onehot * logp, axis=-1))


def adapt(spec: MLPSpec, w: Sequence[Node], task: Task, K: int, alpha: float,
          create_graph: bool = True) -> List[Node]:
    """K full-batch descent steps on the training split, starting at w."""
    if K < 0 or alpha <= 0:
        raise ValueError("adapt needs K >= 0 and alpha > 0")
    x = list(w)
    for _ in range(K):
        loss = task_loss(spec, x, task.x_train, task.y_train)
        _check_finite("task_loss", loss)
        x = sgd_update(x, loss, alpha, create_graph=create_graph, names=spec.param_names("adapted"))
    return x


def task_bootstrap(spec: MLPSpec, x_K: Sequence[Node], task: Task, L: int, alpha: float) -> Target:
    """L - 1 steps of the adaptation rule on validation data, then one
    validation-gradient step; nothing links the result back to w."""
    if L < 1:
        raise ValueError("L must be >= 1")
    graph = x_K[0].graph
    x = [graph.leaf(n, p.value) for n, p in zip(spec.param_names("target"), x_K)]
    for _ in range(L):
        loss = task_loss(spec, x, task.x_val, task.y_val)
        x = sgd_update(x, loss, alpha, create_graph=False, names=spec.param_names("target"))
    return Target(x=tuple(p.value for p in x), provenance={"L": L, "alpha": alpha})


def task_meta_loss(spec: MLPSpec, w: Sequence[Node], task: Task, K: int, L: int, alpha: float, mode: str,
                   mu: MatchingFunction, temperature: float = 1.0) -> Tuple[Node, float]:
    """Meta-objective of one task and the adapted validation loss."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x_K = adapt(spec, w, task, K, alpha)
    val = task_loss(spec, x_K, task.x_val, task.y_val)
    if mode == "mg":
        return val, float(val.value)
    target = task_bootstrap(spec, x_K, task, L, alpha)
    graph = w[0].graph
    t_nodes = target.x_nodes(spec, graph)
    if mu.kind == "l2_params":
        return l2_params(t_nodes, x_K), float(val.value)
    t_logp = predictive_log_probs(spec, t_nodes, task.x_val, temperature)
    o_logp = predictive_log_probs(spec, x_K, task.x_val)
    return policy_divergence(mu.kind, t_logp, o_logp), float(val.value)


def task_meta_gradient(spec: MLPSpec, w: Sequence[np.ndarray], task: Task, K: int, L: int, alpha: float,
                       mode: str, mu: MatchingFunction,
                       temperature: float = 1.0) -> Tuple[List[np.ndarray], float, float]:
    """(grads, meta-loss, adapted validation loss) for one task on its own graph."""
    with ad.Graph("task") as graph:
        wl = as_leaves(spec, w, "w", graph=graph)
        loss, val = task_meta_loss(spec, wl, task, K, L, alpha, mode, mu, temperature)
        _check_finite("task_meta_loss", loss)
        grads = [g.value for g in ad.grad(loss, wl)]
    return grads, float(loss.value), val


@dataclass
class MetaBatchResult:
    w: List[np.ndarray]
    grads: List[np.ndarray]
    meta_loss: float
    val_loss: float

    @property
    def grad_norm(self) -> float:
        return global_norm(self.grads)


def meta_batch_gradient(spec: MLPSpec, w: Sequence[np.ndarray], tasks: Sequence[Task], K: int, L: int,
                        alpha: float, mode: str, mu: MatchingFunction,
                        temperature: float = 1.0) -> Tuple[List[np.ndarray], float, float]:
    """Per-task meta-gradients averaged in task order."""
    if not tasks:
        raise ValueError("meta batch needs at least one task")
    total = [np.zeros_like(p) for p in w]
    meta_loss = val_loss = 0.0
    for task in tasks:
        grads, loss, val = task_meta_gradient(spec, w, task, K, L, alpha, mode, mu, temperature)
        total = [t + g for t, g in zip(total, grads)]
        meta_loss += loss
        val_loss += val
    n = float(len(tasks))
    return [t / n for t in total], meta_loss / n, val_loss / n


def meta_batch_update(spec: MLPSpec, w: Sequence[np.ndarray], tasks: Sequence[Task], K: int, L: int,
                      alpha: float, mode: str, mu: MatchingFunction, meta_optim: InnerOptimState,
                      temperature: float = 1.0) -> MetaBatchResult:
    grads, meta_loss, val_loss = meta_batch_gradient(spec, w, tasks, K, L, alpha, mode, mu, temperature)
    new_w = meta_optim.step(list(w), grads)
    _LOGGER.debug("%s meta step: loss=%.5f val=%.5f |grad|=%.3e", mode, meta_loss, val_loss, global_norm(grads))
    return MetaBatchResult(new_w, grads, meta_loss, val_loss)


def accuracy(spec: MLPSpec, params: Sequence[np.ndarray], x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(mlp_np(spec, params, x).argmax(axis=-1) == y))


def evaluate(spec: MLPSpec, w: Sequence[np.ndarray], tasks: Sequence[Task], K: int, alpha: float) -> float:
    """Mean validation accuracy after K adaptation steps from w."""
    accs = []
    for task in tasks:
        with ad.Graph("eval") as graph:
            wl = as_leaves(spec, w, "w", requires_grad=True, graph=graph)
            x_K = adapt(spec, wl, task, K, alpha, create_graph=False)
            accs.append(accuracy(spec, [p.value for p in x_K], task.x_val, task.y_val))
    return float(np.mean(accs))


def multitask_equivalence(spec: MLPSpec, w: Sequence[np.ndarray], task: Task, K: int,
                          alpha: float) -> Tuple[List[np.ndarray], List[np.ndarray], float]:
    """MG and half-step L2 BMG meta-gradients on one task, and their relative gap."""
    with ad.Graph("equivalence") as graph:
        wl = as_leaves(spec, w, "w", graph=graph)
        x_K = adapt(spec, wl, task, K, alpha)
        return equivalence_gap(wl, x_K, lambda it: task_loss(spec, it, task.x_val, task.y_val))


def init_shared(spec: MLPSpec, rng: np.random.Generator) -> List[np.ndarray]:
    return init_mlp_arrays(spec, rng)


def baseline_accuracy(spec: MLPSpec, rng: np.random.Generator, tasks: Sequence[Task], K: int, alpha: float,
                      w: Optional[Sequence[np.ndarray]] = None) -> float:
    """Accuracy of an untrained initialisation after K adaptation steps."""
    return evaluate(spec, w if w is not None else init_shared(spec, rng), tasks, K, alpha)
