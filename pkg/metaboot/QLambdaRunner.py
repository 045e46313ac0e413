from __future__ import annotations

import logging
from collections import deque
from typing import Deque, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .base import ConfigError, Record, Stage
from .config import ExperimentConfig
from .learners import QLambdaLearner, Transition, sample_action
from .meta import MetaStep, apply_meta_gradient, q_policy_matching, q_value_matching
from .models import MLPSpec, MetaStats, as_leaves, init_mlp_arrays, meta_forward, meta_np, named_params
from .optim import InnerOptimState
from .TwoColorsEnv import OBS_DIM, N_ACTIONS, TrajectoryWriter, TwoColorsEnv

_LOGGER = logging.getLogger("q-lambda-runner")


class QLambdaRunner(Stage):
    """Source: online Q(lambda) on two-colors with an epsilon-greedy behaviour
    policy whose epsilon is either fixed or produced by a meta-network.

    In "bmg" mode, every ``q_meta_every`` steps the meta-network is updated
    by matching the epsilon-greedy policy of the Q-net from L steps ago
    (with the statistics it saw then) to the greedy policy of the current
    Q-net. Yields one record per block of ``q_meta_every`` steps.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int, recorder: Optional[TrajectoryWriter] = None) -> None:
        super().__init__()
        if cfg.mode not in ("fixed", "bmg"):
            raise ConfigError("mode", "twocolors-q supports 'fixed' and 'bmg'")
        self.cfg = cfg
        self.seed = seed
        self.q_spec = MLPSpec(OBS_DIM, cfg.hidden_layers, cfg.hidden_width, N_ACTIONS)
        self.meta_spec = MLPSpec(cfg.stats_window, 1, cfg.meta_hidden_width, 1, output_activation="sigmoid")
        env_seq, init_seq, act_seq = np.random.SeedSequence(seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(act_seq)
        x = init_mlp_arrays(self.q_spec, init_rng)
        optim = InnerOptimState.create("adam", x, cfg.q_lr, b1=cfg.adam_b1, b2=cfg.adam_b2, eps=cfg.adam_eps,
                                       ema_decay=cfg.grad_ema)
        self.learner = QLambdaLearner(self.q_spec, x, optim, gamma=cfg.gamma, lam=cfg.q_lambda, window=cfg.q_window)
        self.w = init_mlp_arrays(self.meta_spec, init_rng)
        if cfg.meta_zero_init:
            self.w = [np.zeros_like(p) for p in self.w]
        self.meta_optim = InnerOptimState.create(
            "adam", self.w, cfg.meta_lr, b1=cfg.adam_b1, b2=cfg.adam_b2, eps=cfg.adam_eps,
            ema_decay=cfg.meta_grad_ema)
        self.stats = MetaStats(cfg.stats_window)
        self.env = TwoColorsEnv(np.random.default_rng(env_seq), cfg.flip_period, recorder)
        # (Q params, stats) before each of the last L updates
        self.history: Deque[Tuple[List[np.ndarray], np.ndarray]] = deque(maxlen=cfg.L)
        self.total_return = 0.0
        self.cycle = 0

    def named_params(self) -> Dict[str, np.ndarray]:
        out = named_params(self.q_spec, self.learner.params, "q")
        out.update(named_params(self.meta_spec, self.w, "w"))
        return out

    def epsilon(self) -> float:
        if self.cfg.mode == "fixed":
            return self.cfg.fixed_epsilon
        return meta_np(self.meta_spec, self.w, self.stats)

    def stream(self) -> Iterator[Record]:
        cfg = self.cfg
        _LOGGER.info("Q(lambda) seed=%d mode=%s L=%d steps=%d", self.seed, cfg.mode, cfg.L, cfg.total_env_steps)
        while self.env.step_count < cfg.total_env_steps:
            if self.cancelled:
                break
            yield self.run_block()
        _LOGGER.info("Q(lambda) seed=%d done: return=%.2f after %d steps",
                     self.seed, self.total_return, self.env.step_count)

    def act(self) -> Tuple[np.ndarray, float, float]:
        eps = self.epsilon()
        self.history.append((self.learner.params, self.stats.vector()))
        obs = self.env.obs
        probs = self.learner.act_probs(obs, eps)
        a = sample_action(probs, self.rng)
        next_obs, r = self.env.step(a)
        self.stats.push(r)
        self.learner.observe(Transition(obs, a, r, next_obs))
        return obs, r, eps

    def meta_update(self, states: np.ndarray) -> MetaStep:
        online_x, online_stats = self.history[0]
        with ad.Graph(f"q-meta-{self.cycle}") as g:
            w = as_leaves(self.meta_spec, self.w, "w", graph=g)
            eps = meta_forward(self.meta_spec, w, online_stats)
            if self.cfg.q_matching == "policy":
                loss = q_policy_matching(self.q_spec, self.learner.params, online_x, eps, states)
            else:
                loss = q_value_matching(self.q_spec, self.learner.params, online_x, eps, states, float(eps.value))
            step = apply_meta_gradient(loss, w, self.meta_optim, "q_matching")
        self.w = step.w
        return step

    def run_block(self) -> Record:
        cfg = self.cfg
        states: List[np.ndarray] = []
        epsilons: List[float] = []
        block_return = 0.0
        for _ in range(cfg.q_meta_every):
            obs, r, eps = self.act()
            states.append(obs)
            epsilons.append(eps)
            block_return += r
            if self.env.step_count >= cfg.total_env_steps:
                break
        matching_loss: Optional[float] = None
        grad_norm: Optional[float] = None
        if cfg.mode == "bmg":
            step = self.meta_update(np.stack(states))
            matching_loss, grad_norm = step.loss, step.grad_norm
        self.total_return += block_return
        self.cycle += 1
        rec: Record = {
            "env_step": self.env.step_count,
            "cycle": self.cycle,
            "total_return": self.total_return,
            "cycle_return": block_return,
            "epsilon": float(np.mean(epsilons)),
            "matching_loss": matching_loss,
            "meta_grad_norm": grad_norm,
        }
        _LOGGER.debug("block %d: step=%d return=%.2f eps=%.4f", self.cycle, rec["env_step"],
                      self.total_return, rec["epsilon"])
        return rec
