from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import autodiff as ad
from .base import Record, Stage
from .config import ExperimentConfig
from .learners import ActorCriticLearner, Rollout, inner_loop
from .matching import MatchingFunction
from .meta import TargetBootstrapSpec, bmg_update, bootstrap_target, mg_update
from .models import MLPSpec, MetaStats, as_leaves, init_mlp_arrays, named_params, policy_probs_np
from .optim import InnerOptimState
from .TwoColorsEnv import OBS_DIM, N_ACTIONS, TrajectoryWriter, reset

_LOGGER = logging.getLogger("actor-critic-runner")


def build_learner(cfg: ExperimentConfig) -> ActorCriticLearner:
    pi_spec = MLPSpec(OBS_DIM, cfg.hidden_layers, cfg.hidden_width, N_ACTIONS)
    v_spec = MLPSpec(OBS_DIM, cfg.hidden_layers, cfg.hidden_width, 1)
    meta_spec = MLPSpec(cfg.stats_window, 1, cfg.meta_hidden_width, 1, output_activation="sigmoid")
    return ActorCriticLearner(pi_spec, v_spec, meta_spec, gamma=cfg.gamma, n_step=cfg.n_step, lr=cfg.inner_lr)


def policy_entropy(spec: MLPSpec, x: List[np.ndarray], states: np.ndarray) -> float:
    p = policy_probs_np(spec, x, states)
    return float(np.mean(-np.sum(p * np.log(np.maximum(p, 1e-300)), axis=-1)))


class ActorCriticRunner(Stage):
    """Source: the two-colors actor-critic with a meta-learned entropy weight.

    mode "fixed" keeps the entropy weight at ``fixed_epsilon``; "mg" runs the
    K-step inner loop and a standard meta-gradient step; "bmg" follows the
    online bootstrapped loop: K inner steps, L - 1 continuation steps, one
    target step, a matching step on the meta-net, then carry on from the
    most recent parameters. Yields one record per meta-cycle.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int, recorder: Optional[TrajectoryWriter] = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.recorder = recorder
        self.learner = build_learner(cfg)
        env_seq, init_seq, act_seq = np.random.SeedSequence(seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(act_seq)
        self.x = init_mlp_arrays(self.learner.pi_spec, init_rng)
        self.z = init_mlp_arrays(self.learner.v_spec, init_rng)
        assert self.learner.meta_spec is not None
        self.w = init_mlp_arrays(self.learner.meta_spec, init_rng)
        if cfg.meta_zero_init:
            self.w = [np.zeros_like(p) for p in self.w]
        self.meta_optim = InnerOptimState.create(
            "adam", self.w, cfg.meta_lr, b1=cfg.adam_b1, b2=cfg.adam_b2, eps=cfg.adam_eps,
            ema_decay=cfg.meta_grad_ema)
        self.mu = MatchingFunction(cfg.matching, cfg.lambda_v)
        self.boot_spec = TargetBootstrapSpec(cfg.L, cfg.eps_meta, cfg.resolved_final_step_lr, cfg.target_final_rule)
        self.stats = MetaStats(cfg.stats_window)
        self.state, _ = reset(np.random.default_rng(env_seq), cfg.flip_period)
        self.total_return = 0.0
        self.cycle = 0

    def named_params(self) -> Dict[str, np.ndarray]:
        out = named_params(self.learner.pi_spec, self.x, "x")
        out.update(named_params(self.learner.v_spec, self.z, "z"))
        assert self.learner.meta_spec is not None
        out.update(named_params(self.learner.meta_spec, self.w, "w"))
        return out

    def stream(self) -> Iterator[Record]:
        cfg = self.cfg
        _LOGGER.info("Actor-critic seed=%d mode=%s K=%d L=%d steps=%d",
                     self.seed, cfg.mode, cfg.K, cfg.L, cfg.total_env_steps)
        while self.state.step_count < cfg.total_env_steps:
            if self.cancelled:
                break
            yield self.run_cycle()
        _LOGGER.info("Actor-critic seed=%d done: return=%.2f after %d steps",
                     self.seed, self.total_return, self.state.step_count)

    def run_cycle(self) -> Record:
        cfg = self.cfg
        learner = self.learner
        assert learner.meta_spec is not None
        matching_loss: Optional[float] = None
        grad_norm: Optional[float] = None
        with ad.Graph(f"cycle-{self.cycle}") as g:
            x = as_leaves(learner.pi_spec, self.x, "x", graph=g)
            z = as_leaves(learner.v_spec, self.z, "z", graph=g)
            w = as_leaves(learner.meta_spec, self.w, "w", graph=g)
            if cfg.mode == "fixed":
                res = inner_loop(learner, x, z, self.state, None, cfg.K, cfg.rollout_len, self.stats, self.rng,
                                 fixed_epsilon=cfg.fixed_epsilon, record=False, recorder=self.recorder)
                rollouts: List[Rollout] = [e.rollout for e in res.trace]
                epsilons = res.epsilons
                x, z, self.state = res.x, res.z, res.state
            else:
                res = inner_loop(learner, x, z, self.state, w, cfg.K, cfg.rollout_len, self.stats, self.rng,
                                 record=True, recorder=self.recorder)
                rollouts = [e.rollout for e in res.trace]
                epsilons = res.epsilons
                if cfg.mode == "mg":
                    step = mg_update(w, res.trace, self.meta_optim, cfg.eps_meta, learner, cfg.mg_objective)
                    x, z, self.state = res.x, res.z, res.state
                else:
                    boot = bootstrap_target(learner, res.x, res.z, w, res.state, self.boot_spec, self.stats,
                                            self.rng, res.rollout, recorder=self.recorder)
                    match_on = res.rollout
                    if cfg.matching_rollout == "latest" and boot.rollouts:
                        match_on = boot.rollouts[-1]
                    step = bmg_update(w, res.x, res.z, boot.target, self.mu, match_on.states,
                                      self.meta_optim, learner)
                    matching_loss = step.loss
                    rollouts += boot.rollouts
                    epsilons += boot.epsilons
                    x, z, self.state = boot.x, boot.z, boot.state
                self.w = step.w
                grad_norm = step.grad_norm
            self.x = ad.values(x)
            self.z = ad.values(z)

        cycle_return = float(np.sum([r.rewards.sum() for r in rollouts]))
        self.total_return += cycle_return
        self.cycle += 1
        rec: Record = {
            "env_step": self.state.step_count,
            "cycle": self.cycle,
            "total_return": self.total_return,
            "cycle_return": cycle_return,
            "epsilon": float(np.mean(epsilons)),
            "matching_loss": matching_loss,
            "meta_grad_norm": grad_norm,
            "policy_entropy": policy_entropy(learner.pi_spec, self.x, rollouts[-1].states),
        }
        _LOGGER.debug("cycle %d: step=%d return=%.2f eps=%.4f", self.cycle, rec["env_step"],
                      self.total_return, rec["epsilon"])
        return rec


def online_bmg_loop(cfg: ExperimentConfig, seed: int) -> Iterator[Record]:
    """Metrics stream of the online bootstrapped loop for ``cfg``."""
    return ActorCriticRunner(cfg.replace(mode="bmg"), seed).stream()
