from __future__ import annotations

import logging
import time
from typing import Dict, Iterator, List, Optional

import numpy as np

from .base import ConfigError, Record, Stage
from .config import ExperimentConfig
from .matching import MatchingFunction
from .models import named_params
from .multitask import TaskGenerator, Task, classifier_spec, evaluate, init_shared, meta_batch_update
from .optim import InnerOptimState

_LOGGER = logging.getLogger("multitask")


class MultitaskRunner(Stage):
    """Source: meta-trains a shared initialisation on synthetic few-shot tasks.

    Emits a step-0 record holding the untrained-init accuracy (the
    baseline), then one record per meta-step. Meta-test accuracy is
    re-measured every ``multitask_eval_every`` steps and on the last one;
    records in between carry the latest measurement. Wall-clock time is
    kept in ``wall_ms`` beside the stream so the records stay deterministic.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int) -> None:
        super().__init__()
        if cfg.mode not in ("mg", "bmg"):
            raise ConfigError("mode", "multitask supports 'mg' and 'bmg'")
        self.cfg = cfg
        self.seed = seed
        self.spec = classifier_spec(cfg.multitask_dim, cfg.multitask_hidden, cfg.multitask_ways)
        task_seq, init_seq, eval_seq = np.random.SeedSequence(seed).spawn(3)
        self.tasks = self._generator(np.random.default_rng(task_seq))
        self.eval_tasks: List[Task] = self._generator(np.random.default_rng(eval_seq)).sample_batch(
            cfg.multitask_eval_tasks)
        self.w = init_shared(self.spec, np.random.default_rng(init_seq))
        self.meta_optim = InnerOptimState.create("adam", self.w, cfg.meta_lr, b1=cfg.adam_b1, b2=cfg.adam_b2,
                                                 eps=cfg.adam_eps)
        self.mu = MatchingFunction(cfg.matching, cfg.lambda_v)
        self.wall_ms: List[float] = []
        self.baseline_accuracy: Optional[float] = None

    def _generator(self, rng: np.random.Generator) -> TaskGenerator:
        cfg = self.cfg
        return TaskGenerator(rng, ways=cfg.multitask_ways, shots=cfg.multitask_shots,
                             queries=cfg.multitask_queries, dim=cfg.multitask_dim)

    def named_params(self) -> Dict[str, np.ndarray]:
        return named_params(self.spec, self.w, "w")

    def evaluate(self) -> float:
        return evaluate(self.spec, self.w, self.eval_tasks, self.cfg.K, self.cfg.multitask_inner_lr)

    def _record(self, step: int, loss: Optional[float], acc: float) -> Record:
        cfg = self.cfg
        return {"meta_step": step, "mode": cfg.mode, "K": cfg.K, "L": cfg.L,
                "meta_train_loss": loss, "meta_test_accuracy": acc}

    def stream(self) -> Iterator[Record]:
        cfg = self.cfg
        _LOGGER.info("Multitask seed=%d mode=%s K=%d L=%d matching=%s steps=%d", self.seed, cfg.mode, cfg.K,
                     cfg.L, cfg.matching, cfg.multitask_meta_steps)
        start = time.perf_counter()
        acc = self.evaluate()
        self.baseline_accuracy = acc
        self.wall_ms.append((time.perf_counter() - start) * 1000.0)
        yield self._record(0, None, acc)
        for step in range(1, cfg.multitask_meta_steps + 1):
            if self.cancelled:
                break
            start = time.perf_counter()
            batch = self.tasks.sample_batch(cfg.multitask_meta_batch)
            res = meta_batch_update(self.spec, self.w, batch, cfg.K, cfg.L, cfg.multitask_inner_lr, cfg.mode,
                                    self.mu, self.meta_optim, cfg.multitask_temperature)
            self.w = res.w
            if step % cfg.multitask_eval_every == 0 or step == cfg.multitask_meta_steps:
                acc = self.evaluate()
                _LOGGER.debug("meta step %d: loss=%.5f accuracy=%.4f", step, res.meta_loss, acc)
            self.wall_ms.append((time.perf_counter() - start) * 1000.0)
            yield self._record(step, res.meta_loss, acc)
        _LOGGER.info("Multitask seed=%d done: accuracy %.4f (untrained %.4f)", self.seed, acc,
                     self.baseline_accuracy)
