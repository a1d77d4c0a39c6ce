"""First-order MAML over user-distribution tasks.

The inner loop adapts a copy of the outer phases ``omega`` to a task's
support set; the outer loop moves ``omega`` along the query-set gradients
taken at the adapted phases (first-order approximation: the inner
trajectory is treated as constant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .beamforming import SingularChannelError
from .channel import ChannelBatch, Scenario, generate_batch
from .codebook import PhaseMatrix
from .geometry import ArrayGeometry
from .grad import loss_gradient, per_sample_rates
from .train import OPTIMIZERS, Optimizer

OUTER_MODES = ("first-order",)


@dataclass
class Task:
    support: ChannelBatch
    query: ChannelBatch
    scenario: str = ""

    def __post_init__(self):
        if len(self.support) == 0 or len(self.query) == 0:
            raise ValueError("support and query sets must be nonempty")
        if (self.support.n_antennas, self.support.n_users) != (self.query.n_antennas, self.query.n_users):
            raise ValueError("support and query sets must share N and K")


@dataclass(frozen=True)
class MetaConfig:
    task_batch_size: int = 4
    inner_steps: int = 5
    inner_rate: float = 0.05
    outer_rate: float = 2.0
    epochs: int = 100
    inner_optimizer: str = "adam"
    outer_mode: str = "first-order"
    seed: int = 0

    def __post_init__(self):
        if self.task_batch_size < 1:
            raise ValueError("task_batch_size must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_rate < 0 or self.outer_rate < 0:
            raise ValueError("learning rates must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.inner_optimizer not in OPTIMIZERS:
            raise ValueError(f"inner_optimizer must be one of {OPTIMIZERS}")
        if self.outer_mode not in OUTER_MODES:
            raise ValueError(f"outer_mode must be one of {OUTER_MODES}")


class TaskError(RuntimeError):
    def __init__(self, cause: Exception, epoch: int | None = None, task: int | None = None):
        self.cause, self.epoch, self.task = cause, epoch, task
        where = ", ".join(f"{k} {v}" for k, v in (("epoch", epoch), ("task", task)) if v is not None)
        super().__init__(f"{where}: {cause}")


def build_tasks(geom: ArrayGeometry, scenario_family: Sequence[Scenario], n_tasks: int,
                support_size: int, query_size: int, rng: np.random.Generator) -> list[Task]:
    """Draw ``n_tasks`` tasks, each from one scenario of the family.

    Support and query are independent draws, so they never share a matrix.
    """
    if n_tasks < 1:
        raise ValueError("need at least one task")
    if not scenario_family:
        raise ValueError("scenario family is empty")
    tasks = []
    for _ in range(n_tasks):
        sc = scenario_family[rng.integers(len(scenario_family))]
        support = generate_batch(geom, sc, support_size, rng)
        query = generate_batch(geom, sc, query_size, rng)
        tasks.append(Task(support, query, sc.name))
    return tasks


def inner_adapt(omega: PhaseMatrix, support: ChannelBatch, steps: int, rate: float, optimizer: str,
                n_chains: int, p_max: float, noise_power: float) -> PhaseMatrix:
    """Run ``steps`` optimizer steps on the support loss starting from ``omega``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    opt = Optimizer(optimizer, rate)
    psi = omega
    for _ in range(steps):
        ev = loss_gradient(psi, support, n_chains, p_max, noise_power)
        psi = opt.step(psi, ev.gradient)
    return psi


@dataclass
class MetaResult:
    omega: PhaseMatrix
    history: np.ndarray
    adapted: list[list[tuple[int, PhaseMatrix]]]


def meta_train(config: MetaConfig, tasks: Sequence[Task], init: PhaseMatrix, n_chains: int,
               p_max: float, noise_power: float, rng: np.random.Generator | None = None,
               keep_adapted: bool = False) -> MetaResult:
    """Outer loop; history[e] is the summed query loss of epoch e's tasks at their adapted phases."""
    if len(tasks) < config.task_batch_size:
        raise ValueError(f"{len(tasks)} tasks available, task batch needs {config.task_batch_size}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    omega = init
    history = np.empty(config.epochs)
    adapted: list[list[tuple[int, PhaseMatrix]]] = []
    for epoch in range(config.epochs):
        chosen = rng.choice(len(tasks), size=config.task_batch_size, replace=False)
        meta_loss = 0.0
        meta_grad = np.zeros_like(omega.theta)
        record = []
        for t in chosen:
            task = tasks[int(t)]
            try:
                psi = inner_adapt(omega, task.support, config.inner_steps, config.inner_rate,
                                  config.inner_optimizer, n_chains, p_max, noise_power)
                ev = loss_gradient(psi, task.query, n_chains, p_max, noise_power)
            except SingularChannelError as exc:
                raise TaskError(exc, epoch=epoch, task=int(t)) from exc
            meta_loss += ev.loss
            meta_grad += ev.gradient
            if keep_adapted:
                record.append((int(t), psi))
        history[epoch] = meta_loss
        omega = PhaseMatrix(omega.theta - (config.outer_rate / config.task_batch_size) * meta_grad)
        if keep_adapted:
            adapted.append(record)
    return MetaResult(omega, history, adapted)


def mean_rate(theta: PhaseMatrix, batch: ChannelBatch, n_chains: int, p_max: float,
              noise_power: float, on_singular: str = "zero") -> float:
    """Mean sum-rate over ``batch``; see :func:`per_sample_rates` for ``on_singular``."""
    return float(np.mean(per_sample_rates(theta, batch, n_chains, p_max, noise_power,
                                          on_singular=on_singular)))


def adapt_and_evaluate(omega: PhaseMatrix, scenario: Scenario, steps: int, rate: float,
                       eval_size: int, geom: ArrayGeometry, n_chains: int, p_max: float,
                       noise_power: float, rng: np.random.Generator, support_size: int | None = None,
                       optimizer: str = "adam") -> tuple[float, PhaseMatrix]:
    """Adapt ``omega`` on a fresh support set of ``scenario``; score it on a held-out batch.

    Returns the mean sum-rate over the evaluation batch and the adapted phases.
    """
    if eval_size < 1:
        raise ValueError("eval_size must be >= 1")
    support = generate_batch(geom, scenario, support_size or eval_size, rng)
    held_out = generate_batch(geom, scenario, eval_size, rng)
    psi = inner_adapt(omega, support, steps, rate, optimizer, n_chains, p_max, noise_power)
    return mean_rate(psi, held_out, n_chains, p_max, noise_power), psi
