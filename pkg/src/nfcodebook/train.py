"""Batched gradient training of the codebook phase matrix."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .beamforming import SelectionMatrix, SingularChannelError
from .channel import ChannelBatch
from .codebook import PhaseMatrix
from .grad import loss_gradient

log = logging.getLogger(__name__)

OPTIMIZERS = ("plain-gd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.05
    epochs: int = 200
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def gd_step(theta: PhaseMatrix, gradient: np.ndarray, learning_rate: float) -> PhaseMatrix:
    return PhaseMatrix(theta.theta - learning_rate * np.asarray(gradient))


def adam_step(state: OptimizerState, theta: PhaseMatrix, gradient: np.ndarray,
              learning_rate: float) -> tuple[OptimizerState, PhaseMatrix]:
    g = np.asarray(gradient, dtype=float)
    if g.shape != theta.theta.shape:
        raise ValueError("gradient shape does not match the phase matrix")
    m = np.zeros_like(g) if state.m is None else state.m
    v = np.zeros_like(g) if state.v is None else state.v
    if m.shape != g.shape:
        raise ValueError("optimizer state shape does not match the phase matrix")
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = theta.theta - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), PhaseMatrix(new)


class Optimizer:
    """Stateful wrapper used by the training loops; one instance per run or task."""

    def __init__(self, kind: str, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
        self.kind = kind
        self.learning_rate = learning_rate
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, theta: PhaseMatrix, gradient) -> PhaseMatrix:
        if self.kind == "plain-gd":
            self.state = replace(self.state, step=self.state.step + 1)
            return gd_step(theta, gradient, self.learning_rate)
        self.state, theta = adam_step(self.state, theta, gradient, self.learning_rate)
        return theta


class BatchSampler:
    """Draws batches without replacement, reshuffling once a sweep is used up."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        if size < batch_size:
            raise ValueError(f"dataset of {size} samples is smaller than the batch size {batch_size}")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self._perm = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.size)
            self._pos = 0
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class TrainResult:
    theta: PhaseMatrix
    history: np.ndarray
    # phases, batch indices and selections behind the last history entry
    last_theta: PhaseMatrix | None = None
    last_batch: np.ndarray | None = None
    last_selections: tuple[SelectionMatrix, ...] = field(default_factory=tuple)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, cause: SingularChannelError):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"training aborted at iteration {iteration}: {cause}")


def train_codebook(config: TrainConfig, dataset: ChannelBatch, init: PhaseMatrix, n_chains: int,
                   p_max: float, noise_power: float, rng: np.random.Generator | None = None,
                   progress: bool = False) -> TrainResult:
    """Fit the phases to ``dataset``; history[i] is the batch loss before update i."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if init.n != dataset.n_antennas:
        raise ValueError("initial phase matrix does not match the channel dimension")
    sampler = BatchSampler(len(dataset), config.batch_size, rng)
    opt = Optimizer(config.optimizer, config.learning_rate, config.beta1, config.beta2, config.eps)
    theta = init
    history = np.empty(config.epochs)
    result = TrainResult(theta, history)
    for it in range(config.epochs):
        idx = sampler.next()
        try:
            ev = loss_gradient(theta, dataset.matrices[idx], n_chains, p_max, noise_power)
        except SingularChannelError as exc:
            raise TrainingAborted(it, exc) from exc
        history[it] = ev.loss
        result.last_theta, result.last_batch, result.last_selections = theta, idx, ev.selections
        theta = opt.step(theta, ev.gradient)
        if progress and (it % 50 == 0 or it == config.epochs - 1):
            log.info("iteration %d loss %.6f", it, ev.loss)
    result.theta = theta
    return result


def format_history(values, key: str = "iteration", value_name: str = "loss") -> str:
    lines = [f"{key},{value_name}"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(values)]
    return "\n".join(lines) + "\n"


def parse_history(text: str) -> np.ndarray:
    lines = text.strip().splitlines()[1:]
    return np.array([float(line.split(",")[1]) for line in lines])


def save_history(path, values, key="iteration", value_name="loss") -> None:
    Path(path).write_text(format_history(values, key, value_name))
