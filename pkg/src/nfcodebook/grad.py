"""Negative mean sum-rate loss and its exact gradient with respect to the phases.

The beam selection is discrete, so it is treated as a constant in the
backward pass: the gradient is that of the loss with every sample's
selection frozen at its forward value. Complex intermediates carry
gradients in the convention ``g = dL/dRe(z) + j dL/dIm(z)``, so that
``dL = Re(sum(conj(g) * dz))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .beamforming import DEFAULT_MAX_CONDITION, SelectionMatrix, SingularChannelError, mms_select
from .channel import ChannelBatch
from .codebook import PhaseMatrix, synthesize

LN2 = np.log(2.0)


@dataclass(frozen=True)
class LossEvaluation:
    loss: float
    gradient: np.ndarray
    rates: np.ndarray
    selections: tuple[SelectionMatrix, ...]


def _as_theta(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, PhaseMatrix) else np.asarray(theta, dtype=float)


def _as_h(batch) -> np.ndarray:
    h = batch.matrices if isinstance(batch, ChannelBatch) else np.asarray(batch, dtype=np.complex128)
    if h.ndim == 2:
        h = h[None]
    if h.shape[0] == 0:
        raise ValueError("loss needs a nonempty batch")
    return h


def select_all(theta, batch, n_chains: int) -> tuple[SelectionMatrix, ...]:
    """MMS selections for every sample at the given phases."""
    h = _as_h(batch)
    u = synthesize(_as_theta(theta)).u
    hbar = np.einsum("nm,bnk->bmk", u.conj(), h)
    return tuple(mms_select(hbar[b], n_chains) for b in range(h.shape[0]))


class _Forward:
    """Batched forward pass with the intermediates needed for the backward pass."""

    def __init__(self, theta, h, n_chains, p_max, noise_power, selections, max_condition):
        if not noise_power > 0:
            raise ValueError("noise power must be > 0")
        self.theta = _as_theta(theta)
        self.h = h
        n = self.theta.shape[0]
        if h.shape[1] != n:
            raise ValueError(f"channel has {h.shape[1]} antennas but the phase matrix is {n} x {n}")
        self.u = synthesize(self.theta).u
        hbar = np.einsum("nm,bnk->bmk", self.u.conj(), h)
        if selections is None:
            selections = tuple(mms_select(hbar[b], n_chains) for b in range(h.shape[0]))
        elif len(selections) != h.shape[0]:
            raise ValueError("one frozen selection per sample is required")
        self.selections = tuple(selections)
        self.beams = np.array([s.beams for s in self.selections], dtype=int)
        m = self.beams.shape[1]
        k = h.shape[2]
        if m < k:
            raise SingularChannelError(np.inf, sample=0, context=f"({m} RF chains for {k} users)")
        self.heq = np.take_along_axis(hbar, self.beams[:, :, None], axis=1)
        gram = np.conj(np.swapaxes(self.heq, 1, 2)) @ self.heq
        cond = np.linalg.cond(gram)
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > max_condition))
        if bad.size:
            raise SingularChannelError(float(cond[bad[0]]), sample=int(bad[0]))
        self.ginv = np.linalg.inv(gram)
        self.pbar = self.heq @ self.ginv
        self.power = np.sum(self.pbar.real**2 + self.pbar.imag**2, axis=(1, 2))
        self.scale = np.sqrt(p_max / self.power)
        self.p = self.scale[:, None, None] * self.pbar
        self.e = np.conj(np.swapaxes(self.heq, 1, 2)) @ self.p
        pw = self.e.real**2 + self.e.imag**2
        self.signal = np.diagonal(pw, axis1=1, axis2=2)
        self.total = pw.sum(axis=2) + noise_power
        self.interf = self.total - self.signal
        self.rates = np.sum(np.log2(self.total) - np.log2(self.interf), axis=1)
        self.loss = -float(np.mean(self.rates))

    def backward(self) -> np.ndarray:
        b, _, k = self.h.shape
        eye = np.eye(k, dtype=bool)
        # d(-mean R)/d|E_ki|^2, then d|z|^2 -> 2 z
        w = 1.0 / self.total[:, :, None] - np.where(eye, 0.0, 1.0 / self.interf[:, :, None])
        g_e = -(2.0 / (b * LN2)) * w * self.e
        heq_h = np.conj(np.swapaxes(self.heq, 1, 2))
        # E = Heq^H P
        g_heq = self.p @ np.conj(np.swapaxes(g_e, 1, 2))
        g_p = self.heq @ g_e
        # P = s * Pbar, s = sqrt(p_max / tr(Pbar^H Pbar))
        g_s = np.real(np.sum(np.conj(g_p) * self.pbar, axis=(1, 2)))
        g_t = g_s * (-self.scale / (2.0 * self.power))
        g_pbar = self.scale[:, None, None] * g_p + 2.0 * g_t[:, None, None] * self.pbar
        # Pbar = Heq Ginv, Ginv = (Heq^H Heq)^-1
        ginv_h = np.conj(np.swapaxes(self.ginv, 1, 2))
        g_heq = g_heq + g_pbar @ ginv_h
        g_ginv = heq_h @ g_pbar
        g_gram = -(ginv_h @ g_ginv @ ginv_h)
        g_heq = g_heq + self.heq @ (g_gram + np.conj(np.swapaxes(g_gram, 1, 2)))
        # Heq = V^H H with V the selected codebook columns
        g_v = self.h @ np.conj(np.swapaxes(g_heq, 1, 2))
        n = self.u.shape[0]
        g_ut = np.zeros((n, n), dtype=np.complex128)
        # sequential scatter-add keeps the reduction order fixed
        np.add.at(g_ut, self.beams.ravel(), np.swapaxes(g_v, 1, 2).reshape(-1, n))
        g_u = g_ut.T
        # U = exp(j Theta) / sqrt(N)
        return np.imag(g_u * np.conj(self.u))


def loss(theta, batch, n_chains: int, p_max: float, noise_power: float,
         selections: Sequence[SelectionMatrix] | None = None,
         max_condition: float = DEFAULT_MAX_CONDITION) -> float:
    """Negative mean sum-rate over the batch.

    ``selections`` freezes the beam selection per sample; by default MMS runs
    on the current codebook.
    """
    return _Forward(theta, _as_h(batch), n_chains, p_max, noise_power, selections, max_condition).loss


def per_sample_rates(theta, batch, n_chains, p_max, noise_power, selections=None,
                     max_condition=DEFAULT_MAX_CONDITION, on_singular: str = "raise") -> np.ndarray:
    """Sum-rate of every sample.

    With ``on_singular="zero"`` samples whose ZF Gram matrix exceeds
    ``max_condition`` score 0, the limit of the ZF rate as the Gram matrix
    degenerates (the power normalisation drives the effective gain to 0).
    """
    h = _as_h(batch)
    if on_singular == "raise":
        return _Forward(theta, h, n_chains, p_max, noise_power, selections, max_condition).rates.copy()
    if on_singular != "zero":
        raise ValueError(f"on_singular must be 'raise' or 'zero', got {on_singular!r}")
    if selections is None:
        selections = select_all(theta, h, n_chains)
    u = synthesize(_as_theta(theta)).u
    good = np.zeros(h.shape[0], dtype=bool)
    for b, sel in enumerate(selections):
        if sel.n_chains < h.shape[2]:
            continue
        heq = u[:, list(sel.beams)].conj().T @ h[b]
        cond = np.linalg.cond(heq.conj().T @ heq)
        good[b] = np.isfinite(cond) and cond <= max_condition
    rates = np.zeros(h.shape[0])
    if good.any():
        keep = [s for s, ok in zip(selections, good) if ok]
        rates[good] = _Forward(theta, h[good], n_chains, p_max, noise_power, keep, max_condition).rates
    return rates


def loss_gradient(theta, batch, n_chains: int, p_max: float, noise_power: float,
                  selections: Sequence[SelectionMatrix] | None = None,
                  max_condition: float = DEFAULT_MAX_CONDITION) -> LossEvaluation:
    fwd = _Forward(theta, _as_h(batch), n_chains, p_max, noise_power, selections, max_condition)
    return LossEvaluation(fwd.loss, fwd.backward(), fwd.rates.copy(), fwd.selections)


def central_difference(func, x: np.ndarray, step: float) -> np.ndarray:
    """Entry-wise central differences of a scalar function of an array."""
    if not step > 0:
        raise ValueError("step must be > 0")
    x0 = np.array(x, dtype=float)
    grad = np.zeros_like(x0)
    t = x0.copy()
    for idx in np.ndindex(x0.shape):
        t[idx] = x0[idx] + step
        up = func(t)
        t[idx] = x0[idx] - step
        down = func(t)
        t[idx] = x0[idx]
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def finite_difference_gradient(theta, batch, n_chains: int, p_max: float, noise_power: float,
                               step: float = 1e-6,
                               selections: Sequence[SelectionMatrix] | None = None) -> np.ndarray:
    """Central differences of :func:`loss` with the selection frozen at ``theta``."""
    t0 = _as_theta(theta)
    h = _as_h(batch)
    if selections is None:
        selections = select_all(t0, h, n_chains)
    return central_difference(lambda t: loss(t, h, n_chains, p_max, noise_power, selections), t0, step)


def gradient_relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Max absolute deviation normalised by the largest reference entry."""
    scale = np.max(np.abs(reference))
    diff = np.max(np.abs(analytic - reference))
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)
