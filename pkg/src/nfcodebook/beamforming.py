"""Hybrid precoding chain: beamspace projection, MMS selection, ZF precoding, sum-rate."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .codebook import Codebook

DEFAULT_MAX_CONDITION = 1e12


class SingularChannelError(ArithmeticError):
    """The ZF Gram matrix is singular or too ill-conditioned to invert."""

    def __init__(self, condition: float, sample: int | None = None, context: str = ""):
        self.condition = condition
        self.sample = sample
        where = f" (sample {sample})" if sample is not None else ""
        extra = f" {context}" if context else ""
        super().__init__(f"ZF Gram matrix is ill-conditioned: cond = {condition:.3e}{where}{extra}")


@dataclass(frozen=True)
class SelectionMatrix:
    """Binary N x M beam-to-RF-chain assignment, stored as the beam index per chain."""

    beams: tuple[int, ...]
    n_beams: int

    def __post_init__(self):
        if len(set(self.beams)) != len(self.beams):
            raise ValueError("a beam may be selected by at most one RF chain")
        if any(not 0 <= b < self.n_beams for b in self.beams):
            raise ValueError("beam index out of range")

    @property
    def n_chains(self) -> int:
        return len(self.beams)

    @property
    def f(self) -> np.ndarray:
        out = np.zeros((self.n_beams, self.n_chains))
        out[list(self.beams), np.arange(self.n_chains)] = 1.0
        return out

    @classmethod
    def from_matrix(cls, f) -> "SelectionMatrix":
        f = np.asarray(f)
        if not np.all((f == 0) | (f == 1)):
            raise ValueError("selection entries must be 0 or 1")
        if not np.all(f.sum(axis=0) == 1):
            raise ValueError("each RF chain must select exactly one beam")
        if not np.all(f.sum(axis=1) <= 1):
            raise ValueError("each beam may be selected by at most one RF chain")
        return cls(tuple(int(i) for i in np.argmax(f, axis=0)), f.shape[0])


@dataclass(frozen=True)
class Precoder:
    p: np.ndarray
    scale: float  # c: the effective channel is c * I under exact ZF


def beamspace(h: np.ndarray, codebook: Codebook | np.ndarray) -> np.ndarray:
    """H_bar = U^H H."""
    u = codebook.u if isinstance(codebook, Codebook) else np.asarray(codebook)
    h = np.asarray(h)
    if u.shape[0] != h.shape[-2]:
        raise ValueError(f"codebook has {u.shape[0]} rows but channel has {h.shape[-2]} antennas")
    return u.conj().T @ h


def mms_select(hbar: np.ndarray, n_chains: int) -> SelectionMatrix:
    """Greedy maximum-magnitude selection.

    Beam/user pairs are scanned by descending energy |H_bar[n, k]|^2 (ties to
    lower n, then lower k); a pair is taken if both the beam and the user are
    still free. Served users get chains in ascending user order. Chains left
    over when M > K receive the free beams with the largest total energy.
    """
    hbar = np.asarray(hbar)
    n, k = hbar.shape
    if n_chains > n:
        raise ValueError(f"cannot select {n_chains} beams from a codebook of {n}")
    if n_chains < 1:
        raise ValueError("need at least one RF chain")
    if n_chains < k:
        warnings.warn(
            f"{k} users but only {n_chains} RF chains; serving the {n_chains} strongest users",
            RuntimeWarning,
            stacklevel=2,
        )
    energy = hbar.real**2 + hbar.imag**2
    flat = energy.ravel()
    # lexsort: last key is primary; flat index order encodes (n, k) ties
    order = np.lexsort((np.arange(flat.size), -flat))
    beam_taken = np.zeros(n, dtype=bool)
    user_beam = {}
    target = min(n_chains, k)
    for idx in order:
        b, u = divmod(int(idx), k)
        if beam_taken[b] or u in user_beam:
            continue
        beam_taken[b] = True
        user_beam[u] = b
        if len(user_beam) == target:
            break
    beams = [user_beam[u] for u in sorted(user_beam)]
    if n_chains > k:
        total = energy.sum(axis=1)
        free = np.flatnonzero(~beam_taken)
        extra = free[np.lexsort((free, -total[free]))][: n_chains - k]
        beams.extend(int(b) for b in extra)
    return SelectionMatrix(tuple(beams), n)


def equivalent_channel(hbar: np.ndarray, selection: SelectionMatrix) -> np.ndarray:
    """H_eq = F^T H_bar, i.e. the selected rows of the beamspace channel."""
    hbar = np.asarray(hbar)
    if hbar.shape[-2] != selection.n_beams:
        raise ValueError("selection does not match the beamspace dimension")
    return hbar[..., list(selection.beams), :]


def zf_precoder(heq: np.ndarray, p_max: float, max_condition: float = DEFAULT_MAX_CONDITION) -> Precoder:
    """Power-normalised zero-forcing precoder P = c H_eq (H_eq^H H_eq)^-1."""
    heq = np.asarray(heq, dtype=np.complex128)
    m, k = heq.shape
    if m < k:
        raise SingularChannelError(np.inf, context=f"(rank-deficient: {m} chains for {k} users)")
    gram = heq.conj().T @ heq
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularChannelError(float(cond))
    pbar = heq @ np.linalg.inv(gram)
    power = np.real(np.vdot(pbar, pbar))
    c = np.sqrt(p_max / power)
    return Precoder(c * pbar, float(c))


@dataclass(frozen=True)
class RateReport:
    sum_rate: float
    rates: np.ndarray
    signal: np.ndarray
    interference: np.ndarray


def effective_channel(h, codebook, selection: SelectionMatrix, precoder: Precoder | np.ndarray) -> np.ndarray:
    """E[k, i] = h_k^H U F p_i."""
    p = precoder.p if isinstance(precoder, Precoder) else np.asarray(precoder)
    heq = equivalent_channel(beamspace(h, codebook), selection)
    return heq.conj().T @ p


def rate_terms(e: np.ndarray, noise_power: float) -> RateReport:
    power = e.real**2 + e.imag**2
    signal = np.diag(power).copy()
    interference = power.sum(axis=1) - signal
    rates = np.log2(1.0 + signal / (interference + noise_power))
    return RateReport(float(rates.sum()), rates, signal, interference)


def sum_rate(h, codebook, selection: SelectionMatrix, precoder, noise_power: float) -> float:
    if not noise_power > 0:
        raise ValueError("noise power must be > 0")
    return rate_terms(effective_channel(h, codebook, selection, precoder), noise_power).sum_rate


def sum_rate_report(h, codebook, selection, precoder, noise_power: float) -> RateReport:
    if not noise_power > 0:
        raise ValueError("noise power must be > 0")
    return rate_terms(effective_channel(h, codebook, selection, precoder), noise_power)


def evaluate_codebook(h, codebook: Codebook, n_chains: int, p_max: float, noise_power: float,
                      max_condition: float = DEFAULT_MAX_CONDITION) -> float:
    """Run MMS + ZF on one channel matrix and return its sum-rate."""
    hbar = beamspace(h, codebook)
    sel = mms_select(hbar, n_chains)
    prec = zf_precoder(equivalent_channel(hbar, sel), p_max, max_condition)
    return sum_rate(h, codebook, sel, prec, noise_power)
