"""Referenced-Poisson data model for room-temperature NV readout.

A single experiment with N repetitions yields a count triple d = (X, Y, Z):

    X ~ Poisson(N * alpha1)                        bright reference
    Y ~ Poisson(N * beta1)                         dark reference
    Z ~ Poisson(N * (beta1 + p * (alpha1 - beta1)))  signal

with per-shot rates 0 < beta1 < alpha1 and survival probability p.

The effective-strong-measurement (ESM) metric converts a referenced triple
into the equivalent number of two-outcome projective measurements.  Its
inputs are *total* expected counts (already multiplied by N) and the
standard deviations of those totals; callers convert per-shot quantities
via alpha_hat = N * alpha1, sigma_alpha = N * sigma1_alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy


@dataclass(frozen=True)
class ReferenceRates:
    """Per-shot expected photon counts for the bright and dark references."""

    bright: float
    dark: float

    def __post_init__(self):
        if not 0.0 < self.dark < self.bright:
            raise ValueError(
                f"need 0 < dark < bright, got dark={self.dark}, bright={self.bright}"
            )


@dataclass(frozen=True)
class Datum:
    """One measured count triple with its repetition count and timestamp (s)."""

    bright_counts: int
    dark_counts: int
    signal_counts: int
    repetitions: int
    timestamp: float = 0.0

    def __post_init__(self):
        if min(self.bright_counts, self.dark_counts, self.signal_counts) < 0:
            raise ValueError("counts must be nonnegative")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def to_dict(self) -> dict:
        return {
            "X": self.bright_counts,
            "Y": self.dark_counts,
            "Z": self.signal_counts,
            "N": self.repetitions,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Datum":
        return cls(
            bright_counts=int(d["X"]),
            dark_counts=int(d["Y"]),
            signal_counts=int(d["Z"]),
            repetitions=int(d["N"]),
            timestamp=float(d.get("timestamp", 0.0)),
        )


@dataclass(frozen=True)
class EsmInputs:
    """Total expected reference counts and their standard deviations."""

    alpha_hat: float
    beta_hat: float
    sigma_alpha: float = 0.0
    sigma_beta: float = 0.0

    def __post_init__(self):
        if not self.alpha_hat > self.beta_hat >= 0.0:
            raise ValueError(
                f"need alpha_hat > beta_hat >= 0, got {self.alpha_hat}, {self.beta_hat}"
            )
        if self.sigma_alpha < 0 or self.sigma_beta < 0:
            raise ValueError("sigmas must be nonnegative")


def sample_datum(
    p: float,
    refs: ReferenceRates,
    repetitions: int,
    rng: np.random.Generator,
    timestamp: float = 0.0,
) -> Datum:
    """Draw one (X, Y, Z) triple for survival probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    n = repetitions
    x = int(rng.poisson(n * refs.bright))
    y = int(rng.poisson(n * refs.dark))
    z = int(rng.poisson(n * (refs.dark + p * (refs.bright - refs.dark))))
    return Datum(x, y, z, n, timestamp)


def poisson_logpmf(counts, rates):
    """log Poisson pmf, elementwise; -inf where rate is 0 but the count is not."""
    counts = np.asarray(counts, dtype=float)
    rates = np.asarray(rates, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = xlogy(counts, rates) - rates - gammaln(counts + 1.0)
    return out


def log_likelihood(datum: Datum, alpha1, beta1, p):
    """Joint log-likelihood of one datum given per-shot rates and survival p.

    ``alpha1``, ``beta1`` and ``p`` may be arrays of hypothesis values; the
    result broadcasts over them.
    """
    n = datum.repetitions
    alpha1 = np.asarray(alpha1, dtype=float)
    beta1 = np.asarray(beta1, dtype=float)
    p = np.asarray(p, dtype=float)
    signal_rate = n * (beta1 + p * (alpha1 - beta1))
    out = (
        poisson_logpmf(datum.bright_counts, n * alpha1)
        + poisson_logpmf(datum.dark_counts, n * beta1)
        + poisson_logpmf(datum.signal_counts, signal_rate)
    )
    if out.ndim == 0:
        return float(out)
    return out


def esm(inputs: EsmInputs) -> float:
    """Number of effective strong measurements carried by one triple."""
    contrast = inputs.alpha_hat - inputs.beta_hat
    total = inputs.alpha_hat + inputs.beta_hat
    return contrast**2 / (
        3.0 * total + 2.0 * (inputs.sigma_alpha**2 + inputs.sigma_beta**2)
    )


def choose_repetitions(
    per_shot: ReferenceRates,
    per_shot_sigmas: tuple,
    target_esm: float,
    n_max: int = 1_000_000,
) -> tuple:
    """Smallest repetition count whose expected ESM reaches ``target_esm``.

    Totals scale as alpha_hat = N*alpha1, sigma_alpha = N*sigma1_alpha, so
    ESM(N) = N*delta^2 / (3*s + 2*N*sigma2) with delta = alpha1 - beta1,
    s = alpha1 + beta1 and sigma2 = sigma1_alpha^2 + sigma1_beta^2.  When
    delta^2 <= 2*target*sigma2 the target is unreachable for any N and
    ``n_max`` is returned with ``saturated=True``.

    Returns ``(n, saturated)``.
    """
    if target_esm <= 0:
        raise ValueError("target_esm must be positive")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    delta = per_shot.bright - per_shot.dark
    total = per_shot.bright + per_shot.dark
    sigma2 = per_shot_sigmas[0] ** 2 + per_shot_sigmas[1] ** 2
    headroom = delta**2 - 2.0 * target_esm * sigma2
    if headroom <= 0.0:
        return n_max, True
    n = math.ceil(3.0 * target_esm * total / headroom)
    n = max(n, 1)
    if n > n_max:
        return n_max, True
    return n, False


def fisher_information(p: float, alpha: float, beta: float) -> np.ndarray:
    """Fisher information of one (X, Y, Z) triple in the order (p, alpha, beta)."""
    _check_fisher_args(p, alpha, beta)
    lam = p * (alpha - beta) + beta
    return np.array(
        [
            [
                (alpha - beta) ** 2 / lam,
                p * (alpha - beta) / lam,
                alpha / lam - 1.0,
            ],
            [
                p * (alpha - beta) / lam,
                p**2 / lam + 1.0 / alpha,
                -(p - 1.0) * p / lam,
            ],
            [
                alpha / lam - 1.0,
                -(p - 1.0) * p / lam,
                (p * alpha + (p - 2.0) * (p - 1.0) * beta) / (beta * lam),
            ],
        ]
    )


def fisher_information_inverse(p: float, alpha: float, beta: float) -> np.ndarray:
    """Closed-form inverse of :func:`fisher_information`."""
    _check_fisher_args(p, alpha, beta)
    contrast = alpha - beta
    return np.array(
        [
            [
                (p * (p + 1.0) * alpha + (p - 2.0) * (p - 1.0) * beta) / contrast**2,
                p * alpha / (beta - alpha),
                (p - 1.0) * beta / contrast,
            ],
            [p * alpha / (beta - alpha), alpha, 0.0],
            [(p - 1.0) * beta / contrast, 0.0, beta],
        ]
    )


def interpolated_variance_bound(
    p: float, alpha: float, beta: float, sigma_alpha: float, sigma_beta: float
) -> float:
    """Variance bound on estimating p with partial prior reference knowledge.

    Interpolates between perfect reference knowledge (sigma -> 0, giving
    1/J_pp) and the knowledge contained in a single (X, Y) reference draw
    (sigma_alpha^2 -> alpha, sigma_beta^2 -> beta, giving (J^-1)_pp).
    """
    _check_fisher_args(p, alpha, beta)
    sa2 = sigma_alpha**2
    sb2 = sigma_beta**2
    return (
        beta + p * (alpha - beta + p * sa2 + (p - 2.0) * sb2) + sb2
    ) / (alpha - beta) ** 2


def _check_fisher_args(p, alpha, beta):
    if not 0.0 < beta < alpha:
        raise ValueError(f"need 0 < beta < alpha, got beta={beta}, alpha={alpha}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
