"""Bayes-risk evaluation of candidate experiments.

The risk of a candidate configuration is the expected Q-weighted posterior
mean-squared error after observing one more datum.  Both estimators sample
hypothetical outcomes from the joint particle/datum distribution:

* the brute-force estimator re-approximates the posterior with the sampled
  outcome particles themselves (O(K'^2) likelihood evaluations), and
* the maximum-importance-sampling (MIS) estimator reweights a fixed
  down-sampled inner cloud once per sampled outcome (O(K*K') evaluations,
  O(K') outcome samples).

Estimators are generic over an outcome model exposing

    sample_counts(locations, config, rng) -> (n, 3) count array
    log_likelihood_matrix(counts, locations, config) -> (n, K)

so that small analytically tractable models can stand in for the NV model
in verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import smc
from .qutrit import survival_probabilities
from .smc import IDX_ALPHA, IDX_BETA, SPIN_SLICE, ParticleCloud


@dataclass(frozen=True)
class RiskEstimate:
    """A sampled Bayes-risk value with its Monte Carlo standard error."""

    value: float
    std_error: float
    n_outcomes: int
    n_particles: int
    n_dropped: int = 0

    def __post_init__(self):
        if self.value < 0 and self.value > -1e-12:
            object.__setattr__(self, "value", 0.0)
        if self.value < 0:
            raise ValueError(f"risk must be nonnegative, got {self.value}")

    @property
    def reliable(self) -> bool:
        """False when more than 5% of sampled outcomes underflowed."""
        return self.n_dropped <= 0.05 * self.n_outcomes


def spin_weight_matrix(diagonal) -> np.ndarray:
    """A 10x10 weight matrix with the given diagonal over the five spin
    parameters and zeros for reference and drift coordinates."""
    diagonal = np.asarray(diagonal, dtype=float)
    if diagonal.shape != (5,):
        raise ValueError("expected five spin-parameter weights")
    q = np.zeros((smc.N_PARAMS, smc.N_PARAMS))
    q[:5, :5] = np.diag(diagonal)
    return q


def uniform_weight_matrix() -> np.ndarray:
    return spin_weight_matrix([1.0, 1.0, 1.0, 1.0, 1.0])


def magnetometry_weight_matrix() -> np.ndarray:
    return spin_weight_matrix([0.0, 1.0, 0.0, 0.0, 0.0])


def _check_q(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (dim, dim):
        raise ValueError(f"weight matrix must be {dim}x{dim}, got {q.shape}")
    if not np.allclose(q, q.T):
        raise ValueError("weight matrix must be symmetric")
    return q


class NvModel:
    """Referenced-Poisson outcome model over full 10-parameter hypotheses.

    ``survival_fn(spin_locations, config) -> p`` may be swapped for a cached
    evaluator; the default runs the exact batched simulator.  Callers that
    already hold survival probabilities for the particles at hand can pass
    them through the ``p`` keyword to skip the simulation entirely.
    """

    def __init__(self, survival_fn=None):
        self.survival_fn = survival_fn or survival_probabilities

    def _rates(self, locations, config, p=None):
        if p is None:
            p = self.survival_fn(locations[:, SPIN_SLICE], config)
        alpha = locations[:, IDX_ALPHA]
        beta = locations[:, IDX_BETA]
        n = config.repetitions
        return n * alpha, n * beta, n * (beta + p * (alpha - beta))

    def sample_counts(self, locations, config, rng, p=None) -> np.ndarray:
        rate_x, rate_y, rate_z = self._rates(locations, config, p)
        return np.column_stack(
            [rng.poisson(rate_x), rng.poisson(rate_y), rng.poisson(rate_z)]
        )

    def log_likelihood_matrix(self, counts, locations, config, p=None) -> np.ndarray:
        """(n_outcomes, K) joint log-likelihood table.

        The Poisson triple factorizes as counts @ log(rates) minus
        outcome-only and particle-only terms, so the table is a single
        matrix product.
        """
        rate_x, rate_y, rate_z = self._rates(locations, config, p)
        log_rates = np.log(np.vstack([rate_x, rate_y, rate_z]))
        counts = np.asarray(counts, dtype=float)
        table = counts @ log_rates
        table -= rate_x + rate_y + rate_z
        table -= gammaln(counts + 1.0).sum(axis=1)[:, None]
        return table


def _posterior_weight_table(log_table, base_weights):
    """Row-normalized posterior weights; returns (weights, kept_row_mask)."""
    shift = np.max(log_table, axis=1)
    kept = np.isfinite(shift)
    weights = np.zeros_like(log_table)
    if np.any(kept):
        block = np.exp(log_table[kept] - shift[kept, None]) * base_weights
        totals = block.sum(axis=1)
        good = totals > 0
        block[good] /= totals[good, None]
        weights[kept] = block
        kept_idx = np.flatnonzero(kept)
        kept[kept_idx[~good]] = False
    return weights, kept


def _active_block(q):
    """Indices touched by the weight matrix, and the reduced block."""
    active = np.flatnonzero(np.any(q != 0, axis=0) | np.any(q != 0, axis=1))
    return active, q[np.ix_(active, active)]


def _weighted_variance_terms(log_table, base_weights, locations, q, dtype):
    """Per-outcome Tr[Q Cov(posterior)] without materializing normalized
    weight rows.

    Locations are centered at their weighted mean first, which keeps the
    second-moment/mean-square cancellation at posterior-variance scale and
    makes a float32 fast path safe for risk ranking.  Returns
    ``(terms, kept_row_mask)``.
    """
    n_rows = log_table.shape[0]
    active, q_block = _active_block(np.asarray(q))
    shift = np.max(log_table, axis=1)
    kept = np.isfinite(shift)
    if len(active) == 0 or not np.any(kept):
        return np.zeros(n_rows), kept
    centered = locations[:, active] - base_weights @ locations[:, active]
    quadratic = np.einsum("ij,ij->i", centered @ q_block, centered)
    # rows with no finite entry keep shift 0 so they exp to zero, not nan
    safe_shift = np.where(kept, shift, 0.0)
    boltz = np.exp((log_table - safe_shift[:, None]).astype(dtype, copy=False))
    denom = boltz @ base_weights.astype(dtype)
    first = boltz @ (base_weights[:, None] * centered).astype(dtype)
    second = boltz @ (base_weights * quadratic).astype(dtype)
    good = denom > 0
    kept &= good
    denom = np.where(good, denom, 1.0)
    means = (first / denom[:, None]).astype(np.float64)
    mean_square = np.einsum("ij,ij->i", means @ q_block, means)
    terms = second.astype(np.float64) / denom - mean_square
    return terms, kept


def brute_force_risk(
    cloud: ParticleCloud,
    config,
    q: np.ndarray,
    n_outcomes: int,
    rng: np.random.Generator,
    model=None,
    p_full=None,
) -> RiskEstimate:
    """Joint-sampling estimate of the Bayes risk.

    Samples ``n_outcomes`` particles from the cloud, one datum from each, and
    averages the Q-weighted squared distance between the generating particle
    and the posterior mean computed over the sampled particle set itself.
    ``p_full`` optionally carries precomputed survival probabilities for the
    whole cloud.
    """
    if n_outcomes < 2:
        raise ValueError("need at least two outcome samples")
    model = model or NvModel()
    q = _check_q(q, cloud.locations.shape[1])
    idx = rng.choice(cloud.size, size=n_outcomes, p=cloud.weights)
    particles = cloud.locations[idx]
    extra = {} if p_full is None else {"p": np.asarray(p_full)[idx]}
    counts = model.sample_counts(particles, config, rng, **extra)
    table = model.log_likelihood_matrix(counts, particles, config, **extra)
    weights, kept = _posterior_weight_table(table, np.full(n_outcomes, 1.0 / n_outcomes))
    posterior_means = weights @ particles
    deviations = particles - posterior_means
    terms = np.einsum("ij,ij->i", deviations @ q, deviations)
    return _summarize(terms, kept, n_outcomes, n_outcomes)


def _downsample(cloud: ParticleCloud, k: int, rng):
    """Indices and weights of an inner particle set of size <= k.

    Prefers weighted sampling without replacement (keeping renormalized
    weights); falls back to with-replacement sampling with uniform weights
    when too few particles carry weight.
    """
    if k >= cloud.size:
        return np.arange(cloud.size), cloud.weights
    nonzero = np.count_nonzero(cloud.weights)
    if nonzero >= k:
        idx = rng.choice(cloud.size, size=k, replace=False, p=cloud.weights)
        weights = cloud.weights[idx]
        return idx, weights / weights.sum()
    idx = rng.choice(cloud.size, size=k, replace=True, p=cloud.weights)
    return idx, np.full(k, 1.0 / k)


def mis_risk(
    cloud: ParticleCloud,
    config,
    q: np.ndarray,
    n_outcomes: int,
    n_particles: int,
    rng: np.random.Generator,
    model=None,
    p_full=None,
    dtype=np.float64,
) -> RiskEstimate:
    """Maximum-importance-sampling estimate of the Bayes risk.

    Outcomes are drawn from the marginal predictive (via the joint); each
    outcome reweights a fixed inner particle set, and the risk is the mean
    Q-weighted posterior variance over outcomes.  ``p_full`` optionally
    carries precomputed survival probabilities for the whole cloud;
    ``dtype=np.float32`` trades the last digits of each estimate for about
    half the evaluation cost (safe for ranking candidates).
    """
    if n_outcomes < 2 or n_particles < 2:
        raise ValueError("need at least two outcomes and two inner particles")
    model = model or NvModel()
    q = _check_q(q, cloud.locations.shape[1])
    outcome_idx = rng.choice(cloud.size, size=n_outcomes, p=cloud.weights)
    p_full = None if p_full is None else np.asarray(p_full)
    extra_out = {} if p_full is None else {"p": p_full[outcome_idx]}
    counts = model.sample_counts(cloud.locations[outcome_idx], config, rng, **extra_out)
    inner_idx, inner_weights = _downsample(cloud, n_particles, rng)
    inner = cloud.locations[inner_idx]
    extra_in = {} if p_full is None else {"p": p_full[inner_idx]}
    table = model.log_likelihood_matrix(counts, inner, config, **extra_in)
    terms, kept = _weighted_variance_terms(table, inner_weights, inner, q, dtype)
    return _summarize(terms, kept, n_outcomes, len(inner_idx))


def _summarize(terms, kept, n_outcomes, n_particles) -> RiskEstimate:
    kept_terms = terms[kept]
    n_kept = len(kept_terms)
    if n_kept == 0:
        raise ValueError("every sampled outcome underflowed; cloud too degenerate")
    value = float(kept_terms.mean())
    if n_kept > 1:
        std_error = float(kept_terms.std(ddof=1) / math.sqrt(n_kept))
    else:
        std_error = float("inf")
    return RiskEstimate(
        value=max(value, 0.0),
        std_error=std_error,
        n_outcomes=n_outcomes,
        n_particles=n_particles,
        n_dropped=n_outcomes - n_kept,
    )


def trace_weighted_variance(cloud: ParticleCloud, q: np.ndarray) -> float:
    """sigma_Q^2 = Tr[Q Cov(cloud)], the no-experiment baseline."""
    q = _check_q(q, cloud.locations.shape[1])
    return float(np.trace(q @ smc.posterior_cov(cloud)))


def risk_profile(
    cloud: ParticleCloud,
    configs: list,
    q: np.ndarray,
    rng: np.random.Generator,
    n_outcomes: int = 512,
    n_particles: int = 1024,
    model=None,
    method: str = "mis",
    normalize: bool = False,
    p_table=None,
    dtype=np.float64,
) -> list:
    """Risk of every candidate against the same cloud snapshot.

    Returns ``[(config, RiskEstimate), ...]`` in input order.  Each candidate
    consumes its own child random stream, so results are reproducible for a
    fixed candidate order and seed.  With ``normalize=True`` values are
    divided by sigma_Q^2, so 1.0 marks an uninformative experiment.
    ``p_table`` optionally holds precomputed survival probabilities, one row
    per candidate, over the full cloud.
    """
    if not configs:
        raise ValueError("candidate list is empty")
    model = model or NvModel()
    streams = rng.spawn(len(configs))
    scale = 1.0
    if normalize:
        scale = 1.0 / trace_weighted_variance(cloud, q)
    out = []
    for i, (config, stream) in enumerate(zip(configs, streams)):
        p_full = None if p_table is None else p_table[i]
        if method == "mis":
            est = mis_risk(
                cloud, config, q, n_outcomes, n_particles, stream, model, p_full,
                dtype,
            )
        elif method == "brute_force":
            est = brute_force_risk(
                cloud, config, q, n_outcomes, stream, model, p_full
            )
        else:
            raise ValueError(f"unknown risk method {method!r}")
        if normalize:
            est = RiskEstimate(
                est.value * scale,
                est.std_error * scale,
                est.n_outcomes,
                est.n_particles,
                est.n_dropped,
            )
        out.append((config, est))
    return out
