"""Experiment-design policies for the heuristic comparison.

Two offline policies sweep predetermined grids (alternating Rabi/Ramsey, and
back-to-back Ramsey sweeps); two online policies pick the candidate that
minimizes the sampled Bayes risk under a uniform or magnetometry-focused
weight matrix.  All policies choose the repetition count so that the
expected ESM of the next datum hits a common target, which keeps heuristics
comparable independent of reference brightness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import qutrit, risk, smc
from .measurement import ReferenceRates, choose_repetitions
from .qutrit import ExperimentConfig
from .smc import IDX_RABI, ParticleCloud, PriorSpec

DEFAULT_TARGET_ESM = 20.0
DEFAULT_N_MAX = 1_000_000


def experiment_set_rabi(
    t_max: float, m: int, drive_frequency: float = qutrit.ZFS_MHZ
) -> list:
    """Rabi configurations with pulse times t_max/m, 2*t_max/m, ..., t_max."""
    if m < 1:
        raise ValueError("m must be >= 1")
    step = t_max / m
    return [
        ExperimentConfig("rabi", pulse_time=step * k, drive_frequency=drive_frequency)
        for k in range(1, m + 1)
    ]


def experiment_set_ramsey(
    t_p: float, t_max: float, m: int, drive_frequency: float = qutrit.ZFS_MHZ
) -> list:
    """Ramsey configurations with wait times t_max/m, ..., t_max at fixed t_p."""
    if m < 1:
        raise ValueError("m must be >= 1")
    step = t_max / m
    return [
        ExperimentConfig(
            "ramsey",
            pulse_time=t_p,
            wait_time=step * k,
            drive_frequency=drive_frequency,
        )
        for k in range(1, m + 1)
    ]


def best_tip_time(cloud: ParticleCloud) -> float:
    """Quarter-period pulse time 1/(4 * Omega_hat) rounded to the nearest 2 ns.

    Omega_hat is the current posterior mean of the drive strength; ties
    (odd nanosecond values) round half away from zero.  The result is always
    a positive even number of nanoseconds.
    """
    omega = float(smc.posterior_mean(cloud)[IDX_RABI])
    if omega <= 0:
        raise ValueError(f"posterior mean drive strength must be positive, got {omega}")
    raw = 1e3 / (4.0 * omega)  # MHz -> ns
    rounded = 2.0 * math.floor(raw / 2.0 + 0.5)
    return max(rounded, 2.0)


def should_track(cloud: ParticleCloud, spec: PriorSpec) -> bool:
    """True when the bright-reference estimate has sagged more than five
    prior standard deviations below the prior mean (strict inequality)."""
    posterior_alpha = float(smc.posterior_mean(cloud)[smc.IDX_ALPHA])
    prior = spec.references
    return posterior_alpha < prior.alpha_mean - 5.0 * prior.alpha_std


def _repetitions_for(cloud: ParticleCloud, target_esm: float, n_max: int) -> int:
    a1, b1, sa1, sb1 = smc.posterior_refs(cloud)
    if not 0.0 < b1 < a1:
        return n_max
    n, _ = choose_repetitions(ReferenceRates(a1, b1), (sa1, sb1), target_esm, n_max)
    return n


class SurvivalTableCache:
    """Caches the latest full-cloud survival table, keyed by spin-version.

    Spin columns change only on resampling, so between resamples a design
    policy reuses the whole candidate table, and Bayes updates on executed
    configurations can look their row up for free.  A cache instance must
    not be shared across particle-cloud lineages (spin versions would
    collide).
    """

    def __init__(self, table_fn=None):
        self.table_fn = table_fn or qutrit.survival_table
        self._key = None
        self._table = None
        self._configs = None

    def table(self, cloud: ParticleCloud, configs: list, grid_key) -> np.ndarray:
        key = (cloud.spin_version, grid_key)
        if key != self._key:
            self._table = self.table_fn(cloud.spin_locations, configs)
            self._key = key
            self._configs = configs
        return self._table

    def lookup(self, cloud: ParticleCloud, config: ExperimentConfig):
        """Cached survival row for this pulse shape at the cloud's current
        spin version, or None.  Repetition counts are ignored (the survival
        probability does not depend on them)."""
        if self._key is None or self._key[0] != cloud.spin_version:
            return None
        for i, candidate in enumerate(self._configs):
            if (
                candidate.kind == config.kind
                and candidate.pulse_time == config.pulse_time
                and candidate.wait_time == config.wait_time
                and candidate.drive_frequency == config.drive_frequency
            ):
                return self._table[i]
        return None


@dataclass
class Heuristic:
    """Base policy: grids, ESM targeting, and the shared config plumbing."""

    name: str = "base"
    target_esm: float = DEFAULT_TARGET_ESM
    n_max: int = DEFAULT_N_MAX
    drive_frequency: float = qutrit.ZFS_MHZ

    def next_experiment(
        self, cloud: ParticleCloud, step: int, rng: np.random.Generator
    ) -> ExperimentConfig:
        config = self._pick(cloud, step, rng)
        n = _repetitions_for(cloud, self.target_esm, self.n_max)
        return ExperimentConfig(
            kind=config.kind,
            pulse_time=config.pulse_time,
            wait_time=config.wait_time,
            drive_frequency=config.drive_frequency,
            repetitions=n,
        )

    def _pick(self, cloud, step, rng) -> ExperimentConfig:
        raise NotImplementedError


@dataclass
class AlternatingLinear(Heuristic):
    """Offline alternation between a Rabi sweep and a Ramsey sweep.

    Even steps take the next Rabi pulse time, odd steps the next Ramsey wait
    time; each family advances through its grid and wraps around.  The Ramsey
    pulse time follows the current best tip time.
    """

    name: str = "alternating_linear"
    rabi_t_max: float = 500.0
    rabi_m: int = 100
    ramsey_t_max: float = 2000.0
    ramsey_m: int = 100

    def _pick(self, cloud, step, rng):
        cursor = step // 2
        if step % 2 == 0:
            grid = experiment_set_rabi(self.rabi_t_max, self.rabi_m, self.drive_frequency)
            return grid[cursor % self.rabi_m]
        grid = experiment_set_ramsey(
            best_tip_time(cloud), self.ramsey_t_max, self.ramsey_m, self.drive_frequency
        )
        return grid[cursor % self.ramsey_m]


@dataclass
class RamseySweeps(Heuristic):
    """Offline back-to-back sweeps through one Ramsey wait-time grid."""

    name: str = "ramsey_sweeps"
    t_max: float = 2000.0
    m: int = 100

    def _pick(self, cloud, step, rng):
        grid = experiment_set_ramsey(
            best_tip_time(cloud), self.t_max, self.m, self.drive_frequency
        )
        return grid[step % self.m]


@dataclass
class RiskMinimizer(Heuristic):
    """Online policy: pick the candidate minimizing the MIS Bayes risk.

    Candidates are the union of the Rabi grid and the Ramsey grid built at
    the current best tip time.  Ties break toward the shortest total
    evolution time, then the lowest candidate index.
    """

    name: str = "risk"
    weights: np.ndarray = field(default_factory=risk.uniform_weight_matrix)
    rabi_t_max: float = 500.0
    rabi_m: int = 100
    ramsey_t_max: float = 2000.0
    ramsey_m: int = 100
    n_outcomes: int = 512
    n_particles: int = 1024
    # ranking tolerates single precision; it halves the evaluation cost
    table_dtype: type = np.float32
    cache: SurvivalTableCache = field(default_factory=SurvivalTableCache)
    last_profile: list = field(default=None, repr=False)

    def candidate_set(self, cloud: ParticleCloud) -> list:
        tip = best_tip_time(cloud)
        return experiment_set_rabi(
            self.rabi_t_max, self.rabi_m, self.drive_frequency
        ) + experiment_set_ramsey(
            tip, self.ramsey_t_max, self.ramsey_m, self.drive_frequency
        )

    def _pick(self, cloud, step, rng):
        candidates = self.candidate_set(cloud)
        n = _repetitions_for(cloud, self.target_esm, self.n_max)
        sized = [
            ExperimentConfig(c.kind, c.pulse_time, c.wait_time, c.drive_frequency, n)
            for c in candidates
        ]
        grid_key = (
            candidates[0].drive_frequency,
            self.rabi_t_max,
            self.rabi_m,
            candidates[-1].pulse_time,
            self.ramsey_t_max,
            self.ramsey_m,
        )
        p_table = self.cache.table(cloud, sized, grid_key)
        profile = risk.risk_profile(
            cloud,
            sized,
            self.weights,
            rng,
            n_outcomes=self.n_outcomes,
            n_particles=self.n_particles,
            p_table=p_table,
            dtype=self.table_dtype,
        )
        self.last_profile = profile
        best = min(
            range(len(profile)),
            key=lambda i: (
                profile[i][1].value,
                profile[i][0].evolution_time,
                i,
            ),
        )
        return profile[best][0]


def uniform_risk_heuristic(**kwargs) -> RiskMinimizer:
    return RiskMinimizer(
        name="uniform_risk", weights=risk.uniform_weight_matrix(), **kwargs
    )


def magnetometry_risk_heuristic(**kwargs) -> RiskMinimizer:
    return RiskMinimizer(
        name="magnetometry_risk", weights=risk.magnetometry_weight_matrix(), **kwargs
    )


HEURISTIC_FACTORIES = {
    "alternating_linear": AlternatingLinear,
    "ramsey_sweeps": RamseySweeps,
    "uniform_risk": uniform_risk_heuristic,
    "magnetometry_risk": magnetometry_risk_heuristic,
}


def make_heuristic(name: str, **kwargs) -> Heuristic:
    try:
        factory = HEURISTIC_FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown heuristic {name!r}; choose from {sorted(HEURISTIC_FACTORIES)}"
        ) from None
    return factory(**kwargs)
