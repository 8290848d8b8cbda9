"""Spin-1 simulation of the NV ground-state manifold under bang-bang microwave control.

The electron spin is driven in the rotating frame of the applied microwave
frequency; the static nitrogen-14 enters only through its projection mI,
so a hypothesis is simulated as three independent 3-level systems (one per
mI branch) and the survival probability is their uniform average.

Unit convention, applied in exactly one place (``build_hamiltonian`` and the
dephasing entry of ``lindblad_generator``):

* frequencies in MHz, dephasing rates in 1/us,
* times in ns,
* generators therefore in rad/ns (a factor ``2*pi*1e-3`` on Hamiltonian
  coefficients) and 1/ns (a factor ``1e-3`` on dephasing, no ``2*pi``),

so that ``expm(duration_ns * generator)`` needs no further conversion.

Superoperators use the column-stacking convention: ``vec(rho)[3*c + r]``
holds ``rho[r, c]``, and ``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.
Basis ordering is (|+1>, |0>, |-1>), so the |0><0| population sits at
vectorized index 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

ZFS_MHZ = 2870.0  # nominal zero-field splitting; zfs_offset is relative to this

# MHz -> rad/ns and (1/us) -> (1/ns)
_ANGULAR = 2.0 * math.pi * 1e-3
_RATE = 1e-3

SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)
SZ2 = SZ @ SZ
SX = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / math.sqrt(2.0)
_I3 = np.eye(3, dtype=complex)
_I9 = np.eye(9, dtype=complex)

# vec index of the |0><0| element (row 1, column 1, column-stacking)
_P0_INDEX = 4

_MI_BRANCHES = (-1, 0, 1)

# diagonal dephasing profile: -(m_r - m_c)^2 / 2 at vec index 3*c + r
_M = np.array([1.0, 0.0, -1.0])
_DEPHASING_DIAG = np.array(
    [-0.5 * (_M[k % 3] - _M[k // 3]) ** 2 for k in range(9)]
)


class SimulationAccuracyError(RuntimeError):
    """A computed probability left [0, 1] by more than roundoff allows."""


@dataclass(frozen=True)
class SpinParams:
    """Hamiltonian and decoherence coefficients of one hypothesis.

    rabi_max, zeeman, zfs_offset and hyperfine are in MHz (zfs_offset is the
    deviation from the 2870 MHz zero-field splitting); dephasing_rate is
    1/T2* in 1/us.
    """

    rabi_max: float
    zeeman: float
    zfs_offset: float
    hyperfine: float
    dephasing_rate: float

    def __post_init__(self):
        values = (
            self.rabi_max,
            self.zeeman,
            self.zfs_offset,
            self.hyperfine,
            self.dephasing_rate,
        )
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"spin parameters must be finite, got {values}")
        if self.rabi_max < 0:
            raise ValueError(f"rabi_max must be >= 0, got {self.rabi_max}")
        if self.dephasing_rate < 0:
            raise ValueError(
                f"dephasing_rate must be >= 0, got {self.dephasing_rate}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.rabi_max,
                self.zeeman,
                self.zfs_offset,
                self.hyperfine,
                self.dephasing_rate,
            ]
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """A Rabi or Ramsey pulse description plus its repetition count.

    Times are in ns, the drive frequency in MHz.  Rabi experiments apply a
    single resonant pulse of length ``pulse_time``; Ramsey experiments apply
    pulse - wait - pulse with amplitudes (1, 0, 1).
    """

    kind: str  # "rabi" | "ramsey"
    pulse_time: float
    wait_time: float = 0.0
    drive_frequency: float = ZFS_MHZ
    repetitions: int = 1

    def __post_init__(self):
        if self.kind not in ("rabi", "ramsey"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if not self.pulse_time > 0:
            raise ValueError(f"pulse_time must be positive, got {self.pulse_time}")
        if self.wait_time < 0:
            raise ValueError(f"wait_time must be >= 0, got {self.wait_time}")
        if self.kind == "rabi" and self.wait_time != 0:
            raise ValueError("Rabi experiments have no wait segment")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")

    @property
    def evolution_time(self) -> float:
        """Total microwave-sequence duration in ns."""
        if self.kind == "rabi":
            return self.pulse_time
        return 2.0 * self.pulse_time + self.wait_time

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pulse_time": self.pulse_time,
            "wait_time": self.wait_time,
            "drive_frequency": self.drive_frequency,
            "repetitions": self.repetitions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            kind=d["kind"],
            pulse_time=float(d["pulse_time"]),
            wait_time=float(d.get("wait_time", 0.0)),
            drive_frequency=float(d.get("drive_frequency", ZFS_MHZ)),
            repetitions=int(d.get("repetitions", 1)),
        )


def build_hamiltonian(
    params: SpinParams,
    drive_freq: float,
    nitrogen_mi: int,
    amplitude: float,
) -> np.ndarray:
    """Rotating-frame Hamiltonian for one nitrogen branch, in rad/ns.

    Returns ``2*pi*1e-3 * ((zfs_offset + 2870 - drive_freq)*Sz^2
    + (zeeman + hyperfine*mI)*Sz + amplitude*rabi_max*Sx)``.
    """
    if nitrogen_mi not in (-1, 0, 1):
        raise ValueError(f"nitrogen_mi must be -1, 0 or +1, got {nitrogen_mi}")
    if not -1.0 <= amplitude <= 1.0:
        raise ValueError(f"amplitude must be in [-1, 1], got {amplitude}")
    detuning = params.zfs_offset + ZFS_MHZ - drive_freq
    axial = params.zeeman + params.hyperfine * nitrogen_mi
    return _ANGULAR * (
        detuning * SZ2 + axial * SZ + amplitude * params.rabi_max * SX
    )


def lindblad_generator(
    params: SpinParams,
    drive_freq: float,
    nitrogen_mi: int,
    amplitude: float,
) -> np.ndarray:
    """The 9x9 generator C[H] + D[L] with L = sqrt(1/T2*) Sz, in 1/ns."""
    h = build_hamiltonian(params, drive_freq, nitrogen_mi, amplitude)
    coherent = -1j * (np.kron(_I3, h) - np.kron(h.conj(), _I3))
    return coherent + (params.dephasing_rate * _RATE) * np.diag(_DEPHASING_DIAG)


def lindblad_propagator(
    params: SpinParams,
    drive_freq: float,
    nitrogen_mi: int,
    amplitude: float,
    duration: float,
) -> np.ndarray:
    """Superoperator propagator exp(duration * (C[H] + D[L])) for a constant
    pulse amplitude held for ``duration`` ns."""
    if duration < 0:
        raise ValueError(f"duration must be >= 0, got {duration}")
    return expm(duration * lindblad_generator(params, drive_freq, nitrogen_mi, amplitude))


def _config_propagator(params: SpinParams, config: ExperimentConfig, mi: int) -> np.ndarray:
    if config.kind == "rabi":
        return lindblad_propagator(
            params, config.drive_frequency, mi, 1.0, config.pulse_time
        )
    pulse = lindblad_propagator(
        params, config.drive_frequency, mi, 1.0, config.pulse_time
    )
    wait = lindblad_propagator(
        params, config.drive_frequency, mi, 0.0, config.wait_time
    )
    return pulse @ wait @ pulse


def _clamp_probability(p, context: str):
    """Clamp to [0, 1]; excursions beyond roundoff indicate an integration bug."""
    p = np.asarray(p)
    excess = max(float(np.max(p - 1.0, initial=0.0)), float(np.max(-p, initial=0.0)))
    if excess > 1e-6:
        raise SimulationAccuracyError(
            f"{context}: probability left [0, 1] by {excess:.3e}"
        )
    return np.clip(p, 0.0, 1.0)


def survival_probability(params: SpinParams, config: ExperimentConfig) -> float:
    """Probability of finding the electron back in |0> after the sequence,
    averaged uniformly over the three static nitrogen projections."""
    total = 0.0
    for mi in _MI_BRANCHES:
        sup = _config_propagator(params, config, mi)
        total += sup[_P0_INDEX, _P0_INDEX].real
    return float(_clamp_probability(total / 3.0, f"survival_probability({config.kind})"))


# ----------------------------------------------------------------------------
# Batched evaluation over many hypotheses.
#
# The particle filter needs p(x, e) for thousands of hypotheses at once, and
# the risk-based design heuristics need it for every candidate in a grid of
# configurations.  The structured grids of the design heuristics admit two
# fast paths:
#   * a Rabi family on an arithmetic pulse-time grid composes powers of the
#     single-step propagator, and
#   * Ramsey wait segments have a diagonal generator, so the wait-time curve
#     is a 9-term complex exponential sum per hypothesis.
# ----------------------------------------------------------------------------


def _batch_generators(spins: np.ndarray, drive_freq: float, amplitude: float) -> np.ndarray:
    """Generators for all hypotheses and all mI branches, shape (3, K, 9, 9).

    ``spins`` is (K, 5) with columns (rabi_max, zeeman, zfs_offset,
    hyperfine, dephasing_rate).
    """
    spins = np.atleast_2d(np.asarray(spins, dtype=float))
    k = spins.shape[0]
    out = np.zeros((3, k, 9, 9), dtype=complex)
    detuning = _ANGULAR * (spins[:, 2] + ZFS_MHZ - drive_freq)
    drive = _ANGULAR * amplitude * spins[:, 0]
    gamma = _RATE * spins[:, 4]
    sz2_part = np.kron(_I3, SZ2) - np.kron(SZ2.conj(), _I3)
    sz_part = np.kron(_I3, SZ) - np.kron(SZ.conj(), _I3)
    sx_part = np.kron(_I3, SX) - np.kron(SX.conj(), _I3)
    for b, mi in enumerate(_MI_BRANCHES):
        axial = _ANGULAR * (spins[:, 1] + spins[:, 3] * mi)
        out[b] = -1j * (
            detuning[:, None, None] * sz2_part
            + axial[:, None, None] * sz_part
            + drive[:, None, None] * sx_part
        )
        out[b] += gamma[:, None, None] * np.diag(_DEPHASING_DIAG)
    return out


def _wait_eigenvalues(spins: np.ndarray, drive_freq: float) -> np.ndarray:
    """Diagonal of the zero-amplitude generator, shape (3, K, 9), in 1/ns."""
    spins = np.atleast_2d(np.asarray(spins, dtype=float))
    k = spins.shape[0]
    detuning = _ANGULAR * (spins[:, 2] + ZFS_MHZ - drive_freq)
    gamma = _RATE * spins[:, 4]
    out = np.zeros((3, k, 9), dtype=complex)
    m_r = _M[np.arange(9) % 3]
    m_c = _M[np.arange(9) // 3]
    for b, mi in enumerate(_MI_BRANCHES):
        axial = _ANGULAR * (spins[:, 1] + spins[:, 3] * mi)
        h_r = detuning[:, None] * m_r[None, :] ** 2 + axial[:, None] * m_r[None, :]
        h_c = detuning[:, None] * m_c[None, :] ** 2 + axial[:, None] * m_c[None, :]
        out[b] = -1j * (h_r - h_c) + gamma[:, None] * _DEPHASING_DIAG[None, :]
    return out


def _rabi_arithmetic_step(pulse_times: np.ndarray):
    """If all pulse times are integer multiples of the smallest one, return
    (step, multiples); otherwise None."""
    step = float(np.min(pulse_times))
    if step <= 0:
        return None
    mult = pulse_times / step
    rounded = np.rint(mult)
    if np.max(np.abs(mult - rounded)) > 1e-9 or np.max(rounded) > 4 * len(pulse_times) + 64:
        return None
    return step, rounded.astype(int)


def _survival_rabi_family(
    spins: np.ndarray, pulse_times: np.ndarray, drive_freq: float
) -> np.ndarray:
    """Survival probabilities for a family of Rabi pulse times, (n_times, K)."""
    spins = np.atleast_2d(spins)
    k = spins.shape[0]
    gens = _batch_generators(spins, drive_freq, 1.0).reshape(3 * k, 9, 9)
    out = np.empty((len(pulse_times), 3 * k))
    arith = _rabi_arithmetic_step(np.asarray(pulse_times, dtype=float))
    if arith is not None:
        step, multiples = arith
        prop = expm(step * gens)
        state = np.tile(np.eye(9, dtype=complex)[_P0_INDEX], (3 * k, 1))
        wanted = {int(m): i for i, m in enumerate(multiples)}
        for power in range(1, int(np.max(multiples)) + 1):
            state = np.einsum("kij,kj->ki", prop, state)
            if power in wanted:
                out[wanted[power]] = state[:, _P0_INDEX].real
    else:
        for i, t_p in enumerate(pulse_times):
            prop = expm(float(t_p) * gens)
            out[i] = prop[:, _P0_INDEX, _P0_INDEX].real
    return out.reshape(len(pulse_times), 3, k).mean(axis=1)


def _survival_ramsey_family(
    spins: np.ndarray, pulse_time: float, wait_times: np.ndarray, drive_freq: float
) -> np.ndarray:
    """Survival probabilities for a family of Ramsey wait times at a fixed
    pulse time, (n_waits, K).

    With P the pulse propagator and W(t) = exp(lambda * t) the diagonal wait
    propagator, p(t) = sum_j P[4, j] * W_j(t) * P[j, 4].
    """
    spins = np.atleast_2d(spins)
    k = spins.shape[0]
    gens = _batch_generators(spins, drive_freq, 1.0).reshape(3 * k, 9, 9)
    pulse = expm(float(pulse_time) * gens)
    weights = pulse[:, _P0_INDEX, :] * pulse[:, :, _P0_INDEX]  # (3K, 9)
    lam = _wait_eigenvalues(spins, drive_freq).reshape(3 * k, 9)
    out = np.empty((len(wait_times), 3 * k))
    for i, t_w in enumerate(wait_times):
        out[i] = np.einsum(
            "kj,kj->k", weights, np.exp(lam * float(t_w))
        ).real
    return out.reshape(len(wait_times), 3, k).mean(axis=1)


def survival_table(spins: np.ndarray, configs: list) -> np.ndarray:
    """Survival probabilities for every (config, hypothesis) pair.

    ``spins`` is (K, 5); returns (len(configs), K).  Configurations are
    grouped into Rabi families by drive frequency and Ramsey families by
    (pulse_time, drive frequency) so the grid fast paths apply.
    """
    spins = np.atleast_2d(np.asarray(spins, dtype=float))
    out = np.empty((len(configs), spins.shape[0]))
    groups: dict = {}
    for idx, cfg in enumerate(configs):
        if cfg.kind == "rabi":
            key = ("rabi", cfg.drive_frequency)
        else:
            key = ("ramsey", cfg.pulse_time, cfg.drive_frequency)
        groups.setdefault(key, []).append(idx)
    for key, indices in groups.items():
        if key[0] == "rabi":
            times = np.array([configs[i].pulse_time for i in indices])
            table = _survival_rabi_family(spins, times, key[1])
        else:
            times = np.array([configs[i].wait_time for i in indices])
            table = _survival_ramsey_family(spins, key[1], times, key[2])
        out[indices] = table
    return _clamp_probability(out, "survival_table")


def survival_probabilities(spins: np.ndarray, config: ExperimentConfig) -> np.ndarray:
    """Survival probability of a single configuration for each hypothesis row."""
    return survival_table(spins, [config])[0]
