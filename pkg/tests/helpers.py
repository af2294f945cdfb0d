"""Independent oracles and generators shared across the test modules.

Everything here recomputes expected values through a different route than the
library (explicit operator series, matrix exponentials, first-order
perturbation theory) so the tests stay meaningful.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.linalg import expm

from dlczsim.fock import ModeRegister, PureState
from dlczsim.tomography import RestrictedDensity


def ladder(cutoff: int) -> np.ndarray:
    """Annihilation operator on one truncated mode."""
    a = np.zeros((cutoff + 1, cutoff + 1))
    for n in range(1, cutoff + 1):
        a[n - 1, n] = math.sqrt(n)
    return a


def embed(single: np.ndarray, n_modes: int, mode: int, cutoff: int) -> np.ndarray:
    out = np.array([[1.0]], dtype=complex)
    eye = np.eye(cutoff + 1)
    for m in range(n_modes):
        out = np.kron(out, single if m == mode else eye)
    return out


def pi0_series_matrix(cutoff: int, eta: float = 1.0) -> np.ndarray:
    """No-click POVM element by literal term-by-term series summation:
    sum_n (-eta)^n adag^n a^n / n!  on one truncated mode."""
    a = ladder(cutoff)
    out = np.zeros((cutoff + 1, cutoff + 1), dtype=complex)
    for n in range(cutoff + 1):
        term = np.linalg.matrix_power(a.conj().T, n) @ np.linalg.matrix_power(a, n)
        out += (-eta) ** n * term / math.factorial(n)
    return out


def expm_beamsplitter(cutoff: int, transmittance: float) -> np.ndarray:
    """Brute-force matrix exponential of the beam-splitter generator."""
    a = embed(ladder(cutoff), 2, 0, cutoff)
    b = embed(ladder(cutoff), 2, 1, cutoff)
    theta = math.atan2(math.sqrt(1.0 - transmittance), math.sqrt(transmittance))
    gen = a.conj().T @ b - a @ b.conj().T
    return expm(theta * gen)


def brute_force_pattern_probs(rho: np.ndarray, register: ModeRegister, detectors) -> dict:
    """Joint click probabilities via explicit POVM operator products."""
    elements = {}
    for det in detectors:
        pi0 = np.eye(register.dim, dtype=complex)
        for mode in det.modes:
            pi0 = pi0 @ embed(pi0_series_matrix(register.cutoff, det.efficiency), register.n_modes, mode, register.cutoff)
        pi0 = pi0 * (1.0 - det.dark_prob)
        elements[det.id] = (pi0, np.eye(register.dim) - pi0)
    out = {}
    for pattern in itertools.product((0, 1), repeat=len(detectors)):
        op = np.eye(register.dim, dtype=complex)
        for bit, det in zip(pattern, detectors):
            op = op @ elements[det.id][bit]
        out[pattern] = float(np.real(np.trace(rho @ op)))
    return out


def tmss_probabilities_series(chi: float, cutoff: int) -> np.ndarray:
    """Photon-number distribution of the truncated pair source by explicit
    series summation and renormalization."""
    weights = np.array([(1.0 - chi) * chi**n for n in range(cutoff + 1)])
    return weights / weights.sum()


def first_order_heralded_state(chi_l: float, chi_r: float, bs1_T: float, eta1: float, which: str) -> PureState:
    """Leading-order conditional spin state for the chosen herald.

    The detector on the transmitting port of the right field collects
    amplitude sqrt(T) from the right ensemble and sqrt(1-T) from the left;
    the other port carries the relative minus sign.
    """
    register = ModeRegister(2, 3)
    amp = np.zeros(register.dim, dtype=complex)
    if which == "D1a":
        c_l = math.sqrt(chi_l * (1.0 - bs1_T)) * np.exp(1j * eta1)
        c_r = math.sqrt(chi_r * bs1_T)
    else:
        c_l = -math.sqrt(chi_l * bs1_T) * np.exp(1j * eta1)
        c_r = math.sqrt(chi_r * (1.0 - bs1_T))
    amp[register.index((1, 0))] = c_l
    amp[register.index((0, 1))] = c_r
    amp /= np.linalg.norm(amp)
    return PureState(register, amp)


def random_restricted(rng: np.random.Generator, d_fraction: float | None = None) -> RestrictedDensity:
    """Random physical restricted-form state with p00 dominant."""
    p00 = rng.uniform(0.6, 0.97)
    rest = rng.dirichlet([2.0, 2.0, 1.0]) * (1.0 - p00)
    p01, p10, p11 = rest
    frac = rng.uniform(0.2, 0.95) if d_fraction is None else d_fraction
    d = frac * math.sqrt(p01 * p10) * np.exp(1j * rng.uniform(0, 2 * math.pi))
    return RestrictedDensity(p00=p00, p01=p01, p10=p10, p11=p11, d=d)


def ideal_config_dict(**overrides) -> dict:
    """Lossless symmetric configuration dictionary for pipeline tests."""
    data = {
        "schema_version": 1,
        "cutoff": 3,
        "trials": 0,
        "seed": 11,
        "layout": "fringe",
        "fringe_phases": {"num": 13},
        "ensembles": {"L": {"chi": 1e-3, "xi": 1.0}, "R": {"chi": 1e-3, "xi": 1.0}},
        "interferometer": {"bs1_T": 0.5},
        "herald": {"which": "D1a", "exclusive": True},
        "detectors": {},
        "channel": {
            "L": {"fc": [1.0, 0.0], "c": [1.0, 0.0], "f": [1.0, 0.0], "apd": [1.0, 0.0]},
            "R": {"fc": [1.0, 0.0], "c": [1.0, 0.0], "f": [1.0, 0.0], "apd": [1.0, 0.0]},
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data
