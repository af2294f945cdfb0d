"""Detection-bench layouts for the two-mode field state.

Two arrangements are used: the population (diagonal) layout with one detector
on 2_L and a split detector pair on 2_R, and the interference (fringe) layout
where a relative phase and a recombining beam splitter are inserted first.
Both return exact joint click-pattern probabilities.
"""

from __future__ import annotations

from .detection import DetectorSpec, JointProbabilities, click_probabilities
from .fock import DensityOperator, ModeRegister, apply_beamsplitter, apply_phase, vacuum

D2_IDS = ("D2a", "D2b", "D2c")
SPLIT_PAIR = ("D2b", "D2c")


def diagonal_layout_probabilities(
    rho: DensityOperator,
    eta_d2a: float,
    eta_d2b: float,
    eta_d2c: float,
    split: float = 0.5,
    dark_prob: float = 0.0,
) -> JointProbabilities:
    """Population measurement: D2a on 2_L; 2_R divided on a splitter of
    transmittance ``split`` toward D2b, remainder toward D2c."""
    aux = vacuum(ModeRegister(1, rho.register.cutoff)).to_density()
    work = rho.tensor(aux)
    work = apply_beamsplitter(work, split, 1, 2)
    detectors = [
        DetectorSpec("D2a", eta_d2a, 0, dark_prob),
        DetectorSpec("D2b", eta_d2b, 1, dark_prob),
        DetectorSpec("D2c", eta_d2c, 2, dark_prob),
    ]
    return click_probabilities(work, detectors)


def fringe_layout_probabilities(
    rho: DensityOperator,
    phi: float,
    eta_d2a: float,
    eta_d2b: float,
    eta_d2c: float,
    split: float = 0.5,
    bs2_T: float = 0.5,
    dark_prob: float = 0.0,
) -> JointProbabilities:
    """Coherence measurement: phase ``phi`` on 2_L, recombination on the
    analysis beam splitter, D2a on one output, split pair on the other."""
    work = apply_phase(rho, phi, 0)
    work = apply_beamsplitter(work, bs2_T, 0, 1)
    aux = vacuum(ModeRegister(1, rho.register.cutoff)).to_density()
    work = work.tensor(aux)
    work = apply_beamsplitter(work, split, 1, 2)
    detectors = [
        DetectorSpec("D2a", eta_d2a, 0, dark_prob),
        DetectorSpec("D2b", eta_d2b, 1, dark_prob),
        DetectorSpec("D2c", eta_d2c, 2, dark_prob),
    ]
    return click_probabilities(work, detectors)
