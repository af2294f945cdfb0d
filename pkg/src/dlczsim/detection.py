"""Click/no-click detector models and count-record handling.

Non-photon-number-resolving detectors with efficiency eta are modeled by the
two-outcome POVM whose no-click element is the normally ordered :exp(-eta n):,
i.e. Fock diagonal (1-eta)^n.  Because every element is Fock diagonal, joint
click-pattern probabilities and post-measurement conditioning reduce to
weighted sums over the photon-number basis, which this module evaluates
exactly at the configured cutoff.

Count records are serialized as CSV with columns
(phase_phi_radians, pattern_bits, count, trials, seed) plus a JSON mirror
that also carries the detector declaration order; pattern bits follow that
order.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .fock import (
    DensityOperator,
    ModeRegister,
    State,
    no_click_weights,
    weighted_partial_trace,
)

PROBABILITY_SUM_TOL = 1e-10

ClickPattern = tuple[int, ...]


class ZeroProbabilityError(ValueError):
    """Conditioning was requested on a pattern of vanishing probability."""


class RecordIntegrityError(ValueError):
    """A count record failed an internal consistency check."""


@dataclass(frozen=True)
class DetectorSpec:
    """A click/no-click detector attached to one mode (or a mode group).

    A detector that collects several orthogonal modes (e.g. both polarization
    components arriving at one physical output port) lists them all; its
    no-click element is the product of the per-mode elements.
    """

    id: str
    efficiency: float
    mode: int | tuple[int, ...]
    dark_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if not 0.0 <= self.dark_prob < 1.0:
            raise ValueError(f"dark_prob must lie in [0, 1), got {self.dark_prob}")
        if isinstance(self.mode, int):
            object.__setattr__(self, "mode", (self.mode,))
        else:
            object.__setattr__(self, "mode", tuple(self.mode))

    @property
    def modes(self) -> tuple[int, ...]:
        return self.mode  # normalized to a tuple in __post_init__


@dataclass(frozen=True)
class JointProbabilities:
    """Exact pattern probabilities for a fixed detector declaration order."""

    detector_ids: tuple[str, ...]
    probabilities: Mapping[ClickPattern, float]

    def __post_init__(self):
        total = 0.0
        for pattern, p in self.probabilities.items():
            if len(pattern) != len(self.detector_ids):
                raise ValueError("pattern length must match detector count")
            if p < -PROBABILITY_SUM_TOL or p > 1.0 + PROBABILITY_SUM_TOL:
                raise ValueError(f"probability {p} outside [0, 1]")
            total += p
        if abs(total - 1.0) > PROBABILITY_SUM_TOL:
            raise ValueError(f"pattern probabilities sum to {total}, not 1")

    def __getitem__(self, pattern: ClickPattern) -> float:
        return self.probabilities.get(tuple(pattern), 0.0)

    def items(self):
        return self.probabilities.items()


@dataclass(frozen=True)
class CountRecord:
    """Tallies of click patterns over ``trials`` repeated preparations."""

    detector_ids: tuple[str, ...]
    trials: int
    tally: Mapping[ClickPattern, int]
    phase: float | None = None
    seed: int | None = None

    def __post_init__(self):
        total = sum(self.tally.values())
        if total != self.trials:
            raise RecordIntegrityError(f"tally sums to {total}, trials is {self.trials}")
        for pattern in self.tally:
            if len(pattern) != len(self.detector_ids):
                raise RecordIntegrityError("pattern length must match detector count")

    def frequency(self, pattern: ClickPattern) -> float:
        return self.tally.get(tuple(pattern), 0) / self.trials

    def clicked_count(self, detector_id: str) -> int:
        pos = self.detector_ids.index(detector_id)
        return sum(n for pattern, n in self.tally.items() if pattern[pos] == 1)


def merge_counts(a: CountRecord, b: CountRecord) -> CountRecord:
    """Associative merge of two records of the same measurement setting."""
    if a.detector_ids != b.detector_ids or a.phase != b.phase:
        raise ValueError("records describe different measurement settings")
    tally = dict(a.tally)
    for pattern, n in b.tally.items():
        tally[pattern] = tally.get(pattern, 0) + n
    return CountRecord(a.detector_ids, a.trials + b.trials, tally, phase=a.phase, seed=None)


# ---------------------------------------------------------------------------
# probabilities and conditioning


def _detector_weights(register: ModeRegister, detectors: Sequence[DetectorSpec]) -> list[np.ndarray]:
    seen: set[int] = set()
    for det in detectors:
        overlap = seen.intersection(det.modes)
        if overlap:
            raise ValueError(f"modes {sorted(overlap)} assigned to more than one detector")
        seen.update(det.modes)
    return [no_click_weights(register, det.modes, det.efficiency, det.dark_prob) for det in detectors]


def click_probabilities(state: State, detectors: Sequence[DetectorSpec]) -> JointProbabilities:
    """Exact joint click-pattern probabilities for ``detectors`` on ``state``.

    Every POVM element is Fock diagonal, so P(pattern) is a weighted sum of
    the state's photon-number populations; completeness (sum over patterns
    equals 1) holds by construction.
    """
    register = state.register
    no_click = _detector_weights(register, detectors)
    diag = state.probabilities()
    probs: dict[ClickPattern, float] = {}
    for pattern in itertools.product((0, 1), repeat=len(detectors)):
        weight = np.ones(register.dim)
        for bit, w in zip(pattern, no_click):
            weight = weight * (w if bit == 0 else (1.0 - w))
        probs[pattern] = float(weight @ diag)
    return JointProbabilities(tuple(d.id for d in detectors), probs)


def condition_on_pattern(
    state: State, detectors: Sequence[DetectorSpec], pattern: ClickPattern
) -> tuple[DensityOperator, float]:
    """Post-measurement state on the undetected modes, plus the pattern probability.

    Detector inefficiency is realized as loss in front of an ideal detector;
    since the measured modes are traced out afterwards, that is exactly the
    weighted partial trace with the pattern's diagonal POVM element.
    """
    register = state.register
    pattern = tuple(pattern)
    if len(pattern) != len(detectors):
        raise ValueError("pattern length must match detector count")
    _detector_weights(register, detectors)  # duplicate-mode check
    detected: set[int] = set()
    for det in detectors:
        detected.update(det.modes)
    keep = [m for m in range(register.n_modes) if m not in detected]
    if not keep:
        raise ValueError("conditioning would trace out every mode")

    # weighted_partial_trace orders the traced sub-basis by ascending mode
    traced = sorted(detected)
    traced_register = ModeRegister(len(traced), register.cutoff)
    position = {mode: pos for pos, mode in enumerate(traced)}
    weights = np.ones(traced_register.dim)
    for det, bit in zip(detectors, pattern):
        local = no_click_weights(
            traced_register, [position[m] for m in det.modes], det.efficiency, det.dark_prob
        )
        weights = weights * (local if bit == 0 else (1.0 - local))

    out_register, reduced = weighted_partial_trace(state, keep, weights)
    probability = float(np.trace(reduced).real)
    if probability <= 0.0:
        raise ZeroProbabilityError(f"pattern {pattern} has zero probability")
    return DensityOperator(out_register, reduced / probability, _skip_positivity=True), probability


# ---------------------------------------------------------------------------
# aggregation of the split detector pair


def aggregate_split_detector(
    probs: JointProbabilities, pair: tuple[str, str]
) -> dict[tuple[int, ...], float]:
    """Collapse a detector pair behind a splitter into photon-count classes.

    The two binary outcomes of ``pair`` are replaced by n = (number of
    detectors in the pair that clicked) in {0, 1, 2}; remaining detectors keep
    their binary outcome and position.  Marginals over the untouched
    detectors are preserved exactly.
    """
    ia = probs.detector_ids.index(pair[0])
    ib = probs.detector_ids.index(pair[1])
    out: dict[tuple[int, ...], float] = {}
    for pattern, p in probs.items():
        rest = tuple(b for k, b in enumerate(pattern) if k not in (ia, ib))
        key = rest[: min(ia, ib)] + (pattern[ia] + pattern[ib],) + rest[min(ia, ib):]
        out[key] = out.get(key, 0.0) + p
    return out


def aggregate_split_counts(record: CountRecord, pair: tuple[str, str]) -> dict[tuple[int, ...], int]:
    """Count-level version of :func:`aggregate_split_detector`."""
    ia = record.detector_ids.index(pair[0])
    ib = record.detector_ids.index(pair[1])
    out: dict[tuple[int, ...], int] = {}
    for pattern, n in record.tally.items():
        rest = tuple(b for k, b in enumerate(pattern) if k not in (ia, ib))
        key = rest[: min(ia, ib)] + (pattern[ia] + pattern[ib],) + rest[min(ia, ib):]
        out[key] = out.get(key, 0) + n
    return out


# ---------------------------------------------------------------------------
# sampling


def substream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream id); the reproducibility contract."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def sample_counts(
    probs: JointProbabilities,
    trials: int,
    seed: int,
    stream: int = 0,
    phase: float | None = None,
) -> CountRecord:
    """Multinomial draw of ``trials`` shots from exact pattern probabilities."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    patterns = sorted(probs.probabilities)
    pvals = np.array([max(probs.probabilities[p], 0.0) for p in patterns])
    pvals = pvals / pvals.sum()
    # quantize away last-ulp noise (BLAS reduction order varies with heap
    # alignment across processes) so identical seeds give identical draws
    pvals = np.round(pvals, 14)
    rng = substream_rng(seed, stream)
    draws = rng.multinomial(trials, pvals)
    tally = {pattern: int(n) for pattern, n in zip(patterns, draws)}
    return CountRecord(tuple(probs.detector_ids), trials, tally, phase=phase, seed=seed)


# ---------------------------------------------------------------------------
# serialization


def write_count_records_csv(records: Iterable[CountRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase_phi_radians", "pattern_bits", "count", "trials", "seed"])
        for record in records:
            phase = "" if record.phase is None else repr(float(record.phase))
            seed = "" if record.seed is None else str(record.seed)
            for pattern in sorted(record.tally):
                bits = "".join(str(b) for b in pattern)
                writer.writerow([phase, bits, record.tally[pattern], record.trials, seed])


def read_count_records_csv(path: str | Path, detector_ids: Sequence[str] | None = None) -> list[CountRecord]:
    """Parse a count CSV; rows sharing (phase, trials, seed) form one record."""
    path = Path(path)
    groups: dict[tuple, dict[ClickPattern, int]] = {}
    order: list[tuple] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RecordIntegrityError(f"{path}: empty record file")
        if header[:5] != ["phase_phi_radians", "pattern_bits", "count", "trials", "seed"]:
            raise RecordIntegrityError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                phase = float(row[0]) if row[0] != "" else None
                pattern = tuple(int(ch) for ch in row[1])
                count = int(row[2])
                trials = int(row[3])
                seed = int(row[4]) if row[4] != "" else None
            except (ValueError, IndexError) as exc:
                raise RecordIntegrityError(f"{path}:{lineno}: malformed row {row!r}") from exc
            key = (phase, trials, seed)
            if key not in groups:
                groups[key] = {}
                order.append(key)
            groups[key][pattern] = groups[key].get(pattern, 0) + count
    if not groups:
        raise RecordIntegrityError(f"{path}: no data rows")
    records = []
    for key in order:
        phase, trials, seed = key
        tally = groups[key]
        ids = tuple(detector_ids) if detector_ids else tuple(f"D{k}" for k in range(len(next(iter(tally)))))
        records.append(CountRecord(ids, trials, tally, phase=phase, seed=seed))
    return records


def write_count_records_json(records: Iterable[CountRecord], path: str | Path) -> None:
    payload = []
    for record in records:
        payload.append(
            {
                "detector_ids": list(record.detector_ids),
                "trials": record.trials,
                "phase_phi_radians": record.phase,
                "seed": record.seed,
                "tally": {"".join(str(b) for b in k): v for k, v in sorted(record.tally.items())},
            }
        )
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_count_records_json(path: str | Path) -> list[CountRecord]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise RecordIntegrityError(f"{path}: invalid JSON ({exc})") from exc
    if not payload:
        raise RecordIntegrityError(f"{path}: no records")
    records = []
    for entry in payload:
        tally = {tuple(int(ch) for ch in bits): n for bits, n in entry["tally"].items()}
        records.append(
            CountRecord(
                tuple(entry["detector_ids"]),
                entry["trials"],
                tally,
                phase=entry.get("phase_phi_radians"),
                seed=entry.get("seed"),
            )
        )
    return records
