import math

import numpy as np
import pytest
from scipy.stats import binomtest

import dlczsim.tomography as tom
from dlczsim.detection import CountRecord, sample_counts
from dlczsim.fock import DensityOperator, ModeRegister, fidelity, random_density_operator
from dlczsim.layouts import diagonal_layout_probabilities, fringe_layout_probabilities
from dlczsim.tomography import (
    AggregatedCounts,
    DIAG_KEYS,
    DataQualityError,
    EfficiencyModel,
    FringeScan,
    InconsistentCountsError,
    MLEConvergenceError,
    MLEOptions,
    Q_CLASSES,
    RestrictedDensity,
    assemble_restricted,
    estimate_coherence,
    fit_fringe,
    forward_class_matrix,
    invert_diagonal,
    invert_diagonal_probabilities,
    log_likelihood,
    mle_fit,
    restrict,
    two_stage_block,
)

from helpers import random_restricted

PUBLISHED_D1A = {"p00": 0.98510, "p10": 7.38e-3, "p01": 7.51e-3, "p11": 1.7e-5, "p02": 2.2e-5}

EFF_BENCH = EfficiencyModel(eta_l=0.392, eta_r=0.364, eta_1=0.32, eta_2=0.40, eta_3=0.40)


def _records_from_restricted(rd, eff, diag_trials, fringe_trials, seed, phases=None, exact=False):
    """Forward-simulate both layouts for a restricted-form state."""
    diagonals = {"p00": rd.p00, "p01": rd.p01, "p10": rd.p10, "p11": rd.p11, "p02": rd.p02 or 0.0}
    rho = tom._restricted_matrix_for_model(diagonals, rd.d_abs)
    dprobs = diagonal_layout_probabilities(rho, eff.d2a, eff.d2b, eff.d2c, eff.split)
    if exact:
        diag_rec = _exact_record(dprobs, diag_trials)
    else:
        diag_rec = sample_counts(dprobs, diag_trials, seed=seed, stream=1)
    phases = np.linspace(0.0, 2.0 * math.pi, 13) if phases is None else phases
    fringe_recs = []
    for k, phi in enumerate(phases):
        fprobs = fringe_layout_probabilities(rho, phi, eff.d2a, eff.d2b, eff.d2c, eff.split, eff.bs2_T)
        if exact:
            fringe_recs.append(_exact_record(fprobs, fringe_trials, phase=float(phi)))
        else:
            fringe_recs.append(sample_counts(fprobs, fringe_trials, seed=seed, stream=100 + k, phase=float(phi)))
    return diag_rec, fringe_recs


def _exact_record(probs, trials, phase=None):
    """Deterministic record with counts proportional to exact probabilities."""
    patterns = sorted(probs.probabilities)
    counts = {p: int(round(probs.probabilities[p] * trials)) for p in patterns}
    counts[patterns[0]] += trials - sum(counts.values())
    return CountRecord(tuple(probs.detector_ids), trials, counts, phase=phase)


# ---------------------------------------------------------------------------
# stage one: diagonal inversion


def test_forward_map_is_identity_at_unit_efficiency():
    m = forward_class_matrix(EfficiencyModel.unit())
    # on the one-photon block the class probabilities are the populations
    expected = np.zeros((6, 5))
    expected[0, 0] = 1.0  # p00 -> (0,0)
    expected[1, 1] = 1.0  # p01 -> (0,1)
    expected[3, 2] = 1.0  # p10 -> (1,0)
    expected[4, 3] = 1.0  # p11 -> (1,1)
    expected[1, 4] = 0.5  # p02 splits between one and two clicks
    expected[2, 4] = 0.5
    assert np.max(np.abs(m - expected)) < 1e-12


def test_published_values_representable_exactly():
    p = np.array([PUBLISHED_D1A[k] for k in DIAG_KEYS])
    p = p / p.sum()
    q = forward_class_matrix(EfficiencyModel.unit()) @ p
    recovered = invert_diagonal_probabilities(dict(zip(Q_CLASSES, q)), EfficiencyModel.unit())
    for i, key in enumerate(DIAG_KEYS):
        assert abs(recovered[key] - p[i]) < 1e-12


def test_all_no_click_data_gives_vacuum():
    agg = AggregatedCounts(counts={(0, 0): 1000}, trials=1000)
    est = invert_diagonal(agg, EfficiencyModel.unit())
    assert abs(est["p00"] - 1.0) < 1e-9
    for key in ("p01", "p10", "p11", "p02"):
        assert est[key] == 0.0


def test_inversion_round_trip_with_counts():
    rng = np.random.default_rng(2)
    truth = {"p00": 0.93, "p01": 0.04, "p10": 0.028, "p11": 1.5e-3, "p02": 0.5e-3}
    m = forward_class_matrix(EFF_BENCH)
    q = m @ np.array([truth[k] for k in DIAG_KEYS])
    trials = 10**7
    counts = rng.multinomial(trials, q / q.sum())
    agg = AggregatedCounts(counts=dict(zip(Q_CLASSES, (int(c) for c in counts))), trials=trials)
    est = invert_diagonal(agg, EFF_BENCH, bootstrap=100, seed=3)
    for key in DIAG_KEYS:
        assert abs(est[key] - truth[key]) < 3.0 * est.sigmas[key]
        # bootstrap cross-check agrees with the analytic covariance
        assert 0.6 < est.bootstrap_sigmas[key] / est.sigmas[key] < 1.6


def test_inversion_negative_clamp_and_flag():
    # a lone two-click event with no single-click partner drives p01 slightly
    # negative (p01 = q01 - p02/2); within noise it clamps to zero with a flag
    counts = {(0, 0): 999999, (0, 2): 1}
    est = invert_diagonal(AggregatedCounts(counts=counts, trials=10**6), EfficiencyModel.unit())
    assert all(est[k] >= 0.0 for k in DIAG_KEYS)
    assert "clamped_p01" in est.flags


def test_inversion_inconsistent_counts_raise():
    # heavy two-click traffic with zero single clicks puts p01 far below
    # -3 sigma: the data cannot come from the model
    counts = {(0, 0): 900000, (0, 2): 100000}
    with pytest.raises(InconsistentCountsError):
        invert_diagonal(AggregatedCounts(counts=counts, trials=10**6), EfficiencyModel.unit())


def test_uncertainty_calibration_68_percent():
    # over repeated synthetic experiments the 1-sigma interval for p01 covers
    # the truth at the nominal rate
    rng = np.random.default_rng(5)
    truth = {"p00": 0.95, "p01": 0.03, "p10": 0.018, "p11": 1.2e-3, "p02": 0.8e-3}
    m = forward_class_matrix(EFF_BENCH)
    q = m @ np.array([truth[k] for k in DIAG_KEYS])
    q = q / q.sum()
    trials = 10**5
    hits = 0
    reps = 200
    for _ in range(reps):
        counts = rng.multinomial(trials, q)
        agg = AggregatedCounts(counts=dict(zip(Q_CLASSES, (int(c) for c in counts))), trials=trials)
        est = invert_diagonal(agg, EFF_BENCH)
        if abs(est["p01"] - truth["p01"]) <= est.sigmas["p01"]:
            hits += 1
    assert binomtest(hits, reps, 0.6827).pvalue > 1e-3


# ---------------------------------------------------------------------------
# stage two: fringes and coherence


def test_noiseless_unit_visibility():
    rd = RestrictedDensity(p00=0.9, p01=0.05, p10=0.05, p11=0.0, d=0.05)
    _, fringe = _records_from_restricted(rd, EfficiencyModel.unit(), 10**9, 10**9, seed=0, exact=True)
    fit = fit_fringe(FringeScan(fringe))
    assert abs(fit.visibility - 1.0) < 1e-6


def test_flat_fringe_fits_zero_visibility():
    rd = RestrictedDensity(p00=0.9, p01=0.05, p10=0.05, p11=0.0, d=0.0)
    _, fringe = _records_from_restricted(rd, EfficiencyModel.unit(), 10**6, 10**6, seed=7)
    fit = fit_fringe(FringeScan(fringe))
    assert abs(fit.visibility) < 4.0 * fit.sigma_visibility


def test_fringe_scan_validation():
    rd = RestrictedDensity(p00=0.9, p01=0.05, p10=0.05, p11=0.0, d=0.04)
    _, fringe = _records_from_restricted(rd, EfficiencyModel.unit(), 10**4, 10**4, seed=8)
    with pytest.raises(DataQualityError, match="5 distinct"):
        FringeScan(fringe[:4])
    short = np.linspace(0.0, math.pi, 9)
    _, half_span = _records_from_restricted(rd, EfficiencyModel.unit(), 10**4, 10**4, seed=9, phases=short)
    with pytest.raises(DataQualityError, match="2 pi"):
        FringeScan(half_span)


def test_overmodulated_fringe_rejected():
    # a trough-clipped cosine fits to V slightly above 1 with negligible
    # statistical error and must be rejected
    phases = np.linspace(0.0, 2.0 * math.pi, 25)
    records = []
    n = 10**9
    for phi in phases:
        p_a = max(0.05 * (1.0 + 1.02 * math.cos(phi)), 5e-4)
        p_b = max(0.05 * (1.0 - 1.02 * math.cos(phi)), 5e-4)
        k_a, k_b = int(p_a * n), int(p_b * n)
        tally = {(1, 0, 0): k_a, (0, 1, 0): k_b, (0, 0, 0): n - k_a - k_b}
        records.append(CountRecord(("D2a", "D2b", "D2c"), n, tally, phase=float(phi)))
    with pytest.raises(DataQualityError, match="exceeds 1"):
        fit_fringe(FringeScan(records))


def test_simplified_coherence_arithmetic():
    est = estimate_coherence(
        0.70, {"p01": 7.51e-3, "p10": 7.38e-3, "p11": 0.0, "p02": 0.0},
        EfficiencyModel.unit(), "simplified",
    )
    assert abs(est.d_abs - 5.2115e-3) < 1e-7
    zero = estimate_coherence(0.0, {"p01": 7.51e-3, "p10": 7.38e-3}, EfficiencyModel.unit(), "simplified")
    assert zero.d_abs == 0.0


def test_full_inversion_recovers_exact_coherence():
    diagonals = {"p00": 0.925, "p01": 0.045, "p10": 0.028, "p11": 1.1e-3, "p02": 0.4e-3}
    d_true = 0.6 * math.sqrt(diagonals["p01"] * diagonals["p10"])
    rho = tom._restricted_matrix_for_model(diagonals, d_true)
    phases = np.linspace(0.0, 2.0 * math.pi, 13)
    records = []
    for phi in phases:
        probs = fringe_layout_probabilities(rho, phi, EFF_BENCH.d2a, EFF_BENCH.d2b, EFF_BENCH.d2c)
        records.append(_exact_record(probs, 10**9, phase=float(phi)))
    fit = fit_fringe(FringeScan(records))
    full = estimate_coherence(fit.visibility, diagonals, EFF_BENCH, "full")
    assert abs(full.d_abs - d_true) < 1e-6
    simple = estimate_coherence(fit.visibility, diagonals, EFF_BENCH, "simplified")
    # the textbook relation is biased at relative order p11/p10
    bound = 3.0 * (diagonals["p11"] / diagonals["p10"] + diagonals["p02"] / diagonals["p01"])
    assert abs(simple.d_abs - d_true) / d_true < bound
    assert abs(simple.d_abs - full.d_abs) / d_true < bound


def test_full_inversion_handles_unbalanced_splitters():
    # same exact round trip with a lopsided analysis splitter and split pair
    eff = EfficiencyModel(eta_l=0.5, eta_r=0.45, eta_1=0.3, eta_2=0.42, eta_3=0.38, split=0.61, bs2_T=0.44)
    diagonals = {"p00": 0.94, "p01": 0.032, "p10": 0.026, "p11": 0.9e-3, "p02": 0.3e-3}
    d_true = 0.55 * math.sqrt(diagonals["p01"] * diagonals["p10"])
    rho = tom._restricted_matrix_for_model(diagonals, d_true)
    phases = np.linspace(0.0, 2.0 * math.pi, 13)
    records = []
    for phi in phases:
        probs = fringe_layout_probabilities(rho, phi, eff.d2a, eff.d2b, eff.d2c, eff.split, eff.bs2_T)
        records.append(_exact_record(probs, 10**9, phase=float(phi)))
    fit = fit_fringe(FringeScan(records))
    full = estimate_coherence(fit.visibility, diagonals, eff, "full")
    assert abs(full.d_abs - d_true) < 1e-6
    # the 50/50 shortcut is visibly biased here; the exact inversion is not
    simple = estimate_coherence(fit.visibility, diagonals, eff, "simplified")
    assert abs(simple.d_abs - d_true) > 10.0 * abs(full.d_abs - d_true)


def test_positivity_violation_flagged():
    # asymmetric populations make V (p01+p10)/2 exceed sqrt(p01 p10)
    est = estimate_coherence(
        0.9, {"p01": 4e-3, "p10": 0.25e-3, "p11": 0.0, "p02": 0.0}, EfficiencyModel.unit(), "simplified"
    )
    assert est.d_abs > math.sqrt(4e-3 * 0.25e-3)
    assert "positivity_violation" in est.flags


# ---------------------------------------------------------------------------
# restriction


def test_restrict_identity_on_block_state():
    rd = random_restricted(np.random.default_rng(11))
    reg = ModeRegister(2, 2)
    mat = np.zeros((9, 9), dtype=complex)
    mat[np.ix_([0, 1, 3, 4], [0, 1, 3, 4])] = rd.normalized_matrix()
    back = restrict(DensityOperator(reg, mat))
    assert abs(back.p_tilde - 1.0) < 1e-12
    assert abs(back.p01 - rd.p01 / rd.p_tilde) < 1e-12
    assert abs(back.d_abs - rd.d_abs / rd.p_tilde) < 1e-12


def test_restrict_accounts_for_two_photon_weight():
    reg = ModeRegister(2, 2)
    mat = np.zeros((9, 9), dtype=complex)
    mat[0, 0] = 0.72
    mat[1, 1] = 0.09
    mat[3, 3] = 0.09
    mat[reg.index((0, 2)), reg.index((0, 2))] = 0.05
    mat[reg.index((2, 0)), reg.index((2, 0))] = 0.05
    rd = restrict(DensityOperator(reg, mat))
    assert abs(rd.p_tilde - 0.90) < 1e-12
    assert abs(rd.p02 - 0.05) < 1e-12
    assert abs(rd.normalized_matrix()[0, 0].real - 0.8) < 1e-12


def test_restrict_preserves_block_positivity():
    rng = np.random.default_rng(12)
    reg = ModeRegister(2, 2)
    for _ in range(20):
        rho = random_density_operator(reg, rng)
        rd = restrict(rho)
        evals = np.linalg.eigvalsh(rd.normalized_matrix())
        assert evals[0] > -1e-12


def test_restricted_density_invariants():
    with pytest.raises(ValueError, match="negative"):
        RestrictedDensity(p00=-0.1, p01=0.5, p10=0.4, p11=0.2)
    with pytest.raises(ValueError, match="positivity"):
        RestrictedDensity(p00=0.9, p01=0.04, p10=0.05, p11=0.01, d=0.9)


# ---------------------------------------------------------------------------
# maximum likelihood


def test_mle_on_vacuum_data():
    probs = diagonal_layout_probabilities(
        tom._restricted_matrix_for_model({"p00": 1.0}, 0.0), 1.0, 1.0, 1.0
    )
    rec = _exact_record(probs, 10**6)
    result = mle_fit([rec], [], EfficiencyModel.unit())
    assert result.restricted.p00 > 1.0 - 1e-4
    assert result.restricted.d_abs < 1e-6


def test_mle_round_trip_and_likelihood_dominance():
    rng = np.random.default_rng(13)
    rd = random_restricted(rng)
    eff = EFF_BENCH
    diag_rec, fringe_recs = _records_from_restricted(rd, eff, 10**7, 10**6, seed=21)
    est = invert_diagonal(AggregatedCounts.from_record(diag_rec), eff)
    fit = fit_fringe(FringeScan(fringe_recs))
    coh = estimate_coherence(fit.visibility, est, eff, "full", fit.sigma_visibility)
    two_stage = assemble_restricted(est, coh, fit.phase0)

    result = mle_fit([diag_rec], fringe_recs, eff, initial=two_stage)
    truth = tom._restricted_matrix_for_model(
        {"p00": rd.p00, "p01": rd.p01, "p10": rd.p10, "p11": rd.p11}, rd.d_abs
    )
    assert fidelity(result.rho, DensityOperator(truth.register, truth.matrix)) >= 0.999

    history = np.array(result.history)
    assert np.all(np.diff(history) >= -1e-6)
    ll_two_stage = log_likelihood(two_stage_block(two_stage), [diag_rec], fringe_recs, eff)
    assert result.log_likelihood >= ll_two_stage - 1e-9


def test_mle_nonconvergence_carries_best_iterate():
    rng = np.random.default_rng(14)
    rd = random_restricted(rng)
    diag_rec, fringe_recs = _records_from_restricted(rd, EFF_BENCH, 10**5, 10**4, seed=22)
    with pytest.raises(MLEConvergenceError) as err:
        mle_fit([diag_rec], fringe_recs, EFF_BENCH, MLEOptions(max_iterations=1, tol=1e-16))
    assert err.value.best.rho is not None


# ---------------------------------------------------------------------------
# full two-stage round trip (smaller sibling of the acceptance criterion)


def test_published_regime_mle_concurrence_cross_validation():
    # synthetic data in the published regime: the maximum-likelihood
    # concurrence and the two-stage concurrence agree within one combined
    # standard deviation, and h from the inverted diagonals lands on the
    # published ratios
    from dlczsim.entanglement import concurrence_restricted, witnesses

    eff = EfficiencyModel.unit()
    d_true = 0.70 * (PUBLISHED_D1A["p10"] + PUBLISHED_D1A["p01"]) / 2.0
    rd_true = RestrictedDensity(
        p00=PUBLISHED_D1A["p00"] / 1.000007,
        p01=PUBLISHED_D1A["p01"],
        p10=PUBLISHED_D1A["p10"],
        p11=PUBLISHED_D1A["p11"],
        d=d_true,
        p02=PUBLISHED_D1A["p02"],
    )
    diag_rec, fringe_recs = _records_from_restricted(rd_true, eff, 4 * 10**6, 3 * 10**5, seed=77)
    est = invert_diagonal(AggregatedCounts.from_record(diag_rec), eff)
    fit = fit_fringe(FringeScan(fringe_recs))
    coh = estimate_coherence(fit.visibility, est, eff, "full", fit.sigma_visibility)
    two_stage = assemble_restricted(est, coh, fit.phase0)

    h = witnesses(two_stage)
    assert abs(h.h_c2 - 0.307) < 3.0 * h.sigma_h_c2

    c_two = concurrence_restricted(two_stage)
    mle = mle_fit([diag_rec], fringe_recs, eff, initial=two_stage)
    c_mle = concurrence_restricted(mle.restricted)
    assert abs(c_mle.concurrence - c_two.concurrence) <= c_two.sigma_concurrence


def test_two_stage_round_trip_recovers_parameters():
    rng = np.random.default_rng(15)
    eff = EFF_BENCH
    for trial in range(3):
        rd = random_restricted(rng)
        diag_rec, fringe_recs = _records_from_restricted(rd, eff, 10**6, 10**5, seed=30 + trial)
        est = invert_diagonal(AggregatedCounts.from_record(diag_rec), eff)
        fit = fit_fringe(FringeScan(fringe_recs))
        coh = estimate_coherence(fit.visibility, est, eff, "full", fit.sigma_visibility)
        for key in ("p00", "p01", "p10", "p11"):
            truth = getattr(rd, key)
            assert abs(est[key] - truth) < 5.0 * max(est.sigmas[key], 1e-12)
        assert abs(coh.d_abs - rd.d_abs) < 5.0 * max(coh.sigma, 1e-12)
