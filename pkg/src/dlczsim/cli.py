"""Command-line front end.

Commands
--------
simulate     forward-run the experiment, write state snapshots, exact
             detector probabilities and (optionally) synthetic count records
fringe-scan  two-herald phase scan of the interference layout, fitted
             visibilities included
analyze      two-stage tomography (+ optional maximum-likelihood cross-check)
             of count records, concurrence and witnesses, optional loss
             back-propagation
backprop     invert the channel budget for a quoted restricted state

Exit codes: 0 success; 2 configuration/schema errors; 3 record-integrity
errors; 4 fit/convergence failures; 5 unphysical physics inputs (budget or
heralding).  All randomness derives from the configured seed via named
substreams, so identical config+seed reproduce byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    load_config_dict,
    preset_dict,
)
from .detection import (
    CountRecord,
    RecordIntegrityError,
    merge_counts,
    read_count_records_csv,
    read_count_records_json,
    write_count_records_csv,
    write_count_records_json,
)
from .entanglement import (
    PLANES,
    UnphysicalBudgetError,
    backpropagate,
    concurrence_restricted,
    witnesses,
)
from .pipeline import (
    full_experiment,
    g12_report,
    sample_diagonal_records,
    sample_fringe_records,
)
from .protocol import HeraldError
from .tomography import (
    AggregatedCounts,
    DataQualityError,
    EfficiencyModel,
    FringeScan,
    InconsistentCountsError,
    MLEConvergenceError,
    MLEOptions,
    RestrictedDensity,
    assemble_restricted,
    estimate_coherence,
    fit_fringe,
    invert_diagonal,
    log_likelihood,
    mle_fit,
    two_stage_block,
)

EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_FIT = 4
EXIT_PHYSICS = 5

_ERROR_CODES: tuple[tuple[type, int], ...] = (
    (ConfigError, EXIT_CONFIG),
    (RecordIntegrityError, EXIT_INTEGRITY),
    (InconsistentCountsError, EXIT_INTEGRITY),
    (DataQualityError, EXIT_FIT),
    (MLEConvergenceError, EXIT_FIT),
    (UnphysicalBudgetError, EXIT_PHYSICS),
    (HeraldError, EXIT_PHYSICS),
)


def _fail(exc: Exception) -> "SystemExit":
    for klass, code in _ERROR_CODES:
        if isinstance(exc, klass):
            click.echo(f"error: {exc}", err=True)
            return SystemExit(code)
    raise exc


def _load_config(config_path: str | None, preset: str, window: str) -> tuple[ExperimentConfig, dict]:
    if config_path is not None:
        data = load_config_dict(config_path)
    else:
        name = preset
        if preset == "paper" and window == "w120":
            name = "paper_w120"
        data = preset_dict(name)
    return config_from_dict(data), data


def _apply_overrides(config: ExperimentConfig, seed: int | None, trials: int | None, herald: str | None) -> ExperimentConfig:
    if seed is not None:
        config = replace(config, seed=seed)
    if trials is not None:
        config = replace(config, trials=trials)
    if herald is not None:
        config = replace(config, herald=replace(config.herald, which=herald))
    return config


def _herald_flag_to_name(value: str | None) -> str | None:
    if value is None:
        return None
    return {"d1a": "D1a", "d1b": "D1b"}[value]


class _Outputs:
    """Collects written files for the run manifest."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: list[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.files.append(p)
        return p

    def write_json(self, name: str, payload) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(_round_floats(payload), indent=2, sort_keys=True) + "\n")
        return p

    def write_csv(self, name: str, header: list[str], rows: list[list]) -> Path:
        p = self.path(name)
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(_csv_cell(c) for c in row))
        p.write_text("\n".join(lines) + "\n")
        return p

    def manifest(self, command: str, config_data: dict | None) -> None:
        entries = []
        for p in self.files:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            entries.append({"path": p.name, "sha256": digest})
        payload = {
            "tool": "dlczsim",
            "version": __version__,
            "command": command,
            "config_sha256": config_hash(config_data) if config_data is not None else None,
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "outputs": entries,
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _round_sig(x: float, sig: int = 12) -> float:
    if x == 0.0 or not np.isfinite(x):
        return float(x)
    from math import floor, log10

    return round(x, sig - 1 - floor(log10(abs(x))))


def _round_floats(obj, sig: int = 12):
    """Round every float in a JSON-ready payload; absorbs last-ulp run-to-run
    noise from alignment-dependent BLAS reductions so outputs stay
    byte-identical for a fixed config and seed."""
    if isinstance(obj, float):
        return _round_sig(obj, sig)
    if isinstance(obj, dict):
        return {k: _round_floats(v, sig) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, sig) for v in obj]
    return obj


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(_round_sig(value))
    return str(value)


def _density_payload(rho) -> dict:
    return {
        "register": {"n_modes": rho.register.n_modes, "cutoff": rho.register.cutoff},
        "matrix_re": np.real(rho.matrix).tolist(),
        "matrix_im": np.imag(rho.matrix).tolist(),
    }


@click.group()
@click.version_option(version=__version__, prog_name="dlczsim")
def main() -> None:
    """Simulation and verification pipeline for heralded entanglement of two
    remote atomic ensembles."""


_common = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Experiment config JSON (overrides --preset/--window)."),
    click.option("--preset", type=click.Choice(["paper", "paper_w120", "ideal"]), default="paper", show_default=True, help="Bundled configuration preset."),
    click.option("--window", type=click.Choice(["w190", "w120"]), default="w190", show_default=True, help="Detection-window preset variant (with --preset paper)."),
    click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True, help="Output directory."),
    click.option("--seed", type=int, default=None, help="Override config seed."),
    click.option("--trials", type=int, default=None, help="Override config trials."),
    click.option("--herald", type=click.Choice(["d1a", "d1b"]), default=None, help="Override heralding detector."),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@main.command()
@_with_common
@click.option("--layout", type=click.Choice(["diagonal", "fringe", "both"]), default=None, help="Override configured detector layout (or emit both).")
def simulate(config_path, preset, window, out_dir, seed, trials, herald, layout):
    """Forward simulation: states, probabilities, optional synthetic counts."""
    try:
        config, data = _load_config(config_path, preset, window)
        config = _apply_overrides(config, seed, trials, _herald_flag_to_name(herald))
        layouts = {layout} if layout not in (None, "both") else ({"diagonal", "fringe"} if layout == "both" else {config.layout})
        out = _Outputs(Path(out_dir))
        result = full_experiment(config)

        out.write_json("state_atomic.json", _density_payload(result.atomic))
        out.write_json("state_z2.json", _density_payload(result.z2.rho))
        out.write_json("state_z1.json", _density_payload(result.z1))
        out.write_json("state_z0.json", _density_payload(result.z0))
        out.write_json(
            "herald.json",
            {
                "which": result.herald_which,
                "probability": result.herald_probability,
                "patterns": {"".join(map(str, k)): v for k, v in result.herald_patterns.items()},
            },
        )

        rows = [["".join(map(str, pattern)), p] for pattern, p in sorted(result.diagonal_probs.items())]
        out.write_csv("probs_diagonal.csv", ["pattern_bits", "probability"], rows)
        rows = []
        for phi, probs in result.fringe_probs:
            for pattern, p in sorted(probs.items()):
                rows.append([phi, "".join(map(str, pattern)), p])
        out.write_csv("probs_fringe.csv", ["phase_phi_radians", "pattern_bits", "probability"], rows)

        if config.trials > 0:
            if "diagonal" in layouts:
                rec = sample_diagonal_records(result, config.trials, config.seed)
                write_count_records_csv([rec], out.path("counts_diagonal.csv"))
                write_count_records_json([rec], out.path("counts_diagonal.json"))
            if "fringe" in layouts:
                per_point = max(config.trials // max(len(config.fringe_phases), 1), 1)
                recs = sample_fringe_records(result, per_point, config.seed)
                write_count_records_csv(recs, out.path("counts_fringe.csv"))
                write_count_records_json(recs, out.path("counts_fringe.json"))

        g12 = g12_report(config)
        out.write_json(
            "g12.json",
            {side: {"p1": s.p1, "p2": s.p2, "p12": s.p12, "g12": s.g12} for side, s in g12.items()},
        )
        out.manifest("simulate", data)
        click.echo(f"herald {result.herald_which}: probability {result.herald_probability:.4e}")
        click.echo(f"outputs in {out.out_dir}")
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        raise _fail(exc)


@main.command("fringe-scan")
@_with_common
def fringe_scan(config_path, preset, window, out_dir, seed, trials, herald, **_):
    """Two-herald phase scan of the interference layout."""
    try:
        config, data = _load_config(config_path, preset, window)
        config = _apply_overrides(config, seed, trials, _herald_flag_to_name(herald))
        out = _Outputs(Path(out_dir))
        rows = []
        fits = {}
        for which in ("D1a", "D1b"):
            result = full_experiment(config, which=which)
            per_point = max(config.trials // max(len(config.fringe_phases), 1), 1) if config.trials else 0
            if per_point:
                records = sample_fringe_records(result, per_point, config.seed)
            else:
                records = None
            for k, (phi, probs) in enumerate(result.fringe_probs):
                if records is not None:
                    rec = records[k]
                    n2a = rec.clicked_count("D2a")
                    n2bc = rec.clicked_count("D2b") + rec.clicked_count("D2c")
                    rows.append([which, phi, n2a, n2bc, rec.trials])
                else:
                    p2a = sum(p for pat, p in probs.items() if pat[0] == 1)
                    p2bc = sum(p * (pat[1] + pat[2]) for pat, p in probs.items())
                    rows.append([which, phi, p2a, p2bc, 0])
            if records is not None:
                fit = fit_fringe(FringeScan(records))
                fits[which] = fit.as_dict()
        out.write_csv("fringe_scan.csv", ["herald", "phase_phi_radians", "n2a", "n2b_plus_n2c", "trials"], rows)
        if fits:
            if len(fits) == 2:
                delta = abs(fits["D1a"]["phase0"] - fits["D1b"]["phase0"])
                fits["phase_offset_minus_pi"] = abs(delta - np.pi)
            out.write_json("fringe_fits.json", fits)
            for which in ("D1a", "D1b"):
                click.echo(
                    f"{which}: V = {fits[which]['visibility']:.4f} "
                    f"+- {fits[which]['sigma_visibility']:.4f}"
                )
        out.manifest("fringe-scan", data)
        click.echo(f"outputs in {out.out_dir}")
    except Exception as exc:  # noqa: BLE001
        raise _fail(exc)


def _read_records(path: Path) -> list[CountRecord]:
    if path.suffix == ".json":
        return read_count_records_json(path)
    return read_count_records_csv(path, detector_ids=("D2a", "D2b", "D2c"))


def _analysis_payload(rd: RestrictedDensity, herald_label: str) -> dict:
    payload = rd.as_dict()
    payload["herald"] = herald_label
    return payload


@main.command()
@_with_common
@click.option("--records", "records_dir", type=click.Path(file_okay=False, exists=True), default=None, help="Directory with counts_diagonal.json and counts_fringe.json (as written by simulate).")
@click.option("--diag", "diag_path", type=click.Path(dir_okay=False, exists=True), default=None, help="Diagonal-layout count records (CSV or JSON).")
@click.option("--fringe", "fringe_path", type=click.Path(dir_okay=False, exists=True), default=None, help="Fringe-layout count records (CSV or JSON).")
@click.option("--plane", type=click.Choice(list(PLANES)), default="detectors", show_default=True, help="Reference plane for the reported state (losses inverted through the budget).")
@click.option("--mle", is_flag=True, help="Run the joint maximum-likelihood cross-check.")
@click.option("--coherence-mode", type=click.Choice(["simplified", "full"]), default="full", show_default=True)
def analyze(config_path, preset, window, out_dir, seed, trials, herald, records_dir, diag_path, fringe_path, plane, mle, coherence_mode):
    """Two-stage tomography and concurrence from count records.

    Populations are quoted in the unit-detection-efficiency convention of the
    raw records (the conservative choice); --plane re-references them through
    the channel budget.
    """
    try:
        config, data = _load_config(config_path, preset, window)
        config = _apply_overrides(config, seed, trials, _herald_flag_to_name(herald))
        if records_dir is None and (diag_path is None or fringe_path is None):
            raise ConfigError("analyze needs --records DIR or both --diag and --fringe")
        if records_dir is not None:
            diag_path = diag_path or str(Path(records_dir) / "counts_diagonal.json")
            fringe_path = fringe_path or str(Path(records_dir) / "counts_fringe.json")
        diag_records = _read_records(Path(diag_path))
        fringe_records = _read_records(Path(fringe_path))
        out = _Outputs(Path(out_dir))

        herald_label = config.herald.which
        unit_eff = EfficiencyModel(split=config.detectors.split, bs2_T=config.detectors.bs2_T)
        diag_rec = diag_records[0]
        for extra in diag_records[1:]:
            diag_rec = merge_counts(diag_rec, extra)
        estimate = invert_diagonal(AggregatedCounts.from_record(diag_rec), unit_eff, bootstrap=200, seed=config.seed)
        fit = fit_fringe(FringeScan(fringe_records))
        coherence = estimate_coherence(fit.visibility, estimate, unit_eff, coherence_mode, fit.sigma_visibility)
        rd = assemble_restricted(estimate, coherence, fit.phase0)
        conc = concurrence_restricted(rd, herald=herald_label, mc_samples=10000, seed=config.seed)
        report = witnesses(rd)

        result_payload = {
            "herald": herald_label,
            "reference": "detectors (unit detection efficiency)",
            "populations": {k: estimate[k] for k in ("p00", "p01", "p10", "p11", "p02")},
            "sigmas": dict(estimate.sigmas),
            "bootstrap_sigmas": dict(estimate.bootstrap_sigmas or {}),
            "visibility": fit.as_dict(),
            "coherence": {"d_abs": coherence.d_abs, "sigma": coherence.sigma, "mode": coherence.mode},
            "p_tilde": rd.p_tilde,
            "flags": list(rd.flags),
            "efficiency_model": unit_eff.as_dict(),
            "concurrence": conc.as_dict(),
            "witnesses": report.as_dict(),
        }

        if mle:
            mle_result = mle_fit(diag_records, fringe_records, unit_eff, MLEOptions(), initial=rd)
            ll_two_stage = log_likelihood(two_stage_block(rd), diag_records, fringe_records, unit_eff)
            result_payload["mle"] = {
                "restricted": mle_result.restricted.as_dict(),
                "log_likelihood": mle_result.log_likelihood,
                "log_likelihood_two_stage": ll_two_stage,
                "iterations": mle_result.n_iterations,
                "converged": mle_result.converged,
                "concurrence": concurrence_restricted(mle_result.restricted).as_dict(),
            }

        fig_rows = []
        plane_payload = {}
        budget = config.budget
        planes = ["detectors"] if plane == "detectors" else ["detectors", plane]
        for target in planes:
            rd_t = rd if target == "detectors" else backpropagate(rd, budget, target)
            conc_t = concurrence_restricted(rd_t, herald=herald_label)
            plane_payload[target] = {
                "state": _analysis_payload(rd_t, herald_label),
                "concurrence": conc_t.as_dict(),
            }
            fig_rows.append(
                [
                    target,
                    herald_label,
                    conc_t.concurrence,
                    conc_t.sigma_concurrence,
                    rd_t.p00,
                    rd_t.p01,
                    rd_t.p10,
                    rd_t.p11,
                    rd_t.d_abs,
                ]
            )
        result_payload["planes"] = plane_payload
        out.write_json("tomography_result.json", result_payload)
        out.write_csv(
            "concurrence_planes.csv",
            ["plane", "herald", "concurrence", "sigma_concurrence", "p00", "p01", "p10", "p11", "d_abs"],
            fig_rows,
        )
        out.manifest("analyze", data)

        click.echo(f"herald {herald_label} | reference: detectors, unit detection efficiency")
        for key in ("p00", "p01", "p10", "p11", "p02"):
            click.echo(f"  {key} = {estimate[key]:.5e} +- {estimate.sigmas[key]:.1e}")
        click.echo(f"  V = {fit.visibility:.4f} +- {fit.sigma_visibility:.4f}")
        click.echo(f"  |d| = {coherence.d_abs:.4e} +- {coherence.sigma:.1e} ({coherence.mode})")
        click.echo(f"  h_c2 = {report.h_c2:.4f} +- {report.sigma_h_c2:.4f}")
        click.echo(
            f"  C = {conc.concurrence:.4e} +- {conc.sigma_concurrence:.1e}"
            f"  (P~C = {conc.lower_bound:.4e})"
        )
        if plane != "detectors":
            conc_t = plane_payload[plane]["concurrence"]
            click.echo(f"  C at {plane} = {conc_t['concurrence']:.4e} +- {conc_t['sigma_concurrence']:.1e}")
        if mle:
            click.echo(
                f"  MLE: logL = {result_payload['mle']['log_likelihood']:.2f} "
                f"(two-stage {result_payload['mle']['log_likelihood_two_stage']:.2f})"
            )
        click.echo(f"outputs in {out.out_dir}")
    except Exception as exc:  # noqa: BLE001
        raise _fail(exc)


@main.command()
@_with_common
@click.option("--result", "result_path", type=click.Path(dir_okay=False, exists=True), default=None, help="tomography_result.json from analyze.")
@click.option("--plane", type=click.Choice(["z0", "z1", "z2"]), default="z2", show_default=True)
@click.option("--p00", type=float, default=None)
@click.option("--p01", type=float, default=None)
@click.option("--p10", type=float, default=None)
@click.option("--p11", type=float, default=None)
@click.option("--visibility", "-v", "vis", type=float, default=None, help="Fringe visibility fixing the coherence via |d| = V (p10+p01)/2.")
def backprop(config_path, preset, window, out_dir, seed, trials, herald, result_path, plane, p00, p01, p10, p11, vis, **_):
    """Back-propagate a restricted state through the channel budget."""
    try:
        config, data = _load_config(config_path, preset, window)
        config = _apply_overrides(config, seed, trials, _herald_flag_to_name(herald))
        if config.budget is None:
            raise ConfigError("backprop needs a channel budget in the config")
        direct = [p00, p01, p10, p11, vis]
        if result_path is not None:
            payload = json.loads(Path(result_path).read_text())
            pops = payload["populations"]
            d_abs = payload["coherence"]["d_abs"]
            sig = payload.get("sigmas", {})
            rd = RestrictedDensity(
                p00=pops["p00"],
                p01=pops["p01"],
                p10=pops["p10"],
                p11=pops["p11"],
                d=min(d_abs, (pops["p01"] * pops["p10"]) ** 0.5),
                sigmas={f"sigma_{k}": v for k, v in sig.items() if k in ("p00", "p01", "p10", "p11")}
                | {"sigma_d": payload["coherence"]["sigma"]},
            )
            herald_label = payload.get("herald", config.herald.which)
        elif all(v is not None for v in direct):
            d_abs = vis * (p10 + p01) / 2.0
            rd = RestrictedDensity(p00=p00, p01=p01, p10=p10, p11=p11, d=min(d_abs, (p01 * p10) ** 0.5))
            herald_label = config.herald.which
        else:
            raise ConfigError("backprop needs --result or all of --p00/--p01/--p10/--p11/--visibility")

        out = _Outputs(Path(out_dir))
        rows = []
        payload_planes = {}
        for target in ("detectors", "z0", "z1", "z2"):
            rd_t = rd if target == "detectors" else backpropagate(rd, config.budget, target)
            conc = concurrence_restricted(rd_t, herald=herald_label)
            payload_planes[target] = {
                "state": rd_t.as_dict(),
                "concurrence": conc.as_dict(),
            }
            rows.append(
                [target, herald_label, conc.concurrence, conc.sigma_concurrence, rd_t.p00, rd_t.p01, rd_t.p10, rd_t.p11, rd_t.d_abs]
            )
            if target == plane:
                click.echo(
                    f"{target}: C = {conc.concurrence:.4e} +- {conc.sigma_concurrence:.1e}, "
                    f"p10+p01 = {rd_t.p10 + rd_t.p01:.4f}"
                )
        out.write_json("backprop.json", payload_planes)
        out.write_csv(
            "concurrence_planes.csv",
            ["plane", "herald", "concurrence", "sigma_concurrence", "p00", "p01", "p10", "p11", "d_abs"],
            rows,
        )
        out.manifest("backprop", data)
        click.echo(f"outputs in {out.out_dir}")
    except Exception as exc:  # noqa: BLE001
        raise _fail(exc)


if __name__ == "__main__":
    main()
