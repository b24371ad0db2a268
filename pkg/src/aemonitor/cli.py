"""Command-line surface: fit, decide, simulate, calibrate, compare, forest.

Every command is a pure function of its input files, flags and seed:
result files are written atomically (temp file, then rename) and repeat
invocations are byte-identical. A run manifest records the command, input
hashes, seed, package versions and timing next to each output set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import comparators, decision, simulation
from .data_model import DataError, Dataset, SchemaError, parse_dataset, to_blinded, validate
from .inference import (Hyperparams, McmcConfig, PosteriorDraws, posterior_summaries,
                        run_chain)
from .partition import PriorConfig
from .similarity import SimilarityParams

# Named analysis presets: cohesion total mass and the Gamma hyperpriors.
PRESETS = {
    "paper-default": {"total_mass": 2.0, "a_prior": (1.0, 1.0), "b_prior": (1.0, 1.0)},
    "paper-M10": {"total_mass": 10.0, "a_prior": (1.0, 1.0), "b_prior": (1.0, 1.0)},
    "paper-vague": {"total_mass": 2.0, "a_prior": (0.001, 0.001),
                    "b_prior": (0.001, 0.001)},
}


class CliError(Exception):
    """Input or configuration problem; maps to exit code 1."""


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("aemonitor") / f"data/{name}"))


def _read_text(path: str, what: str) -> str:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    return p.read_text(encoding="utf-8")


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    input_hashes: dict[str, str], outputs: list[str],
                    elapsed: float) -> None:
    manifest = {
        "command": command,
        "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "input_sha256": input_hashes,
        "seed": getattr(args, "seed", None),
        "versions": {
            "aemonitor": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "wall_clock_seconds": round(elapsed, 3),
        "outputs": sorted(outputs),
    }
    _write_json(out_dir / "manifest.json", manifest)


def _load_dataset(args) -> tuple[Dataset, dict[str, str]]:
    data_path = args.data or str(bundled_path("case_study.csv"))
    schema_path = args.schema or str(bundled_path("schema.json"))
    csv_text = _read_text(data_path, "dataset")
    schema_text = _read_text(schema_path, "schema config")
    try:
        ds = parse_dataset(csv_text, schema_text)
    except (DataError, SchemaError) as exc:
        raise CliError(str(exc)) from exc
    problems = validate(ds)
    if problems:
        raise CliError("dataset failed validation:\n" +
                       "\n".join(f"  {v}" for v in problems))
    hashes = {"data": _sha256(csv_text), "schema": _sha256(schema_text)}
    return ds, hashes


def _preset(args) -> dict:
    try:
        return PRESETS[args.preset]
    except KeyError:
        raise CliError(f"unknown preset {args.preset!r}; choose from "
                       f"{', '.join(sorted(PRESETS))}") from None


def _hyper_from_preset(preset: dict, args) -> Hyperparams:
    return Hyperparams(
        a_shape=preset["a_prior"][0], a_rate=preset["a_prior"][1],
        b_shape=preset["b_prior"][0], b_rate=preset["b_prior"][1],
        m_aux=args.m_aux,
    )


def _draws_to_csv(draws: PosteriorDraws) -> str:
    lines = ["iteration,unit,theta,K,a,b"]
    for i in range(draws.n_draws):
        it = draws.burn_in + i * draws.thin
        k = int(draws.k_trace[i])
        a = repr(float(draws.a_trace[i]))
        b = repr(float(draws.b_trace[i]))
        for u in range(draws.n_units):
            lines.append(f"{it},{u},{float(draws.theta[i, u])!r},{k},{a},{b}")
    return "\n".join(lines) + "\n"


def _draws_from_csv(text: str) -> np.ndarray:
    """Per-unit rate matrix (draws x units) from a draws CSV."""
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    for col in ("iteration", "unit", "theta"):
        if col not in header:
            raise CliError(f"draws file lacks column {col!r}")
    i_unit = header.index("unit")
    i_theta = header.index("theta")
    rows: dict[int, list[float]] = {}
    for line in lines[1:]:
        parts = line.split(",")
        rows.setdefault(int(parts[i_unit]), []).append(float(parts[i_theta]))
    n_units = len(rows)
    out = np.array([rows[u] for u in range(n_units)]).T
    return out


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    started = time.time()
    ds, hashes = _load_dataset(args)
    if args.blinded:
        ds = to_blinded(ds)
    preset = _preset(args)
    params = SimilarityParams(ds.schema)
    prior = PriorConfig(preset["total_mass"], params)
    hyper = _hyper_from_preset(preset, args)
    mcmc = McmcConfig(iterations=args.iters, burn_in=args.burnin,
                      thin=args.thin, seed=args.seed)
    draws = run_chain(ds, prior, hyper, mcmc, engine=args.engine)
    summary = posterior_summaries(draws)
    summary["blinded"] = ds.blinded
    summary["preset"] = args.preset
    summary["seed"] = args.seed
    summary["engine"] = draws.engine
    summary["units_meta"] = [
        {"key": u.key, "study": u.study_id, "cohort": u.cohort_label,
         "y": u.y, "t": u.t, "empirical_rate": u.y / u.t}
        for u in ds.units
    ]

    if ds.eligibility_names and not args.no_pretrial:
        summary["pretrial_background"] = _pretrial_rate(ds, preset, hyper, args)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "draws.csv", _draws_to_csv(draws))
    _write_json(out_dir / "summary.json", summary)
    _write_manifest(out_dir, "fit", args, hashes,
                    ["draws.csv", "summary.json"], time.time() - started)
    print(f"fit: {ds.n_units} units, {draws.n_draws} draws -> {out_dir}")
    return 0


def _pretrial_rate(ds: Dataset, preset: dict, hyper: Hyperparams, args) -> float:
    """Design-stage background rate: historical-only fit, eligibility weights."""
    historical = ds.drop_study(ds.current_study_id)
    prior = PriorConfig(preset["total_mass"], SimilarityParams(historical.schema))
    mcmc = McmcConfig(iterations=args.iters, burn_in=args.burnin,
                      thin=args.thin, seed=args.seed + 1)
    draws = run_chain(historical, prior, hyper, mcmc, engine=args.engine)
    theta_hat = draws.theta.mean(axis=0)
    elig = decision.eligibility_params(ds)
    planned = [ds.units[i].covariates for i in ds.current_indices()]
    return decision.pretrial_background(theta_hat, historical.units, planned, elig)


# ---------------------------------------------------------------------------
# decide


def cmd_decide(args) -> int:
    started = time.time()
    ds, hashes = _load_dataset(args)
    fit_dir = Path(args.fit)
    summary_text = _read_text(str(fit_dir / "summary.json"), "fit summary")
    draws_text = _read_text(str(fit_dir / "draws.csv"), "fit draws")
    hashes["fit_summary"] = _sha256(summary_text)
    hashes["fit_draws"] = _sha256(draws_text)
    summary = json.loads(summary_text)
    blinded = bool(summary["blinded"])
    if args.delta is None:
        raise CliError("delta required: pass --delta (events per person-day)")
    if blinded:
        ds = to_blinded(ds)
    fit_keys = [u["key"] for u in summary["units_meta"]]
    if fit_keys != [u.key for u in ds.units]:
        raise CliError("fit output does not match the dataset's units")
    theta = _draws_from_csv(draws_text)

    cfg = decision.DecisionConfig(delta=args.delta, lambda1=args.lambda1,
                                  lambda2=args.lambda2, lambda3=args.lambda3,
                                  reporting_rule=args.rule)
    params = SimilarityParams(ds.schema)
    from .similarity import similarity_matrix
    simmat = similarity_matrix(ds, params)
    provenance = {"fit_dir": str(fit_dir), "seed": summary.get("seed"),
                  "dataset_sha256": hashes["data"]}
    try:
        if blinded:
            focus = ds.current_indices()
            reference = ds.historical_indices()
            weights = decision.reference_weights(simmat, focus, reference)
            pi1 = decision.event_probability(theta, focus, args.delta,
                                             reference=reference, weights=weights)
            report = decision.decide(
                cfg, blinded=True, pi1=pi1,
                background_rate=summary.get("pretrial_background"),
                weight_tables={"blinded": weights.tolist()},
                provenance=provenance)
        else:
            pi2, pi3 = decision.unblinded_event_probabilities(ds, theta, simmat,
                                                              args.delta)
            trt = ds.treatment_indices()
            others = [i for i in range(ds.n_units) if i not in set(trt)]
            weights = decision.reference_weights(simmat, trt, others)
            report = decision.decide(
                cfg, blinded=False, pi2=pi2, pi3=pi3,
                background_rate=summary.get("pretrial_background"),
                weight_tables={"treatment_vs_rest": weights.tolist()},
                provenance=provenance)
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "decision.json", report.to_dict())
    _write_manifest(out_dir, "decide", args, hashes, ["decision.json"],
                    time.time() - started)
    print(f"decide: blinded={blinded} -> {out_dir / 'decision.json'}")
    return 0


# ---------------------------------------------------------------------------
# simulate / calibrate / compare


def _method_configs(args, ds: Dataset) -> list[simulation.MethodConfig]:
    preset = _preset(args)
    hyper = _hyper_from_preset(preset, args)
    if args.delta is None:
        raise CliError("delta required: pass --delta (events per person-day)")
    configs = []
    for name in args.methods.split(","):
        name = name.strip()
        if name not in simulation.ALL_METHODS:
            raise CliError(f"unknown method {name!r}; choose from "
                           f"{', '.join(simulation.ALL_METHODS)}")
        subset = (simulation.reduced_covariate_subset(ds)
                  if name == "PPMx-L" else None)
        configs.append(simulation.MethodConfig(
            method=name, delta=args.delta,
            lambda1=args.lambda1, lambda2=args.lambda2, lambda3=args.lambda3,
            iterations=args.iters, burn_in=args.burnin,
            total_mass=preset["total_mass"], hyper=hyper,
            engine=args.engine, covariate_subset=subset))
    return configs


def _load_scenario(args, ds: Dataset, hashes: dict[str, str]) -> simulation.Scenario:
    scen_path = args.scenario_file or str(bundled_path("scenarios.json"))
    scen_text = _read_text(scen_path, "scenario file")
    hashes["scenario"] = _sha256(scen_text)
    try:
        return simulation.scenario_from_config(scen_text, ds, args.scenario)
    except (DataError, KeyError) as exc:
        raise CliError(f"cannot resolve scenario {args.scenario!r}: {exc}") from exc


def _apply_thresholds_file(args, configs: list[simulation.MethodConfig]
                           ) -> list[simulation.MethodConfig]:
    if not args.thresholds:
        return configs
    doc = json.loads(_read_text(args.thresholds, "thresholds file"))
    out = []
    for cfg in configs:
        entry = doc.get(cfg.method, {})
        out.append(cfg.with_thresholds(lambda1=entry.get("lambda1"),
                                       lambda2=entry.get("lambda2"),
                                       lambda3=entry.get("lambda3")))
    return out


def _oc_csv(result: simulation.OCResult) -> str:
    lines = ["method,scenario,n_reps,e1_frequency,composite_frequency,"
             "delta,lambda1,lambda2,lambda3,seed"]
    for name in sorted(result.methods):
        m = result.methods[name]
        def fmt(v):
            return "" if v is None else repr(v)
        lines.append(",".join([
            name, result.scenario_id, str(result.n_reps),
            fmt(m.e1_frequency), fmt(m.composite_frequency), repr(m.delta),
            fmt(m.lambda1), fmt(m.lambda2), fmt(m.lambda3), str(result.seed),
        ]))
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    started = time.time()
    ds, hashes = _load_dataset(args)
    scenario = _load_scenario(args, ds, hashes)
    configs = _apply_thresholds_file(args, _method_configs(args, ds))
    for cfg in configs:
        if cfg.method != "CAI" and cfg.lambda1 is None:
            raise CliError(f"{cfg.method}: lambda1 required (flag or thresholds file)")
        if cfg.method == "CAI" and cfg.lambda2 is None and cfg.lambda3 is None:
            raise CliError("CAI: lambda2 or lambda3 required")
    result = simulation.run_operating_characteristics(
        ds, scenario, configs, args.reps, args.seed, workers=args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "oc.json", result.to_dict())
    _atomic_write(out_dir / "oc.csv", _oc_csv(result))
    _write_manifest(out_dir, "simulate", args, hashes, ["oc.json", "oc.csv"],
                    time.time() - started)
    for name in sorted(result.methods):
        m = result.methods[name]
        print(f"simulate sc{result.scenario_id} {name}: "
              f"e1={m.e1_frequency} composite={m.composite_frequency}")
    return 0


def cmd_calibrate(args) -> int:
    started = time.time()
    ds, hashes = _load_dataset(args)
    scenario = _load_scenario(args, ds, hashes)
    configs = _apply_thresholds_file(args, _method_configs(args, ds))
    try:
        results = simulation.calibrate_thresholds(
            ds, scenario, configs, args.target, args.which, args.reps, args.seed,
            workers=args.workers)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    doc = {}
    for name, res in sorted(results.items()):
        entry = res.to_dict()
        if args.which == "lambda1":
            doc[name] = {"lambda1": res.threshold, "calibration": entry}
        else:
            doc[name] = {"lambda2": res.threshold, "lambda3": res.threshold,
                         "calibration": entry}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "thresholds.json", doc)
    _write_manifest(out_dir, "calibrate", args, hashes, ["thresholds.json"],
                    time.time() - started)
    for name, res in sorted(results.items()):
        note = " (degenerate)" if res.degenerate else ""
        note += " (shortfall)" if res.shortfall else ""
        print(f"calibrate {args.which} {name}: {res.threshold:.6g}{note}")
    return 0


def cmd_compare(args) -> int:
    """Run operating characteristics for several methods and emit one row each."""
    return cmd_simulate(args)


# ---------------------------------------------------------------------------
# forest


def _forest_rows(summary: dict, baseline: bool) -> list[dict]:
    from scipy.stats import gamma as gamma_dist
    rows = []
    units = summary["units"]
    meta = {m["key"]: m for m in summary["units_meta"]}
    for u in units:
        m = meta[u["key"]]
        row = {
            "unit": u["key"], "mean": u["mean"],
            "lower95": u["lower95"], "upper95": u["upper95"],
            "empirical_rate": m["empirical_rate"],
        }
        if baseline:
            y, t = m["y"], m["t"]
            row["flat_mean"] = (y + 1) / t
            row["flat_lower95"] = float(gamma_dist.ppf(0.025, y + 1, scale=1 / t))
            row["flat_upper95"] = float(gamma_dist.ppf(0.975, y + 1, scale=1 / t))
        rows.append(row)
    return rows


def _forest_csv(rows: list[dict]) -> str:
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


def _forest_svg(rows: list[dict]) -> str:
    """Static forest plot: one horizontal interval per unit, dot at the mean."""
    width, row_h, left, right_pad, top = 760, 22, 230, 30, 40
    height = top + row_h * len(rows) + 20
    hi = max(r["upper95"] for r in rows)
    scale = (width - left - right_pad) / hi

    def x(v: float) -> float:
        return left + v * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="{left}" y="20">posterior mean rate and 95% interval '
        f'(events per person-day)</text>',
    ]
    for i, r in enumerate(rows):
        cy = top + row_h * i + row_h / 2
        parts.append(f'<text x="4" y="{cy + 4:.1f}">{r["unit"]}</text>')
        parts.append(f'<line x1="{x(r["lower95"]):.2f}" y1="{cy:.1f}" '
                     f'x2="{x(r["upper95"]):.2f}" y2="{cy:.1f}" '
                     f'stroke="black" stroke-width="1.5"/>')
        parts.append(f'<circle cx="{x(r["mean"]):.2f}" cy="{cy:.1f}" r="3" fill="black"/>')
        parts.append(f'<circle cx="{x(r["empirical_rate"]):.2f}" cy="{cy:.1f}" r="2.5" '
                     f'fill="none" stroke="gray"/>')
        if "flat_lower95" in r:
            parts.append(f'<line x1="{x(r["flat_lower95"]):.2f}" y1="{cy + 5:.1f}" '
                         f'x2="{x(r["flat_upper95"]):.2f}" y2="{cy + 5:.1f}" '
                         f'stroke="gray" stroke-dasharray="3,2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_forest(args) -> int:
    started = time.time()
    summary_text = _read_text(args.summary, "fit summary")
    summary = json.loads(summary_text)
    if not summary.get("units"):
        raise CliError("fit summary contains no unit estimates")
    rows = _forest_rows(summary, baseline=args.baseline)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = ["forest.csv"]
    _atomic_write(out_dir / "forest.csv", _forest_csv(rows))
    if args.svg:
        _atomic_write(out_dir / "forest.svg", _forest_svg(rows))
        outputs.append("forest.svg")
    _write_manifest(out_dir, "forest", args, {"summary": _sha256(summary_text)},
                    outputs, time.time() - started)
    print(f"forest: {len(rows)} rows -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_io_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset CSV (default: bundled case study)")
    p.add_argument("--schema", help="schema config JSON (default: bundled)")
    p.add_argument("--out", required=True, help="output directory")


def _add_mcmc_flags(p: argparse.ArgumentParser, iters: int, burnin: int) -> None:
    p.add_argument("--preset", default="paper-default",
                   choices=sorted(PRESETS), help="analysis preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--burnin", type=int, default=burnin)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--m-aux", dest="m_aux", type=int, default=3,
                   help="auxiliary components per membership update")
    p.add_argument("--engine", default="auto", choices=["auto", "numba", "python"])


def _add_decision_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=float, default=None,
                   help="minimum meaningful rate difference (per person-day)")
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--lambda3", type=float, default=None)


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="scenario id, e.g. 0, 1, 2")
    p.add_argument("--scenario-file", dest="scenario_file",
                   help="scenario JSON (default: bundled)")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--methods", default="PPMx")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--thresholds", help="thresholds JSON from the calibrate command")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aemonitor",
        description="Aggregate adverse-event rate monitoring across trials")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="run the partition-model fit on a dataset")
    _add_io_flags(p)
    _add_mcmc_flags(p, iters=10_000, burnin=2_000)
    p.add_argument("--blinded", action="store_true",
                   help="pool the current study's arms before fitting")
    p.add_argument("--no-pretrial", action="store_true",
                   help="skip the design-stage background rate")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decide", help="apply decision thresholds to a fit")
    _add_io_flags(p)
    p.add_argument("--fit", required=True, help="directory written by fit")
    _add_decision_flags(p)
    p.add_argument("--rule", default="E2-or-E3", choices=decision.REPORTING_RULES)
    p.set_defaults(func=cmd_decide)

    for name, help_text in (("simulate", "operating characteristics for one scenario"),
                            ("compare", "same as simulate, for several methods")):
        p = sub.add_parser(name, help=help_text)
        _add_io_flags(p)
        _add_mcmc_flags(p, iters=4_000, burnin=1_000)
        _add_decision_flags(p)
        _add_sim_flags(p)
        p.set_defaults(func=cmd_simulate if name == "simulate" else cmd_compare)

    p = sub.add_parser("calibrate", help="calibrate decision thresholds")
    _add_io_flags(p)
    _add_mcmc_flags(p, iters=4_000, burnin=1_000)
    _add_decision_flags(p)
    _add_sim_flags(p)
    p.add_argument("--target", type=float, required=True,
                   help="target exceedance rate, e.g. 0.05")
    p.add_argument("--which", default="lambda1", choices=["lambda1", "lambda23"])
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("forest", help="forest-plot data from a fit summary")
    p.add_argument("--summary", required=True, help="summary.json from fit")
    p.add_argument("--baseline", action="store_true",
                   help="add independent flat-prior Poisson intervals")
    p.add_argument("--svg", action="store_true", help="also render a static SVG")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
