"""Command-line front end: ``trignet analyze|simulate|compare|generate``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ConfigOverrides, parse_config, write_config, write_trace_csv
from .gainalg import GainExpr, GainMatrix, MAFKind, PowerGain, is_irreducible, log_grid, small_gain_check
from .omega import OmegaPath, PathProvenance, build_omega_path_linear, build_phi_linear, path_budgets, \
    verify_omega_condition
from .plant import (
    LinearPlant,
    LyapunovData,
    NonlinearPlant,
    builtin_nonlinear_example,
    coupling_graph,
    derive_linear_gains,
    generate_random_system,
    linear_gain_coefficients,
    random_initial_state,
)
from .sim import SCHEMES, SimConfig, run_simulation
from .trigger import ClosedLoopDesign, ThresholdSet, build_theta_linear, compute_thresholds

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SMALL_GAIN = 3
EXIT_DIVERGENCE = 4

NONLINEAR_X0 = (-4.0, 3.0)


class SmallGainFailure(Exception):
    """The coupling is too strong for the requested construction."""


def _gain_json(g: GainExpr) -> list:
    return [[t.coeff, t.exponent] for t in g.terms]


def build_design(plant, overrides: ConfigOverrides | None = None, practical_c=None) -> tuple:
    """Design the closed loop and collect the analysis facts; returns ``(design, facts)``.

    Raises ``SmallGainFailure`` when the small-gain test or the path check
    fails and ``ConfigError`` for inconsistent overrides.
    """
    ov = overrides or ConfigOverrides()
    facts = {}
    if isinstance(plant, NonlinearPlant):
        if not plant.k > 32.0:
            raise SmallGainFailure(f"small-gain condition requires k>32 (k={plant.k:g})")
        try:
            ex = builtin_nonlinear_example(plant.k, ov.sigma_bar_sq)
        except ValueError as exc:
            raise ConfigError(f"sigma_bar_sq: {exc}") from None
        gains, eta, lyap = ex.gains, ex.eta, ex.lyap
        sigma = ov.sigma or ex.sigma
        phi = ov.phi or ex.phi
        check = small_gain_check(gains)
        coeffs = graph = None
    else:
        gains, eta, lyap = derive_linear_gains(plant)
        coeffs, _ = linear_gain_coefficients(plant)
        graph = coupling_graph(plant)
        check = small_gain_check(gains)
        facts["coefficients"] = coeffs.tolist()
        facts["spectral_radius"] = check.witness
        if not check.verdict:
            raise SmallGainFailure(check.detail)
        sigma = ov.sigma
        if sigma is None:
            try:
                sigma = build_omega_path_linear(coeffs)
            except ValueError as exc:
                raise SmallGainFailure(str(exc)) from None
        phi = ov.phi
        if phi is None:
            if sigma.s_star is None:
                raise ConfigError("phi: required when omega_path is not linear")
            try:
                phi = build_phi_linear(coeffs, sigma.s_star, graph)
            except ValueError as exc:
                raise SmallGainFailure(str(exc)) from None
    if sigma.n != plant.n:
        raise ConfigError(f"omega_path.sigma: expected {plant.n} components")
    if phi.n != plant.n:
        raise ConfigError(f"phi: expected {plant.n} rows")
    facts["small_gain"] = {"verdict": check.verdict, "method": check.method, "witness": check.witness,
                           "detail": check.detail}
    if not check.verdict:
        raise SmallGainFailure(check.detail)
    report = verify_omega_condition(gains, sigma, phi)
    facts["grid"] = {"points": int(log_grid().size), "verdict": report.verdict, "margin": report.witness,
                     "detail": report.detail}
    if not report.verdict:
        raise SmallGainFailure(f"path check failed: {report.detail}")
    try:
        ts = compute_thresholds(gains, eta, sigma, phi, lyap, practical_c)
    except ValueError as exc:
        raise ConfigError(f"phi: {exc}") from None
    theta = None
    if isinstance(plant, LinearPlant) and sigma.s_star is not None:
        theta = build_theta_linear(plant, ts, sigma, lyap)
    facts["irreducible"] = bool(is_irreducible(gains.adjacency()))
    facts["gains"] = [[str(g) for g in row] for row in gains.entries]
    facts["omega_path"] = {"sigma": [[s.coeff, s.exponent] for s in sigma.sigma],
                           "provenance": sigma.provenance.value,
                           "s_star": None if sigma.s_star is None else sigma.s_star.tolist()}
    if coeffs is not None and sigma.s_star is not None:
        facts["budgets"] = path_budgets(coeffs, sigma.s_star, graph).tolist()
    facts["phi"] = [[None if g.is_zero else _gain_json(g) for g in row] for row in phi.phi]
    facts["thresholds"] = {
        "chi": [_gain_json(g) for g in ts.chi],
        "eta_hat": [_gain_json(g) for g in ts.eta_hat],
        "psi": [_gain_json(g) for g in ts.psi],
        "c": ts.c.tolist(),
        "c_hat": ts.c_hat,
    }
    design = ClosedLoopDesign(gains, eta, sigma, phi, lyap, ts, theta, coeffs)
    return design, facts


def _baseline_design(plant) -> ClosedLoopDesign:
    """Design used only for V bookkeeping when a baseline runs without a certificate."""
    n = plant.n
    if isinstance(plant, NonlinearPlant):
        lyap = LyapunovData.from_P([[[0.5]], [[0.5]]], (PowerGain.zero(),) * n)
        eta = ()
    else:
        _, eta, lyap = derive_linear_gains(plant)
    sigma = OmegaPath(tuple(PowerGain.identity() for _ in range(n)), PathProvenance.USER)
    zero = tuple(GainExpr.zero() for _ in range(n))
    ts = ThresholdSet(zero, zero, zero, np.zeros(n), 0.0)
    gains = GainMatrix(tuple(zero for _ in range(n)), (MAFKind.MAX,) * n)
    return ClosedLoopDesign(gains, eta, sigma, None, lyap, ts)


def format_report(facts: dict) -> str:
    lines = []
    sg = facts["small_gain"]
    lines.append(f"small-gain check ({sg['method']}): {'pass' if sg['verdict'] else 'FAIL'}; {sg['detail']}")
    if "coefficients" in facts:
        lines.append("gain coefficients G (gamma_ij = G_ij sqrt(r)):")
        lines += ["  " + "  ".join(f"{v:.6g}" for v in row) for row in facts["coefficients"]]
        lines.append(f"spectral radius: {facts['spectral_radius']:.12g}")
    else:
        lines.append("gains:")
        lines += ["  " + " | ".join(row) for row in facts["gains"]]
    lines.append(f"irreducible: {facts['irreducible']}")
    path = facts["omega_path"]
    lines.append(f"omega path ({path['provenance']}): "
                 + ", ".join(f"{c:.6g}*r^{p:g}" for c, p in path["sigma"]))
    if path["s_star"] is not None:
        lines.append("s*: " + ", ".join(f"{v:.6g}" for v in path["s_star"]))
    if "budgets" in facts:
        lines.append("row budgets: " + ", ".join(f"{v:.6g}" for v in facts["budgets"]))
    fmt = lambda terms: "max(" + ", ".join(f"{c:.6g}*r^{p:g}" for c, p in terms) + ")" if len(terms) > 1 else \
        (f"{terms[0][0]:.6g}*r^{terms[0][1]:g}" if terms else "0")
    lines.append("phi:")
    lines += ["  " + " | ".join("0" if g is None else fmt(g) for g in row) for row in facts["phi"]]
    th = facts["thresholds"]
    for i in range(len(th["chi"])):
        lines.append(f"subsystem {i + 1}: chi = {fmt(th['chi'][i])}, eta_hat = {fmt(th['eta_hat'][i])}, "
                     f"psi = {fmt(th['psi'][i])}")
    g = facts["grid"]
    lines.append(f"path verification on {g['points']} grid points: {'pass' if g['verdict'] else 'FAIL'} "
                 f"(worst relative margin {g['margin']:.6g})")
    return "\n".join(lines)


def _practical_c(args, ov: ConfigOverrides, n: int):
    if getattr(args, "practical_c", None) is not None:
        return [args.practical_c] * n
    return list(ov.practical_c) if ov.practical_c is not None else None


def cmd_analyze(args) -> int:
    plant, ov = parse_config(args.config)
    try:
        _, facts = build_design(plant, ov, _practical_c(args, ov, plant.n))
    except SmallGainFailure as exc:
        print(f"small-gain failure: {exc}", file=sys.stderr)
        if args.json:
            Path(args.json).write_text(json.dumps({"small_gain": {"verdict": False, "detail": str(exc)}}, indent=1))
        return EXIT_SMALL_GAIN
    print(format_report(facts))
    if args.json:
        Path(args.json).write_text(json.dumps(facts, indent=1) + "\n")
    return EXIT_OK


def _initial_state(plant, ov: ConfigOverrides, seed: int | None):
    if ov.x0 is not None:
        return ov.x0
    if isinstance(plant, NonlinearPlant):
        return NONLINEAR_X0
    return tuple(random_initial_state(plant, 0 if seed is None else seed))


def _period(args) -> float | None:
    if args.samples:
        return args.t_end / args.samples
    return args.period


def _sim_config(args, scheme: str, x0, period) -> SimConfig:
    return SimConfig(args.t_end, args.dt, scheme, x0=tuple(x0), xhat0=args.xhat0, period=period,
                     record_every=args.record_every, level=args.level)


def plot_svg(path, trace) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = trace.n
    fig, (ax, raster) = plt.subplots(2, 1, sharex=True, figsize=(8, 5), gridspec_kw={"height_ratios": [3, 1]})
    for i in range(n):
        norms = np.linalg.norm(trace.block(trace.x, i), axis=1)
        ax.semilogy(trace.t, np.maximum(norms, 1e-300), label=f"|x_{i + 1}|")
    ax.set_ylabel("state norm")
    ax.legend(loc="upper right")
    ev = trace.events
    for i in range(n):
        times = ev.time[ev.subsystem == i]
        raster.vlines(times, i + 0.6, i + 1.4)
    raster.set_yticks(range(1, n + 1))
    raster.set_ylabel("events")
    raster.set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_simulate(args) -> int:
    plant, ov = parse_config(args.config)
    scheme = args.scheme
    period = _period(args)
    try:
        design, _ = build_design(plant, ov, _practical_c(args, ov, plant.n))
    except SmallGainFailure as exc:
        if not (args.force and scheme in ("periodic", "roundrobin")):
            print(f"small-gain failure: {exc}", file=sys.stderr)
            return EXIT_SMALL_GAIN
        design = _baseline_design(plant)
    x0 = _initial_state(plant, ov, args.seed)
    try:
        cfg = _sim_config(args, scheme, x0, period)
        trace, zeno, metrics = run_simulation(plant, design, cfg, backend=args.backend)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out / "trace.csv", trace)
    doc = metrics.to_dict()
    doc["scheme"] = scheme
    doc["zeno"] = {"verdict": zeno.verdict, "reasons": list(zeno.reasons)}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1) + "\n")
    if args.svg:
        plot_svg(out / "trace.svg", trace)
    print(f"{scheme}: {metrics.total} broadcasts {list(metrics.counts)}, |x(t_end)| = {metrics.final_norm:.6g}, "
          f"zeno {zeno.verdict}")
    return EXIT_DIVERGENCE if metrics.diverged else EXIT_OK


COMPARE_FIELDS = ("scheme", "events", "final_norm", "time_to_level", "min_gap", "zeno")


def _compare_row(scheme, metrics, zeno) -> dict:
    gaps = [g for g in metrics.min_gap if g is not None]
    return {
        "scheme": scheme,
        "events": metrics.total,
        "final_norm": metrics.final_norm,
        "time_to_level": "" if metrics.time_to_level is None else metrics.time_to_level,
        "min_gap": min(gaps) if gaps else "",
        "zeno": zeno.verdict,
    }


def compare_schemes(plant, design, x0, args) -> list[dict]:
    period = _period(args)
    schemes = ["basic"]
    if np.all(design.thresholds.c > 0):
        schemes.append("practical")
    if design.theta is not None:
        schemes.append("parsimonious")
    rows = []
    for scheme in schemes:
        trace, zeno, metrics = run_simulation(plant, design, _sim_config(args, scheme, x0, None), args.backend)
        rows.append(_compare_row(scheme, metrics, zeno))
    if period:
        for scheme in ("periodic", "roundrobin"):
            trace, zeno, metrics = run_simulation(plant, design, _sim_config(args, scheme, x0, period), args.backend)
            rows.append(_compare_row(scheme, metrics, zeno))
    return rows


def _batch_job(job) -> dict:
    seed, args = job
    plant = generate_random_system(args.n, args.dim, seed, args.bound)
    design, _ = build_design(plant, None, None if args.practical_c is None else [args.practical_c] * plant.n)
    x0 = random_initial_state(plant, seed)
    rows = {r["scheme"]: r for r in compare_schemes(plant, design, x0, args)}
    return {"seed": seed, **{f"{s}_events": r["events"] for s, r in rows.items()},
            **{f"{s}_final_norm": r["final_norm"] for s, r in rows.items()}}


def _write_csv(path, rows, fields):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if path:
            fh.close()


def cmd_compare(args) -> int:
    if args.generate_seeds:
        if not _period(args):
            print("error: batch mode needs --period or --samples", file=sys.stderr)
            return EXIT_VALIDATION
        jobs = [(s, args) for s in range(args.generate_seeds)]
        workers = args.jobs or min(len(jobs), os.cpu_count() or 1)
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                rows = list(pool.map(_batch_job, jobs))
        else:
            rows = [_batch_job(j) for j in jobs]
        fields = list(rows[0].keys())
        _write_csv(args.out, rows, fields)
        ratio = np.array([r["basic_events"] / r["roundrobin_events"] for r in rows])
        q = np.quantile(ratio, [0.0, 0.25, 0.5, 0.75, 1.0])
        print("event-count ratio basic/roundrobin quantiles (0, .25, .5, .75, 1): "
              + ", ".join(f"{v:.4g}" for v in q), file=sys.stderr)
        print(f"seeds below the baseline count: {int(np.sum(ratio < 1))}/{len(ratio)}", file=sys.stderr)
        return EXIT_OK
    if not args.config:
        print("error: compare needs a config file or --generate-seeds", file=sys.stderr)
        return EXIT_VALIDATION
    plant, ov = parse_config(args.config)
    try:
        design, _ = build_design(plant, ov, _practical_c(args, ov, plant.n))
    except SmallGainFailure as exc:
        print(f"small-gain failure: {exc}", file=sys.stderr)
        return EXIT_SMALL_GAIN
    rows = compare_schemes(plant, design, _initial_state(plant, ov, args.seed), args)
    _write_csv(args.out, rows, COMPARE_FIELDS)
    return EXIT_OK


def cmd_generate(args) -> int:
    time_scale = args.time_scale if args.time_scale == "auto" else float(args.time_scale)
    try:
        plant = generate_random_system(args.n, args.dim, args.seed, args.bound, dense_k=args.dense_k,
                                       time_scale=time_scale, max_attempts=args.max_attempts)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SMALL_GAIN if "no small-gain instance" in str(exc) else EXIT_VALIDATION
    x0 = tuple(random_initial_state(plant, args.seed))
    write_config(args.out, plant, ConfigOverrides(x0=x0))
    print(f"wrote {args.out}: spectral radius {plant.meta['spectral_radius']:.6g} after "
          f"{plant.meta['attempts']} attempt(s)")
    return EXIT_OK


def _positive_float(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _add_run_flags(p: argparse.ArgumentParser, t_end: float | None = None) -> None:
    p.add_argument("--t-end", type=_positive_float, required=t_end is None, default=t_end)
    p.add_argument("--dt", type=_positive_float, default=1e-3)
    p.add_argument("--seed", type=int, default=None, help="seed for the random initial state (linear plants)")
    timing = p.add_mutually_exclusive_group()
    timing.add_argument("--period", type=_positive_float, help="sampling period of the baselines")
    timing.add_argument("--samples", type=int, help="baseline samples over the horizon (period = t_end/samples)")
    p.add_argument("--xhat0", choices=("copy", "zero"), default="copy")
    p.add_argument("--practical-c", type=_positive_float, default=None)
    p.add_argument("--level", type=_positive_float, default=None, help="norm level for time-to-level")
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--backend", choices=("numba", "numpy"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trignet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="certify the small-gain condition and print thresholds")
    p.add_argument("config")
    p.add_argument("--json", help="also write the report as JSON to this path")
    p.add_argument("--practical-c", type=_positive_float, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="simulate one scheme and write trace.csv and metrics.json")
    p.add_argument("config")
    p.add_argument("--scheme", choices=SCHEMES, default="basic")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--svg", action="store_true", help="also write trace.svg")
    p.add_argument("--force", action="store_true", help="run baselines even when the certificate fails")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run every scheme on one horizon and tabulate the results")
    p.add_argument("config", nargs="?")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.add_argument("--generate-seeds", type=int, default=0, help="batch mode over generated seeds 0..N-1")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--bound", type=_positive_float, default=5.0)
    p.add_argument("--jobs", type=int, default=0)
    _add_run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("generate", help="draw a certified random linear interconnection")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bound", type=_positive_float, default=5.0)
    p.add_argument("--out", required=True)
    p.add_argument("--time-scale", default="auto", help="'auto' or a positive factor applied to A and B")
    p.add_argument("--dense-k", action="store_true", help="add small random off-diagonal feedback blocks")
    p.add_argument("--max-attempts", type=int, default=100_000)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
