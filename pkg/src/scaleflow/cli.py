"""Configuration-driven experiment runner.

Verbs: ``run <config.json>`` executes the configured pipeline into a
self-describing artifact directory; ``compare <a> <b>`` joins two moment
tables and z-scores them; ``kernel-check <config.json>`` prints the kernel
identity residuals.  Exit codes: 0 success, 2 validation error, 3
numerical failure (blow-up or non-convergence), 1 failed comparison.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, Experiment, load_config
from .effective import EffectivePotentialEstimator, EstimatorUnderflow, exact_drift_simulate
from .fbsde import picard_solve, sample_terminal
from .io import RESULT_COLUMNS, moment_rows, read_csv, write_csv, write_manifest
from .kernels import sample_xq
from .lattice import ValidationError, fourier
from .oracles import GibbsTarget, OracleError, batch_mean_stderr, pcn_mcmc, tensor_quadrature
from .sde import SimulationBlowUp, simulate, zero_drift
from .control import feature_test_policies, optimize_policy, psi_objective, weak_residual


class NumericalFailure(RuntimeError):
    pass


def _rows_forward(exp: Experiment) -> tuple:
    qfam = exp.qfam
    T = int(exp.config["solver"].get("trajectories", 4096))
    traj = simulate(zero_drift(), qfam, exp.stream(1), n_traj=T, record="terminal")
    fh = fourier(exp.lattice, traj.terminal)
    power = np.abs(fh.reshape(T, -1)) ** 2 / exp.lattice.volume
    target = qfam.levels[-1].reshape(-1)
    rows = []
    for k in range(exp.lattice.nsites):
        rows.append({
            "kind": "mode_var", "x": k, "y": k,
            "value": power[:, k].mean(),
            "stderr": power[:, k].std(ddof=1) / np.sqrt(T),
            "target": target[k],
        })
    rows += moment_rows(traj.terminal, exp.lattice, kinds=("mean", "pair"))
    diag = {"n_traj": T, "method": "forward"}
    return rows, diag


def _rows_exact_drift(exp: Experiment) -> tuple:
    s = exp.config["solver"]
    T = int(s.get("trajectories", 2048))
    budget = int(s.get("budget", 1024))
    est = EffectivePotentialEstimator(exp.qfam, exp.potential, budget=budget, rng=exp.stream(2))
    traj = exact_drift_simulate(est, exp.qfam, exp.stream(3), n_traj=T, record="terminal")
    psi_inf = sample_terminal(exp.qfam, traj.terminal, exp.stream(4))
    rows = moment_rows(psi_inf, exp.lattice)
    return rows, {"n_traj": T, "budget": budget, "method": "exact-drift"}


def _rows_fbsde(exp: Experiment) -> tuple:
    s = exp.config["solver"]
    T = int(s.get("trajectories", 4096))
    state, terminal = picard_solve(
        exp.potential, exp.qfam, exp.basis, n_traj=T, rng=exp.stream(5),
        tol=float(s.get("tolerance", 5e-2)),
        max_iter=int(s.get("max_iterations", 12)),
        damping=float(s.get("damping", 0.5)),
    )
    if not state.converged:
        raise NumericalFailure(
            f"picard iteration not converged: history {state.change_history}"
        )
    rows = moment_rows(terminal, exp.lattice)
    diag = {
        "method": "fbsde", "n_traj": T,
        "iterations": state.n_iterations,
        "change_history": state.change_history,
        "converged": state.converged,
    }
    return rows, diag


def _rows_variational(exp: Experiment) -> tuple:
    s = exp.config["solver"]
    pol, trace = optimize_policy(
        exp.potential, exp.qfam, exp.basis, exp.stream(6),
        n_iterations=int(s.get("iterations", 200)),
        minibatch=int(s.get("minibatch", 128)),
        learning_rate=float(s.get("learning_rate", 0.05)),
    )
    T = int(s.get("trajectories", 8192))
    obj = psi_objective(pol, exp.potential, exp.qfam, T, exp.stream(7))
    X = sample_xq(exp.qfam, np.inf, exp.stream(8), size=4 * T)
    e = -np.asarray(exp.potential.value(X))
    m = e.max()
    ref = -(m + np.log(np.exp(e - m).mean()))
    ref_se = np.exp(e - m).std(ddof=1) / np.sqrt(e.size) / np.exp(e - m).mean()
    rows = [
        {"kind": "objective", "x": 0, "y": 0, "value": obj.value, "stderr": obj.stderr,
         "target": ref},
        {"kind": "log_partition", "x": 0, "y": 0, "value": ref, "stderr": ref_se, "target": ""},
    ]
    for i, tp in enumerate(feature_test_policies(exp.qfam, exp.basis, amplitude=0.5)[:4]):
        wr = weak_residual(pol, exp.potential, exp.qfam, tp, 2048, exp.stream(9))
        rows.append({"kind": "weak_residual", "x": i, "y": 0, "value": wr.value,
                     "stderr": wr.stderr, "target": 0.0})
    diag = {"method": "variational", "diverged": trace.diverged,
            "eval_points": trace.eval_points}
    return rows, diag


def _rows_oracle(exp: Experiment) -> tuple:
    s = exp.config["solver"]
    target = GibbsTarget(exp.qfam, exp.potential)
    if exp.lattice.nsites <= 3:
        table = tensor_quadrature(target, nodes=int(s.get("budget", 64)))
        rows = [dict(r, stderr=0.0, target="") for r in table.row_dicts()]
        return rows, {"method": "oracle-quadrature", "nodes": table.nodes}
    result = pcn_mcmc(
        target, n_steps=int(s.get("chain_steps", 20000)),
        beta=float(s.get("beta", 0.5)), rng=exp.stream(10),
        n_chains=int(s.get("chains", 4)),
    )
    flat = result.flat()
    n = exp.lattice.nsites
    series = flat.reshape(flat.shape[0], n)
    rows = []
    for x in range(n):
        rows.append({"kind": "mean", "x": x, "y": x, "value": series[:, x].mean(),
                     "stderr": batch_mean_stderr(series[:, x]), "target": ""})
    for x in range(n):
        for y in range(x, n):
            prod = series[:, x] * series[:, y]
            rows.append({"kind": "pair", "x": x, "y": y, "value": prod.mean(),
                         "stderr": batch_mean_stderr(prod), "target": ""})
    for x in range(n):
        q = series[:, x] ** 4
        rows.append({"kind": "fourth", "x": x, "y": x, "value": q.mean(),
                     "stderr": batch_mean_stderr(q), "target": ""})
    diag = {
        "method": "oracle-pcn",
        "acceptance_rate": result.diagnostics.acceptance_rate,
        "iact_max": result.diagnostics.iact_max,
        "gelman_rubin_max": float(result.diagnostics.gelman_rubin.max()),
    }
    return rows, diag


def _rows_germ(exp: Experiment) -> tuple:
    from .effective import linear_exact_drift
    from .lattice import multiplier_from_values
    from . import observables as obs

    b = float(exp.config["potential"].get("b", 0.5))
    B = multiplier_from_values(exp.lattice, b)
    drift = linear_exact_drift(exp.qfam, B)
    g = np.zeros(exp.lattice.shape)
    g[(0,) * exp.lattice.d] = 1.0
    germ = obs.linear_germ(exp.lattice, g, name="plain-linear")
    germ.tail_bound = lambda fam: 0.0
    s = exp.config["solver"]
    j = exp.grid.n_steps // 3
    phi_b = sample_xq(exp.qfam, exp.grid.scales[j], exp.stream(11))
    rem = obs.remainder_estimate(germ, drift, exp.qfam, j, phi_b,
                                 budget=int(s.get("budget", 512)), rng=exp.stream(12))
    qt = exp.qfam.tails[j]
    closed = exp.lattice.cell * ((multiplier_from_values(exp.lattice, 1.0 / (1 + b * qt)).apply(phi_b)
                                  - phi_b) * g).sum()
    rows = [{"kind": "remainder", "x": j, "y": 0, "value": rem.value, "stderr": rem.stderr,
             "target": closed}]
    return rows, {"method": "germ", "tail_bound": rem.tail_bound}


def _rows_gauge(exp: Experiment) -> tuple:
    from . import gauge

    s = exp.config["solver"]
    grp = gauge.LieGroup(s.get("group", "su2"))
    rng = exp.stream(13)
    phi = gauge.random_connection(grp, exp.lattice, rng.child(1), amplitude=float(s.get("amplitude", 0.3)))
    gtr = gauge.random_gauge_transform(grp, exp.lattice, rng.child(2))
    j = max(1, exp.grid.n_steps // 2)
    omega = gauge.random_form(grp, exp.lattice, rng.child(3))
    table = gauge.HolonomyTable(phi)
    lhs = gauge.transform_form(grp, gauge.covariant_averaging(phi, omega, exp.cfam, j, table), gtr)
    rhs = gauge.covariant_averaging(gauge.transform_links(phi, gtr),
                                    gauge.transform_form(grp, omega, gtr), exp.cfam, j)
    cov_res = float(np.abs(lhs - rhs).max())
    w1 = gauge.random_form(grp, exp.lattice, rng.child(4))
    w2 = gauge.random_form(grp, exp.lattice, rng.child(5))
    sym = abs(gauge.form_inner(exp.lattice, w1, gauge.covariant_averaging_sqrt(phi, w2, exp.cfam, j, table))
              - gauge.form_inner(exp.lattice, gauge.covariant_averaging_sqrt(phi, w1, exp.cfam, j, table), w2))
    coords = exp.lattice.coordinates()
    h = np.stack([0.4 * np.sin(2 * np.pi * coords[0] / exp.lattice.length)] * grp.algebra_dim, axis=-1)
    report = gauge.gauged_step_consistency(
        phi, gauge.field_strength_force, h, exp.cfam, j,
        da_values=[0.08, 0.04, 0.02], rng=rng.child(6), n_noise=4,
    )
    rows = [
        {"kind": "covariance_residual", "x": 0, "y": 0, "value": cov_res, "stderr": 0.0, "target": 0.0},
        {"kind": "symmetry_residual", "x": 0, "y": 0, "value": sym, "stderr": 0.0, "target": 0.0},
        {"kind": "richardson_slope", "x": 0, "y": 0, "value": report.slope, "stderr": 0.0, "target": 1.5},
    ]
    return rows, {"method": "gauge-check", "residuals": report.residuals}


_RUNNERS = {
    "forward": _rows_forward,
    "exact-drift": _rows_exact_drift,
    "fbsde": _rows_fbsde,
    "variational": _rows_variational,
    "oracle": _rows_oracle,
    "germ": _rows_germ,
    "gauge-check": _rows_gauge,
}


def run_experiment(config_path, out_root=None) -> Path:
    config = load_config(config_path)
    exp = Experiment(config)
    method = config["solver"]["method"]
    out_root = Path(out_root or os.environ.get("SCALEFLOW_OUT", "runs"))
    stem = Path(config_path).stem
    from .kernels import descriptor_hash

    tag = descriptor_hash({"config": config})
    out_dir = out_root / f"{stem}-{tag}"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, diag = _RUNNERS[method](exp)
    results = write_csv(out_dir / "results.csv", RESULT_COLUMNS, rows)
    diag_path = out_dir / "diagnostics.json"
    diag_path.write_text(json.dumps(diag, sort_keys=True, indent=1, default=float) + "\n",
                         encoding="utf-8")
    write_manifest(out_dir / "manifest.json", config,
                   {"results.csv": results, "diagnostics.json": str(diag_path)})
    return out_dir


def compare_runs(dir_a, dir_b, z_max: float = 3.0):
    """Join two moment tables on (kind, x, y) and z-score the differences."""
    man_a = json.loads((Path(dir_a) / "manifest.json").read_text())
    man_b = json.loads((Path(dir_b) / "manifest.json").read_text())
    lat_a = man_a["config"]["lattice"]
    lat_b = man_b["config"]["lattice"]
    if lat_a != lat_b:
        raise ConfigError(f"lattice mismatch: {lat_a} vs {lat_b}")
    cols_a, rows_a = read_csv(Path(dir_a) / "results.csv")
    cols_b, rows_b = read_csv(Path(dir_b) / "results.csv")
    for cols, name in ((cols_a, dir_a), (cols_b, dir_b)):
        if not {"kind", "x", "y", "value", "stderr"} <= set(cols):
            raise ConfigError(f"{name}: results.csv missing required columns")
    index_b = {(r["kind"], r["x"], r["y"]): r for r in rows_b}
    report = []
    for r in rows_a:
        key = (r["kind"], r["x"], r["y"])
        if key not in index_b:
            continue
        rb = index_b[key]
        va, vb = float(r["value"]), float(rb["value"])
        sa = float(r["stderr"] or 0.0)
        sb = float(rb["stderr"] or 0.0)
        denom = np.sqrt(sa * sa + sb * sb)
        z = (va - vb) / denom if denom > 0 else (0.0 if va == vb else np.inf)
        report.append({
            "kind": r["kind"], "x": r["x"], "y": r["y"],
            "value": va, "stderr": sa, "target": vb,
            "z": z, "status": "pass" if abs(z) <= z_max else "fail",
        })
    return report


def kernel_check(config_path) -> dict:
    """Kernel identity residuals for the configured families."""
    config = load_config(config_path)
    exp = Experiment(config)
    qfam, cfam = exp.qfam, exp.cfam
    ahat = qfam.a_symbol.coeffs
    alpha = qfam.alpha
    total = qfam.total_covariance()
    integral_res = float(np.abs(qfam.levels + qfam.tails - total).max())
    inverse_res = 0.0
    for j in range(qfam.grid.n_steps + 1):
        ct = 1.0 - cfam.levels[j]
        mask = ct > 0
        lhs = 1.0 / qfam.tails[j][mask] - (1.0 / alpha) / ct[mask]
        inverse_res = max(inverse_res, float(np.abs(lhs - ahat[mask]).max()))
    sqrt_res = 0.0
    for j in range(0, qfam.grid.n_steps + 1, max(1, qfam.grid.n_steps // 16)):
        sq = cfam.rate_sqrt(j).coeffs ** 2 - np.maximum(cfam.rates[j], 0.0)
        sqrt_res = max(sqrt_res, float(np.abs(sq).max()))
    return {
        "inverse_identity": inverse_res,
        "integral_plus_tail": integral_res,
        "sqrt_squared": sqrt_res,
        "rate_clip": cfam.rate_clip,
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scaleflow",
                                     description="lattice scale-flow experiment runner")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="execute a configured pipeline")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output root (default $SCALEFLOW_OUT or ./runs)")
    p_cmp = sub.add_parser("compare", help="z-score two result tables")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--z-max", type=float, default=3.0)
    p_chk = sub.add_parser("kernel-check", help="print kernel identity residuals")
    p_chk.add_argument("config")
    args = parser.parse_args(argv)
    try:
        if args.verb == "run":
            out = run_experiment(args.config, args.out)
            print(out)
            return 0
        if args.verb == "compare":
            report = compare_runs(args.dir_a, args.dir_b, args.z_max)
            n_fail = sum(1 for r in report if r["status"] == "fail")
            for r in report:
                print(f"{r['kind']},{r['x']},{r['y']}: z={r['z']:+.3f} {r['status']}")
            print(f"{len(report) - n_fail}/{len(report)} rows pass (|z| <= {args.z_max})")
            return 0 if n_fail == 0 else 1
        if args.verb == "kernel-check":
            res = kernel_check(args.config)
            for k, v in res.items():
                print(f"{k}: {v:.3e}")
            return 0
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationBlowUp, NumericalFailure, OracleError, EstimatorUnderflow) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
