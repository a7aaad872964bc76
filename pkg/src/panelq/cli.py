"""Command-line interface: ``panelq fit``, ``panelq simulate`` and ``panelq plotdata``.

Every failure prints one line ``panelq: error[CODE] message`` on stderr and
exits nonzero (2 for usage and configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .inference import CovarianceError, sandwich_covariance
from .io import (SCHEMA_VERSION, FitReport, PanelCsvError, flatten, parse_panel_csv,
                 to_json_text, write_rows_csv)
from .montecarlo import (K_BUCKETS, SimConfig, constant_sweep, resolve_workers,
                         run_cell, write_audit_csv)
from .panel import PanelData, total_check_loss, validate_tau
from .path import LambdaGrid, fuse_tolerance, run_lambda_path
from .selection import (BANDWIDTH_RULES, DEFAULT_PNT_CONSTANT, SelectionError,
                        ic_constants, select_by_ic)
from .solver import solve_fe

USAGE_EXIT = 2
FAILURE_EXIT = 1


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = FAILURE_EXIT):
        self.code = code
        self.status = status
        super().__init__(message)


# -- fit ------------------------------------------------------------------------

@dataclass(frozen=True)
class FitRequest:
    input: str
    taus: tuple = (0.5,)
    grid: LambdaGrid = None
    fuse_tol: float = None
    pnt_constant: float = DEFAULT_PNT_CONSTANT
    bandwidth_rule: str = "hall-sheather"
    level: float = 0.95
    output: str = None
    format: str = "json"
    workers: int = None

    def __post_init__(self):
        for tau in self.taus:
            validate_tau(tau)
        if self.grid is None:
            object.__setattr__(self, "grid", LambdaGrid.parse("0:0.35:0.005"))
        if self.fuse_tol is not None and not self.fuse_tol > 0:
            raise ValueError("fuse_tol must be positive")
        if not self.pnt_constant > 0:
            raise ValueError("pnt_constant must be positive")
        if self.bandwidth_rule not in BANDWIDTH_RULES:
            raise ValueError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
        if self.format not in ("json", "csv"):
            raise ValueError("format must be json or csv")


def _floats(values):
    return [float(v) for v in np.asarray(values, dtype=float).reshape(-1)]


def fit_block(data: PanelData, tau: float, request: FitRequest) -> dict:
    """Full estimation at one quantile level, as a JSON-ready dict."""
    block = {"tau": float(tau)}
    fe = solve_fe(data, tau)
    block["fixed_effects"] = {
        "alpha": _floats(fe.alpha), "beta": _floats(fe.beta),
        "objective": float(fe.objective), "iterations": int(fe.iterations),
        "status": fe.status,
    }
    if not fe.converged:
        block.update(status="error", error=f"fixed-effects fit ended with status {fe.status}")
        return block
    fuse_tol = request.fuse_tol or fuse_tolerance(fe.alpha)
    path = run_lambda_path(data, tau, request.grid, fe, fuse_tol=fuse_tol)
    block["path"] = [
        {"lambda": e.lam, "k": e.k,
         "loss": total_check_loss(data, tau, e.alpha, e.beta),
         "status": e.report.status, "iterations": e.report.iterations}
        for e in path]
    consts = ic_constants(data, tau, fe, request.pnt_constant)
    try:
        sel = select_by_ic(path, data, tau, fe, constants=consts)
    except SelectionError as exc:
        block.update(status="error", error=str(exc))
        return block
    block["ic"] = [{"k": e.k, "lambda": e.lam, "ic": e.ic_value,
                    "refit_objective": e.refit.objective} for e in sel.entries]
    best = sel.best
    block["selected_k"] = sel.k
    block["membership"] = [int(g) for g in sel.grouping.membership]
    block["centers"] = _floats(best.refit.centers)

    estimates = np.r_[best.refit.centers, best.refit.beta]
    names = [f"group{g}" for g in range(sel.k)] + list(data.covariate_names)
    kinds = ["alpha"] * sel.k + ["beta"] * data.p
    try:
        cov = sandwich_covariance(data, tau, sel.grouping, best.refit,
                                  rule=request.bandwidth_rule)
        se = cov.std_errors
        ci = cov.intervals(estimates, request.level)
        cov_h = cov.bandwidth
    except CovarianceError as exc:
        se = np.full(estimates.size, math.nan)
        ci = np.full((estimates.size, 2), math.nan)
        cov_h = None
        block["covariance_error"] = str(exc)
    block["coefficients"] = [
        {"name": name, "block": kind, "estimate": float(est),
         "std_error": None if math.isnan(s) else float(s),
         "ci_lo": None if math.isnan(lo) else float(lo),
         "ci_hi": None if math.isnan(hi) else float(hi)}
        for name, kind, est, s, (lo, hi) in zip(names, kinds, estimates, se, ci)]
    block["diagnostics"] = {
        "c_hat": consts.c_hat, "p_nt": consts.p_nt, "s_hat": consts.s_hat,
        "bandwidth": consts.bandwidth, "covariance_bandwidth": cov_h,
        "fuse_tol": fuse_tol, "fe_iterations": int(fe.iterations),
        "path_failures": path.n_failed,
        "path_max_iterations": max(e.report.iterations for e in path),
    }
    block["status"] = "ok"
    return block


def _fit_task(args):
    data, tau, request = args
    return fit_block(data, tau, request)


def cmd_fit(request: FitRequest) -> FitReport:
    """Estimate every requested quantile level and write the report."""
    data = _load_panel(request.input)
    tasks = [(data, tau, request) for tau in request.taus]
    workers = min(resolve_workers(request.workers), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(_fit_task, tasks))
    else:
        blocks = [_fit_task(t) for t in tasks]
    meta = {
        "input": str(request.input),
        "n": data.n, "n_obs": data.n_obs, "p": data.p,
        "individuals": [str(v) for v in data.labels],
        "covariates": list(data.covariate_names),
        "settings": {
            "grid": request.grid.values.tolist(), "fuse_tol": request.fuse_tol,
            "pnt_constant": request.pnt_constant, "bandwidth_rule": request.bandwidth_rule,
            "level": request.level,
        },
    }
    report = FitReport(meta=meta, blocks=tuple(blocks))
    if request.format == "json":
        _write_text(request.output, report.to_json())
    else:
        _write_csv(request.output, ("tau", "section", "index", "value"), report.csv_rows())
    return report


def _load_panel(path) -> PanelData:
    try:
        return parse_panel_csv(path)
    except PanelCsvError as exc:
        raise CliError(exc.code, f"{path}: {exc}") from None
    except OSError as exc:
        raise CliError("E_INPUT", f"cannot read {path}: {exc.strerror or exc}") from None


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError("E_OUTPUT", f"cannot write {path}: {exc.strerror or exc}") from None


def _write_csv(path, header, rows):
    try:
        write_rows_csv(sys.stdout if path in (None, "-") else path, header, rows)
    except OSError as exc:
        raise CliError("E_OUTPUT", f"cannot write {path}: {exc.strerror or exc}") from None


# -- simulate ---------------------------------------------------------------------

TABLE_CELL = re.compile(r"^T([1-6])-n(\d+)-T(\d+)$")

TABLE_COLUMNS = {
    "groups": ["n", "T"] + [f"{err}:K={b}" for err in ("normal", "t3") for b in K_BUCKETS],
    "slopes": ["n", "T"] + [f"{err}:{est}:{m}" for err in ("normal", "t3")
                            for est in ("grouped", "fe") for m in ("bias", "rmse", "coverage")],
    "membership": ["n", "T"] + [f"{err}:{m}" for err in ("normal", "t3")
                                for m in ("perfect_match", "avg_match", "match_sd")],
}


def table_layout(table: int) -> tuple:
    """``(layout, tau)`` of simulation tables 1-6: pairs of tables share a layout."""
    layout = ("groups", "slopes", "membership")[(table - 1) // 2]
    return layout, 0.5 if table % 2 else 0.75


def table_row(layout: str, n: int, t: int, reports: dict) -> list:
    row = [n, t]
    for err in ("normal", "t3"):
        r = reports[err]
        if layout == "groups":
            row += [r.k_frequency[b] for b in K_BUCKETS]
        elif layout == "slopes":
            row += [r.beta_bias, r.beta_rmse, r.coverage,
                    r.fe_beta_bias, r.fe_beta_rmse, r.fe_coverage]
        else:
            row += [r.perfect_match, r.avg_match, r.match_sd]
    return [None if isinstance(v, float) and math.isnan(v) else v for v in row]


def parse_constants(text: str) -> list:
    """Sweep constants from ``a:b:step`` or a comma-separated list."""
    grid = LambdaGrid.parse(text)
    values = [float(v) for v in grid.values]
    if any(v <= 0 for v in values):
        raise ValueError("sweep constants must be positive")
    return values


def cmd_simulate(config: SimConfig, output=None, fmt="json", audit_csv=None,
                 sweep=None, table_cell=None, workers=None) -> dict:
    """Run a simulation cell, a constant sweep or a table-row preset and write it."""
    if table_cell is not None:
        m = TABLE_CELL.match(table_cell)
        if not m:
            raise CliError("E_USAGE", f"table cell must look like T1-n30-T60, got {table_cell!r}",
                           USAGE_EXIT)
        table, n, t = (int(g) for g in m.groups())
        layout, tau = table_layout(table)
        reports = {err: run_cell(replace(config, n=n, t=t, tau=tau, error=err), workers)
                   for err in ("normal", "t3")}
        out = {"schema": SCHEMA_VERSION, "kind": "paper-cell", "table": table,
               "layout": layout, "columns": TABLE_COLUMNS[layout],
               "row": table_row(layout, n, t, reports),
               "reports": {err: r.to_dict(include_records=False) for err, r in reports.items()}}
        if audit_csv:
            for err, r in reports.items():
                write_audit_csv(r, _suffixed(audit_csv, err))
    elif sweep is not None:
        reports = constant_sweep(config, sweep, workers)
        out = {"schema": SCHEMA_VERSION, "kind": "sweep", "constants": list(reports),
               "reports": [r.to_dict(include_records=False) for r in reports.values()]}
        if audit_csv:
            for c, r in reports.items():
                write_audit_csv(r, _suffixed(audit_csv, f"c{c:g}"))
    else:
        report = run_cell(config, workers)
        out = {"schema": SCHEMA_VERSION, "kind": "simulate", "report": report.to_dict()}
        if audit_csv:
            write_audit_csv(report, audit_csv)
    if fmt == "json":
        _write_text(output, to_json_text(out))
    else:
        _write_csv(output, ("section", "index", "value"), flatten(out))
    return out


def _suffixed(path: str, tag: str) -> str:
    stem, dot, ext = path.rpartition(".")
    return f"{stem}-{tag}.{ext}" if dot else f"{path}-{tag}"


# -- plotdata ---------------------------------------------------------------------

PLOT_COLUMNS = ("series", "x", "y", "lo", "hi")


def _fit_series(obj):
    blocks = sorted((b for b in obj["blocks"] if b.get("status") == "ok"),
                    key=lambda b: b["tau"])
    names = []
    for b in blocks:
        for c in b["coefficients"]:
            if c["block"] == "beta" and c["name"] not in names:
                names.append(c["name"])
    for name in names:
        for b in blocks:
            for c in b["coefficients"]:
                if c["block"] == "beta" and c["name"] == name:
                    yield f"beta:{name}", b["tau"], c["estimate"], c["ci_lo"], c["ci_hi"]
    for b in blocks:
        alpha = np.asarray(b["fixed_effects"]["alpha"])
        grouped = np.asarray(b["centers"])[b["membership"]]
        order = np.argsort(alpha, kind="stable")
        tag = f"tau={b['tau']!r}"
        for rank, i in enumerate(order, start=1):
            yield f"alpha_fe:{tag}", rank, float(alpha[i]), None, None
        for rank, i in enumerate(order, start=1):
            yield f"alpha_group:{tag}", rank, float(grouped[i]), None, None


def _band(value, se):
    if value is None or se is None:
        return None, None
    return value - 1.96 * se, value + 1.96 * se


def _sim_series(report, prefix=""):
    for j, b in enumerate(K_BUCKETS, start=1):
        p, se = report["k_frequency"][b], report["k_frequency_se"][b]
        yield (f"{prefix}k_frequency", j, p, *_band(p, se))
    for name in ("beta_bias", "beta_rmse", "coverage", "perfect_match", "avg_match"):
        v = report[name]
        yield (f"{prefix}{name}", 0, v, *_band(v, report[f"{name}_se"]))


def _sweep_series(obj):
    for name, key in (("k3_frequency", None), ("beta_rmse", "beta_rmse"),
                      ("coverage", "coverage")):
        for c, r in zip(obj["constants"], obj["reports"]):
            if key is None:
                v, se = r["k_frequency"]["3"], r["k_frequency_se"]["3"]
            else:
                v, se = r[key], r[f"{key}_se"]
            yield (f"sweep:{name}", c, v, *_band(v, se))


def plot_series(obj: dict) -> list:
    """Long-format rows ``(series, x, y, lo, hi)`` for a report of any kind."""
    if not isinstance(obj, dict) or obj.get("schema") != SCHEMA_VERSION:
        raise CliError("E_SCHEMA", "input is not a schema-1 panelq report")
    kind = obj.get("kind")
    if kind == "fit":
        return list(_fit_series(obj))
    if kind == "simulate":
        return list(_sim_series(obj["report"]))
    if kind == "paper-cell":
        return [row for err, r in obj["reports"].items() for row in _sim_series(r, f"{err}:")]
    if kind == "sweep":
        return list(_sweep_series(obj))
    raise CliError("E_SCHEMA", f"unknown report kind {kind!r}")


def cmd_plotdata(input_path, output=None) -> list:
    try:
        with open(input_path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise CliError("E_INPUT", f"cannot read {input_path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError("E_SCHEMA", f"{input_path} is not JSON: {exc}") from None
    rows = plot_series(obj)
    _write_csv(output, PLOT_COLUMNS, rows)
    return rows


# -- argument handling ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, USAGE_EXIT)


def _tau_list(text):
    try:
        taus = tuple(float(v) for v in text.split(","))
        for tau in taus:
            validate_tau(tau)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc) or f"invalid quantile list {text!r}")
    if len(set(taus)) != len(taus):
        raise argparse.ArgumentTypeError("duplicate quantile level")
    return taus


def _grid(text):
    try:
        return LambdaGrid.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _constants(text):
    try:
        return parse_constants(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panelq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="estimate grouped fixed effects on a panel CSV")
    fit.add_argument("--config", help="flat key = value file supplying defaults")
    fit.add_argument("--input", help="panel CSV with header id,time,y,x1,...")
    fit.add_argument("--tau", type=_tau_list, default=(0.5,),
                     help="comma-separated quantile levels (default 0.5)")
    fit.add_argument("--grid", type=_grid, default=LambdaGrid.parse("0:0.35:0.005"),
                     help="tuning grid min:max:step or list (default 0:0.35:0.005)")
    fit.add_argument("--fuse-tol", type=float, default=None,
                     help="fusion threshold (default max(1e-4, 1e-6 * range of FE intercepts))")
    fit.add_argument("--pnt-constant", type=float, default=DEFAULT_PNT_CONSTANT)
    fit.add_argument("--bandwidth", choices=sorted(BANDWIDTH_RULES), default="hall-sheather")
    fit.add_argument("--level", type=float, default=0.95, help="confidence level")
    fit.add_argument("--format", choices=("json", "csv"), default="json")
    fit.add_argument("--output", help="output path (default stdout)")
    fit.add_argument("--workers", type=int, default=None,
                     help="parallel quantile levels (default PANELQ_THREADS or CPU count)")

    sim = sub.add_parser("simulate", help="Monte Carlo replications of a design cell")
    sim.add_argument("--config", help="flat key = value file supplying defaults")
    sim.add_argument("--dgp", type=int, choices=(1, 2), default=1)
    sim.add_argument("--model", choices=("location", "location-scale"), default="location")
    sim.add_argument("--error", choices=("normal", "t3"), default="normal")
    sim.add_argument("--n", type=int, default=30)
    sim.add_argument("--t", type=int, default=60)
    sim.add_argument("--tau", type=float, default=0.5)
    sim.add_argument("--reps", type=int, default=200)
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--grid", type=_grid, default=LambdaGrid.parse("0:0.35:0.005"))
    sim.add_argument("--pnt-constant", type=float, default=DEFAULT_PNT_CONSTANT)
    sim.add_argument("--bandwidth", choices=sorted(BANDWIDTH_RULES), default="hall-sheather")
    sim.add_argument("--level", type=float, default=0.95)
    sim.add_argument("--sweep-constant", type=_constants, default=None,
                     help="rerun selection for several p_nT constants, e.g. 0.01:0.3:0.01")
    sim.add_argument("--paper-cell", default=None,
                     help="table-row preset such as T1-n30-T60 (both error laws)")
    sim.add_argument("--audit-csv", default=None, help="write one row per replication")
    sim.add_argument("--format", choices=("json", "csv"), default="json")
    sim.add_argument("--output", help="output path (default stdout)")
    sim.add_argument("--workers", type=int, default=None)

    plot = sub.add_parser("plotdata", help="long-format series behind coefficient plots")
    plot.add_argument("--input", required=True, help="report JSON from fit or simulate")
    plot.add_argument("--output", help="CSV path (default stdout)")
    parser.subcommands = {"fit": fit, "simulate": sim, "plotdata": plot}
    return parser


def _apply_config(parser, sub_name, argv):
    """Load ``--config`` values as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(known.config, encoding="utf-8") as fh:
            cp.read_string("[panelq]\n" + fh.read())
    except OSError as exc:
        raise CliError("E_CONFIG", f"cannot read {known.config}: {exc.strerror or exc}",
                       USAGE_EXIT) from None
    except configparser.Error as exc:
        raise CliError("E_CONFIG", f"{known.config}: {exc}", USAGE_EXIT) from None
    subparser = parser.subcommands[sub_name]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in cp["panelq"].items():
        dest = key.strip().replace("-", "_")
        if dest in ("config", "help") or dest not in actions:
            raise CliError("E_CONFIG", f"{known.config}: unknown key {key!r}", USAGE_EXIT)
        action = actions[dest]
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise CliError("E_CONFIG", f"{known.config}: bad value for {key!r}: {exc}",
                           USAGE_EXIT) from None
        if action.choices is not None and value not in action.choices:
            raise CliError("E_CONFIG", f"{known.config}: {key!r} must be one of "
                           f"{list(action.choices)}", USAGE_EXIT)
        defaults[dest] = value
    subparser.set_defaults(**defaults)


def _run(argv):
    parser = build_parser()
    argv = list(argv)
    sub_name = next((a for a in argv if a in ("fit", "simulate", "plotdata")), None)
    if sub_name in ("fit", "simulate"):
        _apply_config(parser, sub_name, argv[argv.index(sub_name) + 1:])
    args = parser.parse_args(argv)

    if args.command == "fit":
        if not args.input:
            raise CliError("E_USAGE", "fit needs --input (flag or config key)", USAGE_EXIT)
        try:
            request = FitRequest(
                input=args.input, taus=tuple(args.tau), grid=args.grid,
                fuse_tol=args.fuse_tol, pnt_constant=args.pnt_constant,
                bandwidth_rule=args.bandwidth, level=args.level, output=args.output,
                format=args.format, workers=args.workers)
        except ValueError as exc:
            raise CliError("E_USAGE", str(exc), USAGE_EXIT) from None
        report = cmd_fit(request)
        failed = [b["tau"] for b in report.blocks if b.get("status") != "ok"]
        if failed:
            raise CliError("E_SOLVER", f"estimation failed at tau = {failed}; "
                           "see the report for details")
        return 0

    if args.command == "simulate":
        try:
            config = SimConfig(
                dgp=args.dgp, model=args.model, error=args.error, n=args.n, t=args.t,
                tau=args.tau, reps=args.reps, seed=args.seed, grid=args.grid,
                pnt_constant=args.pnt_constant, bandwidth_rule=args.bandwidth,
                level=args.level)
            resolve_workers(args.workers)
        except ValueError as exc:
            raise CliError("E_USAGE", str(exc), USAGE_EXIT) from None
        if args.sweep_constant is not None and args.paper_cell is not None:
            raise CliError("E_USAGE", "--sweep-constant and --paper-cell are exclusive",
                           USAGE_EXIT)
        out = cmd_simulate(config, output=args.output, fmt=args.format,
                           audit_csv=args.audit_csv, sweep=args.sweep_constant,
                           table_cell=args.paper_cell, workers=args.workers)
        if out["kind"] == "paper-cell":
            print("\t".join(out["columns"]), file=sys.stderr)
            print("\t".join("" if v is None else f"{v:.3f}" if isinstance(v, float) else str(v)
                            for v in out["row"]), file=sys.stderr)
        return 0

    cmd_plotdata(args.input, args.output)
    return 0


def main(argv=None) -> int:
    try:
        return _run(sys.argv[1:] if argv is None else argv)
    except CliError as exc:
        print(f"panelq: error[{exc.code}] {exc}", file=sys.stderr)
        return exc.status
    except KeyboardInterrupt:
        print("panelq: error[E_INTERRUPTED] interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
