"""Command-line front end.

Exit codes: 0 success, 1 invalid input (or a failed ``check-kkt``), 2 a
simulation diverged (the partial trajectory is still written), 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import DEFAULT_DT, DEFAULT_HORIZON, Mechanism, TimeConstants, Variant, equilibrium_state, simulate
from .errors import GridMarketError, ValidationError
from .network import NetworkModel, derive_matrices, load_network
from .planner import DEFAULT_TOL, kkt_residual, load_point, save_solution, solve_planner
from .plotting import plot
from .scenario import Scenario, load_scenario
from .stability import build_w_sigma, eigenvalues, linearize, rho_bound, stability_verdict
from .traces import point_at, read_table, write_trajectory

log = logging.getLogger("gridmarket")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; that code is reserved for divergence here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridmarket", description="Grid-market-bidder closed-loop simulator and planner oracle.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="integrate the closed loop for one or more scenarios")
    s.add_argument("--network", required=True)
    s.add_argument("--scenario", required=True, action="append", help="repeatable")
    s.add_argument("--out", required=True, help="CSV path; with several scenarios the scenario name is appended")
    s.add_argument("--reference", help="planner solution JSON anchoring the V column")
    s.add_argument("--dt", type=_positive)
    s.add_argument("--horizon", type=_positive)
    s.add_argument("--rho", type=_positive)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("solve-planner", help="solve the planner's problem")
    s.add_argument("--network", required=True)
    s.add_argument("--scenario", help="apply this scenario's demand step first")
    s.add_argument("--tol", type=_positive, default=DEFAULT_TOL)
    s.add_argument("--out", required=True)

    s = sub.add_parser("analyze-stability", help="linearize at the planner equilibrium and classify")
    s.add_argument("--network", required=True)
    s.add_argument("--mechanism", required=True, choices=[v.value for v in Variant])
    s.add_argument("--rho", type=_positive)
    s.add_argument("--scenario", help="apply this scenario's demand step and time constants")
    s.add_argument("--out", required=True)

    s = sub.add_parser("check-kkt", help="evaluate planner optimality residuals of a candidate")
    s.add_argument("--network", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--reference", help="planner solution JSON")
    src.add_argument("--trajectory", help="trajectory CSV")
    s.add_argument("--time", type=float, help="trajectory time to check (default: last row)")
    s.add_argument("--scenario", help="apply this scenario's demand step first")
    s.add_argument("--tol", type=_positive, default=DEFAULT_TOL)

    s = sub.add_parser("plot", help="SVG line chart of trajectory columns")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--columns", required=True, help="comma-separated glob patterns, e.g. 'omega_*,flow_*'")
    s.add_argument("--out", required=True)
    s.add_argument("--network", help="draw flow limits of this network")
    return p


def _echo_config(args: argparse.Namespace) -> None:
    lines = ["# gridmarket config", f"#   command = {args.command}"]
    defaults = {"dt": DEFAULT_DT, "horizon": DEFAULT_HORIZON, "tol": DEFAULT_TOL}
    for key, value in sorted(vars(args).items()):
        if key in ("command", "verbose"):
            continue
        if value is None and key in defaults:
            value = f"{defaults[key]:g} (scenario or default)"
        lines.append(f"#   {key} = {value}")
    print("\n".join(lines), file=sys.stderr)


def _stepped(net: NetworkModel, scenario_path: str | None) -> tuple[NetworkModel, Scenario | None]:
    if scenario_path is None:
        return net, None
    sc = load_scenario(scenario_path, net)
    return net.with_demand_step(sc.demand_vector(net)), sc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _out_path(out: str, scenario: str, many: bool) -> Path:
    base = Path(out)
    if not many:
        return base
    return base.with_name(f"{base.stem}_{Path(scenario).stem}{base.suffix or '.csv'}")


def _simulate_one(network: str, scenario: str, out: str, reference: str | None, dt, horizon, rho) -> tuple[str, str, float | None]:
    net = load_network(network)
    mats = derive_matrices(net)
    sc = load_scenario(scenario, net).with_overrides(dt=dt, horizon=horizon, rho=rho)
    ref_state = None
    if reference is not None:
        ref_state = equilibrium_state(load_point(reference), net, sc.mechanism)
    traj = simulate(net, mats, sc.mechanism, sc, ref_state)
    write_trajectory(traj, out)
    return out, traj.status, traj.diverged_at


def cmd_simulate(args) -> int:
    many = len(args.scenario) > 1
    jobs = [
        (args.network, sc, str(_out_path(args.out, sc, many)), args.reference, args.dt, args.horizon, args.rho)
        for sc in args.scenario
    ]
    if args.jobs > 1 and many:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_simulate_one, *zip(*jobs)))
    else:
        results = [_simulate_one(*job) for job in jobs]
    code = EXIT_OK
    for out, status, t_div in results:
        if status == "diverged":
            print(f"{out}: diverged at t={t_div:g}", file=sys.stderr)
            code = EXIT_DIVERGED
        else:
            print(f"{out}: completed", file=sys.stderr)
    return code


def cmd_solve_planner(args) -> int:
    net, _ = _stepped(load_network(args.network), args.scenario)
    sol = solve_planner(net, derive_matrices(net), tol=args.tol)
    save_solution(sol, args.out)
    print(f"kkt residual {sol.kkt_residual:.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze_stability(args) -> int:
    base = load_network(args.network)
    net, sc = _stepped(base, args.scenario)
    mats = derive_matrices(net)
    tc = sc.mechanism.time_constants if sc is not None else TimeConstants()
    variant = Variant(args.mechanism)
    rho = args.rho
    if variant is Variant.PRICE_MISALIGNED_REGULARIZED and rho is None:
        if sc is not None and sc.mechanism.rho is not None:
            rho = sc.mechanism.rho
        else:
            raise ValidationError("--rho is required for the regularized mechanism")
    mech = Mechanism(variant, rho if variant is Variant.PRICE_MISALIGNED_REGULARIZED else None, tc)
    sol = solve_planner(net, mats)
    point = equilibrium_state(sol, net, mech)
    lin = linearize(net, mats, mech, point)
    eig = eigenvalues(lin.A)
    verdict = stability_verdict(eig)
    report = {
        "mechanism": variant.value,
        "rho": rho,
        "labels": lin.labels,
        "eigenvalues": [[float(z.real), float(z.imag)] for z in eig],
        "zero_modes": int(verdict.zero_modes.size),
        "max_real_part": verdict.max_real,
        "verdict": verdict.label,
        "rho_bound": rho_bound(net.costs.c) if net.costs.is_quadratic else None,
        "w_sigma_min_eigenvalue": None,
    }
    if rho is not None and net.costs.is_quadratic:
        report["w_sigma_min_eigenvalue"] = build_w_sigma(net, mats, rho).min_eigenvalue
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"verdict: {verdict.label}", file=sys.stderr)
    return EXIT_OK


def cmd_check_kkt(args) -> int:
    net, _ = _stepped(load_network(args.network), args.scenario)
    mats = derive_matrices(net)
    if args.reference is not None:
        pt = load_point(args.reference)
        where = args.reference
    else:
        t, pt = point_at(read_table(args.trajectory), net, args.time)
        where = f"{args.trajectory} at t={t:g}"
    report = kkt_residual(net, mats, pt)
    print(f"KKT residuals for {where}")
    for name, value in report.as_dict().items():
        print(f"  {name:16s} {value:.3e}")
    ok = report.overall <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} at tol {args.tol:g}")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_plot(args) -> int:
    net = load_network(args.network) if args.network else None
    cols = plot(args.trajectory, args.columns, args.out, net)
    print(f"plotted {len(cols)} column(s) to {args.out}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-planner": cmd_solve_planner,
    "analyze-stability": cmd_analyze_stability,
    "check-kkt": cmd_check_kkt,
    "plot": cmd_plot,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version / usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _echo_config(args)
    try:
        return COMMANDS[args.command](args)
    except GridMarketError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"error: LinAlgError: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())
