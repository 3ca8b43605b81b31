"""Command-line entry point.

Exit codes: 0 success, 1 solver or infeasibility failure, 2 usage error.
Set ``EMS_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .centralized import (
    attribute_costs,
    solve_individual,
    solve_modified_centralized,
    solve_original_centralized,
)
from .distributed import AgentFault, DivergenceError, run_distributed
from .model import CaseConfig, DispatchSolution, InfeasibleCaseError, evaluate_objective
from .scenarios import CASE_NAMES, CaseFileError, resolve_case

log = logging.getLogger("mmg_ems")

MODES = ("original", "modified", "distributed", "individual")
DEVIATION_LIMIT_KW = 0.5
SOLVER_ERRORS = (InfeasibleCaseError, DivergenceError, AgentFault)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# reports

@dataclass
class ComparisonReport:
    """Side-by-side results of the three solver modes for one case."""

    case_name: str
    columns: tuple[str, ...]
    rows: list[tuple[str, list[float | None], str]] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    max_deviation_kw: float | None = None

    @property
    def deviation_flagged(self) -> bool:
        return self.max_deviation_kw is not None and self.max_deviation_kw > DEVIATION_LIMIT_KW

    def row(self, label: str) -> list[float | None]:
        return next(values for name, values, _ in self.rows if name == label)

    def to_dict(self) -> dict:
        return {
            "case": self.case_name,
            "columns": list(self.columns),
            "rows": [{"label": label, "values": dict(zip(self.columns, values)), "note": note}
                     for label, values, note in self.rows],
            "failures": self.failures,
            "max_deviation_kw": self.max_deviation_kw,
            "deviation_flagged": self.deviation_flagged,
        }

    def render(self) -> str:
        head = ["", *self.columns, ""]
        body = [[label, *("--" if v is None else f"{v:.2f}" for v in values), note]
                for label, values, note in self.rows]
        widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
        fmt = lambda r: "  ".join(  # noqa: E731
            c.ljust(w) if i in (0, len(r) - 1) else c.rjust(w)
            for i, (c, w) in enumerate(zip(r, widths))).rstrip()
        lines = [f"case {self.case_name}", fmt(head), "-" * len(fmt(head))]
        lines += [fmt(r) for r in body]
        for mode, reason in self.failures.items():
            lines.append(f"{mode}: FAILED ({reason})")
        if self.max_deviation_kw is not None:
            flag = "  ** exceeds %.1f kW **" % DEVIATION_LIMIT_KW if self.deviation_flagged else ""
            lines.append(f"max |distributed - modified| = {self.max_deviation_kw:.4f} kW{flag}")
        return "\n".join(lines)


def _solution_rows(case: CaseConfig, sols: list[DispatchSolution | None], with_transfer):
    ids = case.ids
    pick = lambda fn: [None if s is None else fn(s) for s in sols]  # noqa: E731
    rows = [
        ("Objective [$]", pick(lambda s: s.objective), ""),
        ("Generation cost [$]", pick(lambda s: s.gen_cost_total), ""),
        ("Transfer cost [$]",
         [None if s is None or not t else s.transfer_cost_total for s, t in zip(sols, with_transfer)],
         ""),
    ]
    for i, m in enumerate(ids):
        rows.append((f"P_{m}", pick(lambda s, i=i: s.gen[i]), ""))
    for i, m in enumerate(ids):
        for j, n in enumerate(ids):
            if i != j:
                rows.append((f"Pe_{m},{n}", pick(lambda s, i=i, j=j: s.exchange[i, j]), ""))
    for i, m in enumerate(ids):
        rows.append((f"P_d,{m}", pick(lambda s, i=i: s.grid_buy[i]), ""))
    for i, m in enumerate(ids):
        rows.append((f"P_{m},d", pick(lambda s, i=i: s.grid_sell[i]), ""))
    for i, m in enumerate(ids):
        rows.append((f"lambda_{m}",
                     pick(lambda s, i=i: None if s.prices is None else s.prices[i]),
                     "informational (dual degeneracy)"))
    return rows


def primal_deviation(a: DispatchSolution, b: DispatchSolution) -> float:
    """Largest absolute difference over all primal power variables [kW]."""
    return float(max(
        np.max(np.abs(a.gen - b.gen)),
        np.max(np.abs(a.exchange - b.exchange)),
        np.max(np.abs(a.grid_buy - b.grid_buy)),
        np.max(np.abs(a.grid_sell - b.grid_sell)),
    ))


def build_comparison(case: CaseConfig, **overrides) -> ComparisonReport:
    columns = ("centralized", "modified centralized", "distributed")
    sols: list[DispatchSolution | None] = [None, None, None]
    failures = {}
    solvers = (
        lambda: solve_original_centralized(case),
        lambda: solve_modified_centralized(case),
        lambda: run_distributed(case, **overrides).solution,
    )
    for k, (name, solve) in enumerate(zip(columns, solvers)):
        try:
            sols[k] = solve()
        except SOLVER_ERRORS as exc:
            failures[name] = str(exc)
    report = ComparisonReport(case.name, columns,
                              _solution_rows(case, sols, (False, True, True)), failures)
    if sols[1] is not None and sols[2] is not None:
        report.max_deviation_kw = primal_deviation(sols[1], sols[2])
    return report


@dataclass
class CostComparison:
    ids: tuple[int, ...]
    individual: dict[int, float]
    cooperative: dict[int, float]

    @property
    def difference(self) -> dict[int, float]:
        return {m: self.individual[m] - self.cooperative[m] for m in self.ids}

    @property
    def totals(self) -> tuple[float, float, float]:
        ind = sum(self.individual.values())
        coop = sum(self.cooperative.values())
        return ind, coop, ind - coop

    def to_dict(self) -> dict:
        ind, coop, diff = self.totals
        return {
            "microgrids": {str(m): {"individual": self.individual[m],
                                    "cooperative": self.cooperative[m],
                                    "difference": self.difference[m]} for m in self.ids},
            "total": {"individual": ind, "cooperative": coop, "difference": diff},
        }

    def render(self) -> str:
        lines = [f"{'':<10}{'Individual':>12}{'Cooperative':>13}{'Difference':>12}"]
        for m in self.ids:
            lines.append(f"{'MG' + str(m) + ' [$]':<10}{self.individual[m]:>12,.2f}"
                         f"{self.cooperative[m]:>13,.2f}{self.difference[m]:>12,.2f}")
        ind, coop, diff = self.totals
        lines.append(f"{'Total [$]':<10}{ind:>12,.2f}{coop:>13,.2f}{diff:>12,.2f}")
        return "\n".join(lines)


def build_individual_vs_coop(case: CaseConfig) -> CostComparison:
    """Isolated operating cost of each MG against its share of the cooperative optimum.

    Cooperative shares price MG-to-MG trades at the centralized balance
    multipliers (see :func:`mmg_ems.centralized.attribute_costs`).
    """
    individual = solve_individual(case)
    coop = solve_modified_centralized(case)
    return CostComparison(case.ids, dict(individual.costs), attribute_costs(case, coop))


# ---------------------------------------------------------------------------
# commands

def _print_dispatch(case: CaseConfig, sol: DispatchSolution, include_transfer: bool, out):
    br = evaluate_objective(case, sol, include_transfer)
    print(f"objective {br.total:.2f}", file=out)
    print(f"generation cost {br.gen_cost_total:.2f}", file=out)
    print(f"transfer cost {br.transfer_cost_total:.2f}", file=out)
    print(f"grid purchase cost {br.grid_buy_cost:.2f}", file=out)
    print(f"grid sale revenue {br.grid_sell_revenue:.2f}", file=out)
    print(f"{'MG':>4}{'gen':>10}{'grid_buy':>10}{'grid_sell':>10}{'sold':>10}{'price':>10}", file=out)
    for i, m in enumerate(case.ids):
        price = "--" if sol.prices is None else f"{sol.prices[i]:.4g}"
        print(f"{m:>4}{sol.gen[i]:>10.2f}{sol.grid_buy[i]:>10.2f}{sol.grid_sell[i]:>10.2f}"
              f"{sol.eps[i]:>10.2f}{price:>10}", file=out)
    for i, m in enumerate(case.ids):
        for j, n in enumerate(case.ids):
            if sol.exchange[i, j] > 0.005:
                print(f"exchange MG{m} -> MG{n}: {sol.exchange[i, j]:.2f} kW", file=out)


def _solution_dict(sol: DispatchSolution) -> dict:
    return {
        "ids": list(sol.ids),
        "objective": sol.objective,
        "gen_cost_total": sol.gen_cost_total,
        "transfer_cost_total": sol.transfer_cost_total,
        "gen": sol.gen.tolist(),
        "exchange": sol.exchange.tolist(),
        "grid_buy": sol.grid_buy.tolist(),
        "grid_sell": sol.grid_sell.tolist(),
        "eps": sol.eps.tolist(),
        "prices": None if sol.prices is None else sol.prices.tolist(),
    }


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _case_from_args(args) -> CaseConfig:
    case = resolve_case(args.case)
    overrides = {}
    if getattr(args, "beta", None) is not None:
        overrides["beta"] = args.beta
    if getattr(args, "gap_tol", None) is not None:
        overrides["gap_tol"] = args.gap_tol
    return case.with_overrides(**overrides) if overrides else case


def _distributed_overrides(args, case: CaseConfig) -> dict:
    kw = {}
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    if args.iters is not None:
        kw["max_iters"] = args.iters
    if args.lambda0 is not None:
        kw["lambda_init"] = args.lambda0 * case.size if len(args.lambda0) == 1 else args.lambda0
        if len(kw["lambda_init"]) != case.size:
            raise UsageError(f"--lambda0 needs 1 or {case.size} values")
    return kw


def cmd_solve(args, out=None) -> int:
    out = sys.stdout if out is None else out
    case = _case_from_args(args)
    print(f"case {case.name}, mode {args.mode}", file=out)
    t0 = time.perf_counter()
    payload: dict = {"case": case.name, "mode": args.mode}
    if args.mode == "individual":
        res = solve_individual(case)
        for m in case.ids:
            print(f"MG{m} cost {res.costs[m]:.2f}", file=out)
        print(f"total {res.total:.2f}", file=out)
        payload.update(costs={str(m): v for m, v in res.costs.items()}, total=res.total,
                       solution=_solution_dict(res.solution))
    elif args.mode in ("original", "modified"):
        solve = solve_original_centralized if args.mode == "original" else solve_modified_centralized
        sol = solve(case)
        _print_dispatch(case, sol, args.mode == "modified", out)
        payload["solution"] = _solution_dict(sol)
    else:
        kw = _distributed_overrides(args, case)
        run = run_distributed(case, **kw)
        _print_dispatch(case, run.solution, True, out)
        last = run.trace.records[-1] if run.trace.records else None
        if last is None:
            print("no rounds run; initial point only", file=out)
            dual = sum(r.objective for r in run.results)
            gap = run.solution.objective - dual
            print(f"dual objective {dual:.4f}  gap {gap:.4f} $ "
                  f"({100 * gap / abs(run.solution.objective):.4f} %)", file=out)
        else:
            print(f"rounds {run.rounds}  dual objective {last.dual_obj:.4f}  "
                  f"gap {last.gap:.4g} $ ({last.gap_pct:.4g} %)", file=out)
        print("prices " + " ".join(f"{v:.4f}" for v in run.prices.values), file=out)
        if run.negative_price_rounds:
            print(f"note: negative prices in {len(run.negative_price_rounds)} rounds", file=out)
        if args.trace:
            run.trace.write_csv(args.trace)
            print(f"trace written to {args.trace} ({run.rounds} rows)", file=out)
        payload.update(solution=_solution_dict(run.solution), rounds=run.rounds,
                       prices=list(run.prices.values))
    log.info("solve took %.3f s", time.perf_counter() - t0)
    if args.out:
        _write_json(args.out, payload)
    return 0


def cmd_compare(args, out=None) -> int:
    out = sys.stdout if out is None else out
    case = _case_from_args(args)
    report = build_comparison(case, **_distributed_overrides(args, case))
    print(report.render(), file=out)
    if args.out:
        _write_json(args.out, report.to_dict())
    return 1 if report.failures else 0


def cmd_individual_vs_coop(args, out=None) -> int:
    out = sys.stdout if out is None else out
    case = _case_from_args(args)
    table = build_individual_vs_coop(case)
    print(f"case {case.name}", file=out)
    print(table.render(), file=out)
    if args.out:
        _write_json(args.out, table.to_dict())
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmg-ems", description="Multi-microgrid energy management simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_case=None):
        p.add_argument("--case", required=default_case is None, default=default_case,
                       help=f"case file path or builtin name ({', '.join(CASE_NAMES)})")
        p.add_argument("--beta", type=float, help="transfer-charge scale [$/kW^2]")
        p.add_argument("--out", help="write machine-readable JSON results here")

    def distributed_flags(p):
        p.add_argument("--alpha", type=float, help="subgradient step size")
        p.add_argument("--iters", type=int, help="number of rounds (0 evaluates the start)")
        p.add_argument("--gap-tol", type=float, help="stop at this relative duality gap")
        p.add_argument("--lambda0", type=_float_list, help="initial prices, one or per MG")

    p = sub.add_parser("solve", help="run one solver mode")
    common(p)
    p.add_argument("--mode", choices=MODES, default="modified")
    distributed_flags(p)
    p.add_argument("--trace", help="CSV trace path (distributed mode)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="all three modes side by side")
    common(p)
    distributed_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("individual-vs-coop", help="isolated vs cooperative MG costs")
    common(p, default_case="individual_vs_coop")
    p.set_defaults(func=cmd_individual_vs_coop)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EMS_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("alpha", "iters"):
        value = getattr(args, name, None)
        if value is not None and value < 0:
            parser.error(f"--{name} must be >= 0")
    try:
        return args.func(args)
    except (UsageError, CaseFileError) as exc:
        parser.error(str(exc))
    except ValueError as exc:
        # invalid overrides (e.g. beta <= 0) or unknown builtin names
        parser.error(str(exc))
    except SOLVER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
