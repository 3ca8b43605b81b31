"""Reference (whole-network) dispatch solvers.

* :func:`solve_modified_centralized`: convex problem with quadratic
  transfer charges on every MG-to-MG exchange.
* :func:`solve_original_centralized`: no transfer charges, with the
  bilinear "no simultaneous opposite exchange" condition handled by
  enumerating which direction of each MG pair is switched off.
* :func:`solve_individual`: every MG isolated (PCC capacity forced to 0).
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import (
    CaseConfig,
    DispatchSolution,
    InfeasibleCaseError,
    generation_cost,
    make_solution,
)
from .qpcore import QpProblem, QpStatus, qp_solve

log = logging.getLogger(__name__)

MAX_PATTERN_PAIRS = 15


@dataclass(frozen=True)
class ComplementarityPattern:
    """For each unordered pair ``(m, n)`` with ``m < n``, the zeroed direction.

    ``zeroed[k]`` is the ordered pair ``(seller, buyer)`` whose exchange is
    fixed to zero for the ``k``-th pair in ``pairs``.
    """

    pairs: tuple[tuple[int, int], ...]
    zeroed: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.pairs) != len(self.zeroed):
            raise ValueError("one zeroed direction per pair is required")
        for (m, n), z in zip(self.pairs, self.zeroed):
            if z not in ((m, n), (n, m)):
                raise ValueError(f"zeroed direction {z} does not belong to pair {(m, n)}")


def all_patterns(ids) -> list[ComplementarityPattern]:
    """Every pattern, in lexicographic order (``m -> n`` zeroed sorts first)."""
    pairs = tuple(itertools.combinations(ids, 2))
    out = []
    for bits in itertools.product((0, 1), repeat=len(pairs)):
        zeroed = tuple((m, n) if bit == 0 else (n, m) for (m, n), bit in zip(pairs, bits))
        out.append(ComplementarityPattern(pairs, zeroed))
    return out


class NetworkLayout:
    """Variable ordering of the whole-network QP.

    ``[P_1..P_N, X_(m,n) for m != n in row-major order, Pd_1..Pd_N, Ps_1..Ps_N]``
    where ``X_(m,n)`` is the power sold by MG m to MG n.
    """

    def __init__(self, n: int):
        self.n = n
        self.pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        self.gen = np.arange(n)
        self.x0 = n
        self.grid_buy = n + len(self.pairs) + np.arange(n)
        self.grid_sell = 2 * n + len(self.pairs) + np.arange(n)
        self.size = 3 * n + len(self.pairs)

    def x_index(self, i: int, j: int) -> int:
        return self.x0 + self.pairs.index((i, j))

    def unpack(self, x: np.ndarray):
        ex = np.zeros((self.n, self.n))
        for k, (i, j) in enumerate(self.pairs):
            ex[i, j] = max(x[self.x0 + k], 0.0)
        clip = lambda v: np.maximum(v, 0.0)  # noqa: E731  solver round-off only
        return clip(x[self.gen]), ex, clip(x[self.grid_buy]), clip(x[self.grid_sell])


def build_network_qp(
    case: CaseConfig,
    include_transfer: bool = True,
    pcc_override=None,
    zero_exchanges=(),
) -> tuple[QpProblem, NetworkLayout]:
    """Assemble the whole-network dispatch QP.

    Balance rows are written as ``supply - demand-side = D_m`` so the
    selling price of MG m is ``-duals_eq[m]``.
    ``zero_exchanges`` lists ``(seller_index, buyer_index)`` pairs whose
    exchange is fixed to zero.
    """
    n = case.size
    lay = NetworkLayout(n)
    mgs = case.microgrids
    pcc = [mg.pcc_max for mg in mgs] if pcc_override is None else list(pcc_override)

    Q = np.zeros((lay.size, lay.size))
    q = np.zeros(lay.size)
    for i, mg in enumerate(mgs):
        Q[i, i] = 2.0 * mg.a
        q[i] = mg.b
        q[lay.grid_buy[i]] = mg.buy_price
        q[lay.grid_sell[i]] = -mg.sell_price
    if include_transfer:
        for k in range(len(lay.pairs)):
            Q[lay.x0 + k, lay.x0 + k] = 2.0 * case.beta

    A_eq = np.zeros((n, lay.size))
    A_in = np.zeros((2 * n, lay.size))
    for i in range(n):
        A_eq[i, i] = 1.0
        A_eq[i, lay.grid_buy[i]] = 1.0
        A_eq[i, lay.grid_sell[i]] = -1.0
        A_in[i, lay.grid_sell[i]] = 1.0          # export through PCC
        A_in[n + i, lay.grid_buy[i]] = 1.0       # import through PCC
    for k, (i, j) in enumerate(lay.pairs):
        col = lay.x0 + k
        A_eq[j, col] += 1.0   # bought by j
        A_eq[i, col] -= 1.0   # sold by i
        A_in[i, col] = 1.0
        A_in[n + j, col] = 1.0
    b_eq = np.array([mg.demand for mg in mgs])
    b_in = np.concatenate([pcc, pcc])

    lb = np.zeros(lay.size)
    ub = np.full(lay.size, np.inf)
    ub[lay.gen] = [mg.gen_max for mg in mgs]
    for i, j in zero_exchanges:
        ub[lay.x_index(i, j)] = 0.0
    offset = sum(mg.c for mg in mgs)
    return QpProblem(Q=Q, q=q, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                     lb=lb, ub=ub, offset=offset), lay


def _precheck(case: CaseConfig, pcc=None):
    for i, mg in enumerate(case.microgrids):
        cap = mg.pcc_max if pcc is None else pcc[i]
        if mg.demand > mg.gen_max + cap:
            raise InfeasibleCaseError(
                f"MG{mg.id}: demand {mg.demand:g} kW exceeds generation capacity "
                f"{mg.gen_max:g} kW plus PCC import capacity {cap:g} kW",
                mg_id=mg.id,
            )


def _to_dispatch(case, sol, lay, include_transfer) -> DispatchSolution:
    gen, ex, buy, sell = lay.unpack(sol.x)
    return make_solution(case, gen, ex, buy, sell, include_transfer=include_transfer,
                         prices=-np.asarray(sol.duals_eq))


def solve_modified_centralized(case: CaseConfig, tol: float = 1e-8) -> DispatchSolution:
    """Solve the convex whole-network problem with transfer charges.

    ``prices`` on the result holds the balance multipliers (selling prices).
    """
    _precheck(case)
    qp, lay = build_network_qp(case, include_transfer=True)
    sol = qp_solve(qp, tol=tol)
    if sol.status is not QpStatus.OPTIMAL:
        raise InfeasibleCaseError(
            f"modified centralized problem is {sol.status.value}", certificate=sol.certificate)
    return _to_dispatch(case, sol, lay, include_transfer=True)


@dataclass(frozen=True)
class OriginalResult:
    solution: DispatchSolution
    pattern: ComplementarityPattern
    patterns_tried: int
    patterns_feasible: int


def solve_original_centralized(
    case: CaseConfig, tol: float = 1e-8, max_workers: int | None = None
) -> DispatchSolution:
    """Solve the problem without transfer charges, enforcing complementarity.

    See :func:`solve_original_centralized_detailed` for the winning pattern.
    """
    return solve_original_centralized_detailed(case, tol, max_workers).solution


def solve_original_centralized_detailed(
    case: CaseConfig, tol: float = 1e-8, max_workers: int | None = None
) -> OriginalResult:
    _precheck(case)
    n_pairs = case.size * (case.size - 1) // 2
    if n_pairs > MAX_PATTERN_PAIRS:
        raise ValueError(
            f"{case.size} MGs give {n_pairs} pairs; enumeration is limited to {MAX_PATTERN_PAIRS}")
    patterns = all_patterns(case.ids)
    index = {mg_id: i for i, mg_id in enumerate(case.ids)}

    def solve_one(pattern: ComplementarityPattern):
        zeroed = [(index[s], index[b]) for s, b in pattern.zeroed]
        qp, lay = build_network_qp(case, include_transfer=False, zero_exchanges=zeroed)
        return qp_solve(qp, tol=tol), lay

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(solve_one, patterns))
    else:
        results = [solve_one(p) for p in patterns]

    best = None
    feasible = 0
    for k, (sol, lay) in enumerate(results):
        if sol.status is not QpStatus.OPTIMAL:
            continue
        feasible += 1
        # first (lexicographically smallest) pattern wins ties
        if best is None or sol.objective < results[best][0].objective - 1e-9 * max(
                1.0, abs(results[best][0].objective)):
            best = k
    if best is None:
        raise InfeasibleCaseError("original centralized problem is infeasible for every pattern")
    sol, lay = results[best]
    log.debug("original centralized: pattern %d of %d wins (%d feasible)",
              best, len(patterns), feasible)
    return OriginalResult(
        solution=_to_dispatch(case, sol, lay, include_transfer=False),
        pattern=patterns[best],
        patterns_tried=len(patterns),
        patterns_feasible=feasible,
    )


@dataclass(frozen=True)
class IndividualResult:
    costs: dict[int, float]
    total: float
    solution: DispatchSolution


def solve_individual(case: CaseConfig, tol: float = 1e-8) -> IndividualResult:
    """Dispatch every MG on its own: no MG exchanges and no grid trade."""
    for mg in case.microgrids:
        if mg.demand > mg.gen_max:
            raise InfeasibleCaseError(
                f"MG{mg.id}: demand {mg.demand:g} kW exceeds generation capacity "
                f"{mg.gen_max:g} kW with the PCC closed",
                mg_id=mg.id,
            )
    qp, lay = build_network_qp(case, include_transfer=True, pcc_override=[0.0] * case.size)
    sol = qp_solve(qp, tol=tol)
    if sol.status is not QpStatus.OPTIMAL:
        raise InfeasibleCaseError(f"isolated dispatch is {sol.status.value}",
                                  certificate=sol.certificate)
    dispatch = _to_dispatch(case, sol, lay, include_transfer=True)
    costs = {mg.id: generation_cost(mg, dispatch.gen[i]) for i, mg in enumerate(case.microgrids)}
    return IndividualResult(costs=costs, total=sum(costs.values()), solution=dispatch)


def attribute_costs(case: CaseConfig, sol: DispatchSolution, prices=None) -> dict[int, float]:
    """Split the network objective into per-MG operating costs.

    Each MG pays its generation cost, its grid purchases net of grid sales,
    the transfer charge on what it buys, and the seller's price for every
    kW bought from another MG; it is credited its own price for every kW
    sold. Inter-MG payments cancel, so the per-MG costs sum to the
    objective with transfer charges included.
    """
    lam = np.asarray(sol.prices if prices is None else prices, dtype=float)
    ex = np.asarray(sol.exchange)
    out = {}
    for i, mg in enumerate(case.microgrids):
        bought = ex[:, i]
        sold = ex[i, :].sum()
        out[mg.id] = (
            generation_cost(mg, sol.gen[i])
            + mg.buy_price * sol.grid_buy[i]
            - mg.sell_price * sol.grid_sell[i]
            + case.beta * float(np.sum(bought ** 2))
            + float(lam @ bought)
            - lam[i] * sold
        )
    return out
