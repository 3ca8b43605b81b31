"""Domain types and cost/feasibility evaluation for a multi-microgrid network.

Everything here is pure: the dataclasses are frozen and every numpy array they
hold is flagged read-only, so values can be shared between threads freely.

Units follow the usual single one-hour dispatch convention: powers in kW,
tariffs and prices in $/kW (equivalent to $/kWh over the hour), costs in $.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

#: Tolerance used when checking solver output.
SOLVER_FEAS_TOL = 1e-6
#: Tolerance used when comparing against two-decimal published tables.
TABLE_FEAS_TOL = 0.1


class StructureError(ValueError):
    """Inputs whose shapes or identities do not line up."""


class InfeasibleCaseError(RuntimeError):
    """A dispatch problem has no feasible point.

    ``mg_id`` names the microgrid that makes it infeasible when one can be
    singled out.
    """

    def __init__(self, message: str, mg_id: int | None = None, certificate: float | None = None):
        super().__init__(message)
        self.mg_id = mg_id
        self.certificate = certificate


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MicrogridParams:
    """Private data of one microgrid: cost curve, demand and capacities."""

    id: int
    a: float
    b: float
    c: float
    demand: float
    gen_max: float
    pcc_max: float
    buy_price: float
    sell_price: float

    def __post_init__(self):
        for name in ("a", "b", "c", "demand", "gen_max", "pcc_max", "buy_price", "sell_price"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"MG{self.id}: {name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.a < 0:
            raise ValueError(f"MG{self.id}: a must be >= 0 (convex cost), got {self.a}")
        for name in ("demand", "gen_max", "pcc_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"MG{self.id}: {name} must be >= 0, got {getattr(self, name)}")
        if self.sell_price > self.buy_price:
            warnings.warn(
                f"MG{self.id}: grid sell price {self.sell_price} exceeds buy price "
                f"{self.buy_price}; arbitrage through the PCC is possible",
                stacklevel=3,
            )


@dataclass(frozen=True)
class CaseConfig:
    """A complete scenario: the microgrids plus coordination parameters."""

    microgrids: tuple[MicrogridParams, ...]
    alpha: float
    beta: float
    max_iters: int = 1000
    gap_tol: float | None = None
    lambda_init: tuple[float, ...] | None = None
    name: str = "case"

    def __post_init__(self):
        mgs = tuple(self.microgrids)
        object.__setattr__(self, "microgrids", mgs)
        if len(mgs) < 2:
            raise ValueError("a case needs at least 2 microgrids")
        ids = [mg.id for mg in mgs]
        if ids != list(range(1, len(mgs) + 1)):
            raise ValueError(f"microgrid ids must be 1..{len(mgs)} in order, got {ids}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("max_iters must be an integer >= 1")
        object.__setattr__(self, "max_iters", int(self.max_iters))
        if self.gap_tol is not None and not self.gap_tol > 0:
            raise ValueError("gap_tol must be > 0 when given")
        lam = self.lambda_init
        if lam is None:
            lam = (0.0,) * len(mgs)
        lam = tuple(float(v) for v in lam)
        if len(lam) != len(mgs):
            raise ValueError(f"lambda_init needs {len(mgs)} entries, got {len(lam)}")
        if any(not np.isfinite(v) or v < 0 for v in lam):
            raise ValueError("lambda_init entries must be finite and >= 0")
        object.__setattr__(self, "lambda_init", lam)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(mg.id for mg in self.microgrids)

    @property
    def size(self) -> int:
        return len(self.microgrids)

    def mg(self, mg_id: int) -> MicrogridParams:
        return self.microgrids[mg_id - 1]

    def with_overrides(self, **changes) -> "CaseConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)

    def with_microgrids(self, **changes) -> "CaseConfig":
        """Apply the same field changes to every microgrid.

        Each value may be a scalar or a sequence with one entry per MG.
        """
        mgs = []
        for i, mg in enumerate(self.microgrids):
            kw = {}
            for key, value in changes.items():
                kw[key] = value[i] if isinstance(value, (list, tuple, np.ndarray)) else value
            mgs.append(replace(mg, **kw))
        return replace(self, microgrids=tuple(mgs))


@dataclass(frozen=True)
class DispatchSolution:
    """Primal decision values of the network plus the objective breakdown.

    ``exchange[i, j]`` is the power sold by MG ``ids[i]`` to MG ``ids[j]``.
    Self-exchange variables do not exist in any formulation, so the diagonal
    is structurally zero and a non-zero diagonal is rejected.
    ``prices`` carries the balance multipliers when a solver produced them.
    """

    gen: np.ndarray
    exchange: np.ndarray
    grid_buy: np.ndarray
    grid_sell: np.ndarray
    eps: np.ndarray
    objective: float
    gen_cost_total: float
    transfer_cost_total: float
    prices: np.ndarray | None = None
    ids: tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.gen)
        for name in ("gen", "grid_buy", "grid_sell", "eps"):
            arr = _frozen(getattr(self, name))
            if arr.shape != (n,):
                raise StructureError(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        ex = _frozen(self.exchange)
        if ex.shape != (n, n):
            raise StructureError(f"exchange has shape {ex.shape}, expected ({n}, {n})")
        if np.any(np.diag(ex) != 0):
            raise StructureError("self-exchange is not a decision variable; diagonal must be 0")
        object.__setattr__(self, "exchange", ex)
        if self.prices is not None:
            object.__setattr__(self, "prices", _frozen(self.prices))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(range(1, n + 1)))
        object.__setattr__(self, "objective", float(self.objective))
        object.__setattr__(self, "gen_cost_total", float(self.gen_cost_total))
        object.__setattr__(self, "transfer_cost_total", float(self.transfer_cost_total))

    @property
    def size(self) -> int:
        return len(self.gen)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    gen_cost_total: float
    transfer_cost_total: float
    grid_buy_cost: float
    grid_sell_revenue: float


@dataclass(frozen=True)
class FeasibilityReport:
    """Constraint residuals of a dispatch. All violations are >= 0."""

    balance_residual: np.ndarray
    gen_violation: float
    pcc_export_violation: float
    pcc_import_violation: float
    negativity_violation: float
    complementarity_violation: float
    tol: float
    complementarity_tol: float

    @property
    def max_violation(self) -> float:
        return max(
            float(np.max(np.abs(self.balance_residual), initial=0.0)),
            self.gen_violation,
            self.pcc_export_violation,
            self.pcc_import_violation,
            self.negativity_violation,
        )

    @property
    def feasible(self) -> bool:
        return (
            self.max_violation <= self.tol
            and self.complementarity_violation <= self.complementarity_tol
        )


def generation_cost(params: MicrogridParams, p: float) -> float:
    """Quadratic generation cost ``a p^2 + b p + c`` (no clamping of ``p``)."""
    return params.a * p * p + params.b * p + params.c


def transfer_cost(beta: float, p):
    """Network-usage charge ``beta p^2`` on one exchange (vectorises over ``p``)."""
    return beta * np.square(p) if isinstance(p, np.ndarray) else beta * p * p


def _check_dims(case: CaseConfig, sol: DispatchSolution):
    if sol.size != case.size:
        raise StructureError(f"solution covers {sol.size} MGs, case has {case.size}")


def evaluate_objective(
    case: CaseConfig, sol: DispatchSolution, include_transfer: bool = True
) -> ObjectiveBreakdown:
    """Total network cost of ``sol`` and its components.

    ``total = gen_cost_total + transfer_cost_total + grid_buy_cost - grid_sell_revenue``
    holds exactly because ``total`` is assembled from the same four numbers.
    """
    _check_dims(case, sol)
    gen = sum(generation_cost(mg, sol.gen[i]) for i, mg in enumerate(case.microgrids))
    transfer = float(np.sum(transfer_cost(case.beta, sol.exchange))) if include_transfer else 0.0
    buy = float(sum(mg.buy_price * sol.grid_buy[i] for i, mg in enumerate(case.microgrids)))
    sell = float(sum(mg.sell_price * sol.grid_sell[i] for i, mg in enumerate(case.microgrids)))
    return ObjectiveBreakdown(
        total=gen + transfer + buy - sell,
        gen_cost_total=gen,
        transfer_cost_total=transfer,
        grid_buy_cost=buy,
        grid_sell_revenue=sell,
    )


def make_solution(
    case: CaseConfig,
    gen: Sequence[float],
    exchange,
    grid_buy: Sequence[float],
    grid_sell: Sequence[float],
    include_transfer: bool = True,
    prices: Sequence[float] | None = None,
) -> DispatchSolution:
    """Build a :class:`DispatchSolution` with ``eps`` and objective filled in."""
    exchange = np.array(exchange, dtype=float)
    if exchange.shape != (case.size, case.size):
        raise StructureError(f"exchange has shape {exchange.shape}, expected {(case.size,) * 2}")
    draft = DispatchSolution(
        gen=gen,
        exchange=exchange,
        grid_buy=grid_buy,
        grid_sell=grid_sell,
        eps=exchange.sum(axis=1),
        objective=0.0,
        gen_cost_total=0.0,
        transfer_cost_total=0.0,
        prices=prices,
        ids=case.ids,
    )
    obj = evaluate_objective(case, draft, include_transfer)
    return replace(
        draft,
        objective=obj.total,
        gen_cost_total=obj.gen_cost_total,
        transfer_cost_total=obj.transfer_cost_total,
    )


def check_feasibility(
    case: CaseConfig,
    sol: DispatchSolution,
    tol: float = SOLVER_FEAS_TOL,
    complementarity_tol: float | None = None,
) -> FeasibilityReport:
    """Evaluate every network constraint on ``sol``.

    The no-simultaneous-exchange product (kW^2) is checked against
    ``complementarity_tol``, which defaults to ``tol``. Pass ``np.inf`` to
    skip it, e.g. for intermediate distributed iterates where opposite
    purchases are legitimate.
    """
    _check_dims(case, sol)
    ex = sol.exchange
    exports = ex.sum(axis=1)
    imports = ex.sum(axis=0)
    demand = np.array([mg.demand for mg in case.microgrids])
    gen_max = np.array([mg.gen_max for mg in case.microgrids])
    pcc = np.array([mg.pcc_max for mg in case.microgrids])

    balance = (sol.gen + imports + sol.grid_buy) - (demand + exports + sol.grid_sell)
    gen_violation = float(np.max(np.maximum(sol.gen - gen_max, 0.0)))
    export_violation = float(np.max(np.maximum(exports + sol.grid_sell - pcc, 0.0)))
    import_violation = float(np.max(np.maximum(imports + sol.grid_buy - pcc, 0.0)))
    off_diag = ex[~np.eye(case.size, dtype=bool)]
    negativity = -min(
        0.0, float(np.min(sol.gen)), float(np.min(off_diag)),
        float(np.min(sol.grid_buy)), float(np.min(sol.grid_sell)),
    )
    comp = float(np.max(np.triu(ex * ex.T, k=1)))
    return FeasibilityReport(
        balance_residual=_frozen(balance),
        gen_violation=gen_violation,
        pcc_export_violation=export_violation,
        pcc_import_violation=import_violation,
        negativity_violation=negativity,
        complementarity_violation=comp,
        tol=tol,
        complementarity_tol=tol if complementarity_tol is None else complementarity_tol,
    )
