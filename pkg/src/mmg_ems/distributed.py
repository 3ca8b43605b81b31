"""Price-coordinated distributed dispatch (dual decomposition + subgradient).

Each microgrid agent keeps its cost curve and demand to itself. Per round:

1. every agent announces its selling price on the bus,
2. every agent solves its local problem given all announced prices,
3. every agent reports how much it buys from each other MG and how much it
   offers to sell,
4. every agent moves its own price by ``alpha * (sold_to_others - offered)``.

The :class:`MessageBus` is an in-process synchronous network with a recording
tap; agents only see each other through :class:`Message` values, and
:func:`audit_privacy` checks the recorded wire form.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .model import (
    CaseConfig,
    DispatchSolution,
    InfeasibleCaseError,
    MicrogridParams,
    StructureError,
    check_feasibility,
    make_solution,
)
from .qpcore import QpProblem, QpStatus, qp_solve

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class AgentFault(InfeasibleCaseError):
    """An agent could not solve its local problem; the run is aborted."""


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriceVector:
    """Selling price of every MG at round ``round``."""

    ids: tuple[int, ...]
    values: tuple[float, ...]
    round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.ids) != len(self.values):
            raise StructureError("one price per MG id is required")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("prices must be finite")

    def __getitem__(self, mg_id: int) -> float:
        try:
            return self.values[self.ids.index(mg_id)]
        except ValueError:
            raise StructureError(f"no price announced for MG{mg_id}") from None

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    @classmethod
    def initial(cls, case: CaseConfig) -> "PriceVector":
        return cls(case.ids, case.lambda_init, 0)


@dataclass(frozen=True)
class SubproblemResult:
    mg_id: int
    purchases: dict[int, float]  # seller id -> kW bought from that seller
    eps_offer: float
    gen: float
    grid_buy: float
    grid_sell: float
    objective: float


# ---------------------------------------------------------------------------
# local problem

def build_subproblem(mg: MicrogridParams, prices: PriceVector, beta: float) -> QpProblem:
    """Local QP of one MG given everybody's prices.

    Variable order: ``(P, P_grid_buy, P_grid_sell, X_from_n for each other n
    in id order, eps)``. Buying from seller n costs ``prices[n]`` per kW plus
    the transfer charge; the ``eps`` kW offered to others earn the MG's own
    price.
    """
    own = prices[mg.id]
    sellers = [i for i in prices.ids if i != mg.id]
    k = len(sellers)
    n = 4 + k
    Q = np.zeros((n, n))
    Q[0, 0] = 2.0 * mg.a
    for j in range(k):
        Q[3 + j, 3 + j] = 2.0 * beta
    q = np.concatenate([[mg.b, mg.buy_price, -mg.sell_price],
                        [prices[s] for s in sellers], [-own]])
    # P + sum X + Pd - Ps - eps = D
    A_eq = np.concatenate([[1.0, 1.0, -1.0], np.ones(k), [-1.0]])[None, :]
    A_in = np.zeros((2, n))
    A_in[0, 2] = A_in[0, -1] = 1.0            # eps + Ps <= pcc
    A_in[1, 1] = 1.0
    A_in[1, 3:3 + k] = 1.0                    # sum X + Pd <= pcc
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    ub[0] = mg.gen_max
    return QpProblem(Q=Q, q=q, A_eq=A_eq, b_eq=[mg.demand], A_in=A_in,
                     b_in=[mg.pcc_max, mg.pcc_max], lb=lb, ub=ub, offset=mg.c)


def solve_subproblem(mg: MicrogridParams, prices: PriceVector, beta: float) -> SubproblemResult:
    qp = build_subproblem(mg, prices, beta)
    sol = qp_solve(qp)
    if sol.status is not QpStatus.OPTIMAL:
        raise AgentFault(f"MG{mg.id}: local problem is {sol.status.value}", mg_id=mg.id,
                         certificate=sol.certificate)
    x = np.maximum(sol.x, 0.0)
    sellers = [i for i in prices.ids if i != mg.id]
    return SubproblemResult(
        mg_id=mg.id,
        purchases={s: float(x[3 + j]) for j, s in enumerate(sellers)},
        eps_offer=float(x[-1]),
        gen=float(x[0]),
        grid_buy=float(x[1]),
        grid_sell=float(x[2]),
        objective=sol.objective,
    )


# ---------------------------------------------------------------------------
# price coordination

def sold_to_others(results: Iterable[SubproblemResult], seller: int) -> float:
    return sum(r.purchases.get(seller, 0.0) for r in results if r.mg_id != seller)


def residuals(prices: PriceVector, results: Sequence[SubproblemResult]) -> np.ndarray:
    by_id = {r.mg_id: r for r in results}
    return np.array([sold_to_others(results, m) - by_id[m].eps_offer for m in prices.ids])


def price_step(price: float, sold: float, offered: float, alpha: float) -> float:
    """One MG's own subgradient step."""
    return price + alpha * (sold - offered)


def subgradient_update(prices: PriceVector, results: Sequence[SubproblemResult],
                       alpha: float) -> PriceVector:
    by_id = {r.mg_id: r for r in results}
    if set(by_id) != set(prices.ids):
        raise StructureError("results must cover every MG of the price vector")
    values = [price_step(prices[m], sold_to_others(results, m), by_id[m].eps_offer, alpha)
              for m in prices.ids]
    return PriceVector(prices.ids, values, prices.round + 1)


def dual_objective(case: CaseConfig, prices: PriceVector,
                   results: Sequence[SubproblemResult]) -> float:
    """Lagrangian value: sum of local optimal objectives at ``prices``."""
    if len(results) != case.size:
        raise StructureError("one subproblem result per MG is required")
    return float(sum(r.objective for r in results))


# ---------------------------------------------------------------------------
# primal recovery

def _local_dispatch(mg: MicrogridParams, imports: float, exports: float):
    """Cheapest (P, Pd, Ps) for one MG with its MG exchanges held fixed."""
    Q = np.diag([2.0 * mg.a, 0.0, 0.0])
    q = np.array([mg.b, mg.buy_price, -mg.sell_price])
    qp = QpProblem(
        Q=Q, q=q,
        A_eq=[[1.0, 1.0, -1.0]], b_eq=[mg.demand + exports - imports],
        lb=[0.0, 0.0, 0.0],
        ub=[mg.gen_max, max(mg.pcc_max - imports, 0.0), max(mg.pcc_max - exports, 0.0)],
        offset=mg.c,
    )
    return qp_solve(qp)


@dataclass(frozen=True)
class Recovery:
    solution: DispatchSolution
    clamped: bool


def recover_primal_detailed(case: CaseConfig, results: Sequence[SubproblemResult],
                            prices: PriceVector | None = None) -> Recovery:
    ids = case.ids
    by_id = {r.mg_id: r for r in results}
    if set(by_id) != set(ids):
        raise StructureError("one subproblem result per MG is required")
    n = case.size
    ex = np.zeros((n, n))
    for j, buyer in enumerate(ids):
        for i, seller in enumerate(ids):
            if seller != buyer:
                ex[i, j] = by_id[buyer].purchases.get(seller, 0.0)

    clamped = False
    for i, mg in enumerate(case.microgrids):
        # imports cancel out of the seller's own capability
        cap = max(0.0, min(mg.pcc_max, mg.gen_max + mg.pcc_max - mg.demand))
        sold = ex[i].sum()
        if sold > cap:
            ex[i] *= cap / sold
            clamped = True
    imports = ex.sum(axis=0)
    # a buyer can also be over its PCC import limit only through rounding
    for j, mg in enumerate(case.microgrids):
        if imports[j] > mg.pcc_max:
            ex[:, j] *= mg.pcc_max / imports[j]
            clamped = True
    exports = ex.sum(axis=1)
    imports = ex.sum(axis=0)

    gen, buy, sell = np.zeros(n), np.zeros(n), np.zeros(n)
    for i, mg in enumerate(case.microgrids):
        sol = _local_dispatch(mg, imports[i], exports[i])
        if sol.status is not QpStatus.OPTIMAL:
            raise AgentFault(f"MG{mg.id}: cannot balance recovered exchanges", mg_id=mg.id)
        gen[i], buy[i], sell[i] = np.maximum(sol.x, 0.0)
    solution = make_solution(case, gen, ex, buy, sell, include_transfer=True,
                             prices=None if prices is None else prices.as_array())
    return Recovery(solution, clamped)


def recover_primal(case: CaseConfig, results: Sequence[SubproblemResult],
                   prices: PriceVector | None = None) -> DispatchSolution:
    """Feasible network dispatch from one round of local results.

    Exchanges come from the buyers' purchase reports; each seller's ``eps``
    becomes what it actually sold, and every MG re-balances generation and
    grid trade with its exchanges held fixed. Sales beyond a seller's
    capability are scaled down proportionally.
    """
    return recover_primal_detailed(case, results, prices).solution


# ---------------------------------------------------------------------------
# messages and bus

@dataclass(frozen=True)
class PriceAnnouncement:
    price: float


@dataclass(frozen=True)
class ExchangeReport:
    purchases: dict[int, float]
    eps_offer: float


Payload = Union[PriceAnnouncement, ExchangeReport]


@dataclass(frozen=True)
class Message:
    sender: int
    round: int
    payload: Payload

    def to_wire(self) -> str:
        body: dict = {"sender": self.sender, "round": self.round}
        if isinstance(self.payload, PriceAnnouncement):
            body.update(type="price", price=self.payload.price)
        elif isinstance(self.payload, ExchangeReport):
            body.update(type="exchange",
                        purchases={str(k): v for k, v in sorted(self.payload.purchases.items())},
                        eps_offer=self.payload.eps_offer)
        else:
            raise TypeError(f"unsupported payload {type(self.payload).__name__}")
        return json.dumps(body, sort_keys=True)

    @classmethod
    def from_wire(cls, text: str) -> "Message":
        body = json.loads(text)
        if body["type"] == "price":
            payload: Payload = PriceAnnouncement(float(body["price"]))
        elif body["type"] == "exchange":
            payload = ExchangeReport({int(k): float(v) for k, v in body["purchases"].items()},
                                     float(body["eps_offer"]))
        else:
            raise ValueError(f"unknown message type {body['type']!r}")
        return cls(int(body["sender"]), int(body["round"]), payload)


class MessageBus:
    """Synchronous broadcast bus with a recording tap.

    Messages published during a phase are delivered, sorted by sender id,
    when the phase is closed, so the order agents publish in never matters.
    Every message is serialised and deserialised on its way through.
    """

    def __init__(self):
        self.log: list[str] = []
        self._pending: list[str] = []

    def publish(self, msg: Message) -> None:
        wire = msg.to_wire()
        self.log.append(wire)
        self._pending.append(wire)

    def deliver(self) -> list[Message]:
        msgs = sorted((Message.from_wire(w) for w in self._pending), key=lambda m: m.sender)
        self._pending = []
        return msgs


class MicrogridAgent:
    """One MG. Holds its private parameters and its own selling price."""

    def __init__(self, params: MicrogridParams, beta: float, alpha: float, price: float):
        self._params = params
        self.id = params.id
        self.beta = beta
        self.alpha = alpha
        self.price = float(price)
        self.result: SubproblemResult | None = None

    def announce(self, bus: MessageBus, k: int) -> None:
        bus.publish(Message(self.id, k, PriceAnnouncement(self.price)))

    def solve(self, announcements: Sequence[Message]) -> SubproblemResult:
        prices = PriceVector([m.sender for m in announcements],
                             [m.payload.price for m in announcements],
                             announcements[0].round if announcements else 0)
        self.result = solve_subproblem(self._params, prices, self.beta)
        return self.result

    def report(self, bus: MessageBus, k: int) -> None:
        r = self.result
        bus.publish(Message(self.id, k, ExchangeReport(dict(r.purchases), r.eps_offer)))

    def update(self, reports: Sequence[Message]) -> None:
        sold = sum(m.payload.purchases.get(self.id, 0.0) for m in reports if m.sender != self.id)
        offered = next(m.payload.eps_offer for m in reports if m.sender == self.id)
        self.price = price_step(self.price, sold, offered, self.alpha)


# ---------------------------------------------------------------------------
# trace and driver

@dataclass(frozen=True)
class IterationRecord:
    round: int
    prices: tuple[float, ...]
    residuals: tuple[float, ...]
    dual_obj: float
    primal_obj: float
    clamped: bool = False

    @property
    def gap(self) -> float:
        return self.primal_obj - self.dual_obj

    @property
    def gap_rel(self) -> float:
        return self.gap / abs(self.primal_obj) if self.primal_obj else math.inf

    @property
    def gap_pct(self) -> float:
        return 100.0 * self.gap_rel


@dataclass
class IterationTrace:
    ids: tuple[int, ...]
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def header(self) -> list[str]:
        return (["iter"] + [f"lambda_{i}" for i in self.ids]
                + [f"residual_{i}" for i in self.ids]
                + ["dual_obj", "primal_obj", "gap", "gap_pct"])

    def rows(self) -> list[list[str]]:
        fmt = lambda v: f"{v:.6g}"  # noqa: E731
        return [[str(r.round)] + [fmt(v) for v in r.prices] + [fmt(v) for v in r.residuals]
                + [fmt(r.dual_obj), fmt(r.primal_obj), fmt(r.gap), fmt(r.gap_pct)]
                for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header())
            writer.writerows(self.rows())

    def to_csv(self) -> str:
        lines = [",".join(self.header())] + [",".join(r) for r in self.rows()]
        return "\n".join(lines) + "\n"


@dataclass
class DistributedRun:
    """Outcome of :func:`run_distributed`.

    ``solution``, ``prices`` and ``results`` belong to the last completed
    round (or to the initial prices when no round was run); ``next_prices``
    are the prices after that round's update.
    """

    solution: DispatchSolution
    prices: PriceVector
    trace: IterationTrace
    results: list[SubproblemResult]
    next_prices: PriceVector
    bus_log: list[str]
    rounds: int
    stopped_on_gap: bool = False
    negative_price_rounds: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.solution, self.prices, self.trace))


def run_distributed(
    case: CaseConfig,
    *,
    alpha: float | None = None,
    max_iters: int | None = None,
    gap_tol: float | None = None,
    lambda_init: Sequence[float] | None = None,
    workers: int = 1,
    schedule: Sequence[int] | None = None,
) -> DistributedRun:
    """Run synchronous price-coordination rounds.

    Keyword overrides take precedence over the case; unlike the case
    fields, ``alpha=0`` and ``max_iters=0`` are accepted (frozen prices,
    evaluation of the starting point only). ``schedule`` fixes the order in
    which agents are stepped within each phase and ``workers > 1`` solves
    local problems on a thread pool; neither changes the result.
    """
    alpha = case.alpha if alpha is None else float(alpha)
    iters = case.max_iters if max_iters is None else int(max_iters)
    gap_tol = case.gap_tol if gap_tol is None else gap_tol
    lam0 = case.lambda_init if lambda_init is None else tuple(lambda_init)
    if alpha < 0 or iters < 0:
        raise ValueError("alpha and max_iters must be >= 0")
    if len(lam0) != case.size:
        raise StructureError(f"lambda_init needs {case.size} entries")

    agents = {mg.id: MicrogridAgent(mg, case.beta, alpha, lam0[i])
              for i, mg in enumerate(case.microgrids)}
    order = list(case.ids) if schedule is None else [int(i) for i in schedule]
    if sorted(order) != list(case.ids):
        raise ValueError("schedule must be a permutation of the MG ids")
    bus = MessageBus()
    trace = IterationTrace(case.ids)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    negative_rounds: list[int] = []

    def play_round(k: int):
        for i in order:
            agents[i].announce(bus, k)
        announcements = bus.deliver()
        if pool is not None:
            list(pool.map(lambda i: agents[i].solve(announcements), order))
        else:
            for i in order:
                agents[i].solve(announcements)
        for i in order:
            agents[i].report(bus, k)
        reports = bus.deliver()
        prices = PriceVector([m.sender for m in announcements],
                             [m.payload.price for m in announcements], k)
        results = [agents[i].result for i in case.ids]
        return prices, results, reports

    try:
        if iters == 0:
            prices = PriceVector(case.ids, lam0, 0)
            results = [solve_subproblem(mg, prices, case.beta) for mg in case.microgrids]
            rec = recover_primal_detailed(case, results, prices)
            return DistributedRun(rec.solution, prices, trace, results, prices, [], 0)

        stopped = False
        for k in range(iters):
            prices, results, reports = play_round(k)
            rec = recover_primal_detailed(case, results, prices)
            record = IterationRecord(
                round=k,
                prices=prices.values,
                residuals=tuple(residuals(prices, results)),
                dual_obj=dual_objective(case, prices, results),
                primal_obj=rec.solution.objective,
                clamped=rec.clamped,
            )
            trace.records.append(record)
            if min(prices.values) < 0:
                negative_rounds.append(k)
            for i in order:
                agents[i].update(reports)
            new = [agents[i].price for i in case.ids]
            if max(abs(v) for v in new) > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"prices exceeded {DIVERGENCE_LIMIT:g} $/kW at round {k}; "
                    f"try a smaller step size than alpha={alpha:g}")
            if gap_tol is not None and record.gap_rel <= gap_tol:
                stopped = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if negative_rounds:
        log.info("prices were negative in %d rounds (first: %d)",
                 len(negative_rounds), negative_rounds[0])
    final = check_feasibility(case, rec.solution, complementarity_tol=np.inf)
    if not final.feasible:
        log.warning("recovered dispatch violates constraints by %.3g kW", final.max_violation)
    next_prices = PriceVector(case.ids, [agents[i].price for i in case.ids], prices.round + 1)
    return DistributedRun(
        solution=rec.solution,
        prices=prices,
        trace=trace,
        results=results,
        next_prices=next_prices,
        bus_log=list(bus.log),
        rounds=len(trace),
        stopped_on_gap=stopped,
        negative_price_rounds=negative_rounds,
    )


# ---------------------------------------------------------------------------
# privacy audit

ALLOWED_FIELDS = {
    "price": {"sender", "round", "type", "price"},
    "exchange": {"sender", "round", "type", "purchases", "eps_offer"},
}


@dataclass(frozen=True)
class AuditReport:
    message_count: int
    fields_by_type: dict[str, frozenset[str]]
    leak_count: int
    leaks: tuple[str, ...] = ()


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def audit_privacy(log_lines: Iterable[str | dict]) -> AuditReport:
    """Check that every recorded message carries only ids, rounds, prices and kW.

    Each unexpected field (or malformed value) anywhere in a message counts
    as one leak.
    """
    fields: dict[str, set[str]] = {}
    leaks: list[str] = []
    count = 0
    for line in log_lines:
        count += 1
        body = json.loads(line) if isinstance(line, str) else dict(line)
        kind = body.get("type")
        fields.setdefault(str(kind), set()).update(body)
        allowed = ALLOWED_FIELDS.get(kind)
        if allowed is None:
            leaks.append(f"message {count}: unknown type {kind!r}")
            continue
        for key in sorted(set(body) - allowed):
            leaks.append(f"message {count}: field {key!r}")
        for key in sorted(allowed & set(body)):
            value = body[key]
            if key == "type":
                continue
            if key == "purchases":
                if not isinstance(value, dict):
                    leaks.append(f"message {count}: purchases is not a mapping")
                    continue
                for seller, kw in value.items():
                    if not str(seller).isdigit() or not _is_number(kw):
                        leaks.append(f"message {count}: purchases entry {seller!r}")
            elif not _is_number(value):
                leaks.append(f"message {count}: field {key!r} is not numeric")
    return AuditReport(
        message_count=count,
        fields_by_type={k: frozenset(v) for k, v in fields.items()},
        leak_count=len(leaks),
        leaks=tuple(leaks),
    )
