"""Dense active-set solver for small convex quadratic programs.

Problem form::

    minimize    0.5 x'Qx + q'x + offset
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lb <= x <= ub          (entries may be -inf / +inf)

Sign convention for the returned multipliers (all inequality ones >= 0)::

    Qx + q + A_eq' y + A_in' z + w_ub - w_lb = 0

The method is a primal active-set iteration with explicit handling of
singular reduced Hessians: when the objective is flat along part of the
working-set null space the iterate follows a descent ray to the nearest
blocking constraint. That makes it usable for LPs too, which is how phase 1
(finding a feasible start) is solved.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import StructureError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500


class QpStructureError(StructureError):
    """Malformed problem data, or a Hessian that is not PSD."""


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


def _ro(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class QpProblem:
    Q: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise QpStructureError(f"Q must be square, got {Q.shape}")
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if q.shape != (n,):
            raise QpStructureError(f"q has length {q.size}, expected {n}")
        scale = max(1.0, float(np.max(np.abs(Q), initial=0.0)))
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-12 * scale:
            raise QpStructureError("Q is not symmetric")

        def rows(A, b, label):
            if A is None:
                if b is not None and np.size(b):
                    raise QpStructureError(f"{label}: right-hand side given without matrix")
                return np.zeros((0, n)), np.zeros(0)
            A = np.asarray(A, dtype=float).reshape(-1, n) if np.size(A) else np.zeros((0, n))
            b = np.asarray(b, dtype=float).reshape(-1)
            if A.shape[0] != b.shape[0]:
                raise QpStructureError(f"{label}: {A.shape[0]} rows but {b.shape[0]} rhs entries")
            return A, b

        A_eq, b_eq = rows(self.A_eq, self.b_eq, "A_eq")
        A_in, b_in = rows(self.A_in, self.b_in, "A_in")
        lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1)
        ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1)
        if lb.shape != (n,) or ub.shape != (n,):
            raise QpStructureError("bounds must have one entry per variable")
        if np.any(lb > ub):
            raise QpStructureError("lower bound exceeds upper bound")
        if np.any(np.isnan(lb)) or np.any(np.isnan(ub)):
            raise QpStructureError("bounds contain NaN")
        for name, value in (("Q", Q), ("q", q), ("A_eq", A_eq), ("b_eq", b_eq),
                            ("A_in", A_in), ("b_in", b_in)):
            if not np.all(np.isfinite(value)):
                raise QpStructureError(f"{name} has non-finite entries")
            object.__setattr__(self, name, _ro(value))
        object.__setattr__(self, "lb", _ro(lb))
        object.__setattr__(self, "ub", _ro(ub))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n_vars(self) -> int:
        return self.Q.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.q @ x + self.offset)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    duals_eq: np.ndarray
    duals_in: np.ndarray
    duals_lb: np.ndarray
    duals_ub: np.ndarray
    objective: float
    status: QpStatus
    iterations: int = 0
    certificate: float = 0.0  # phase-1 total violation when infeasible

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    primal_eq: float
    primal_in: float
    comp_slack: float
    dual: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_in, self.comp_slack, self.dual)


def check_psd(Q: np.ndarray, shift: float = 1e-10) -> None:
    """Raise :class:`QpStructureError` unless ``Q + shift*I`` factorises."""
    n = Q.shape[0]
    if n == 0:
        return
    try:
        np.linalg.cholesky(Q + shift * max(1.0, float(np.max(np.abs(Q)))) * np.eye(n))
    except np.linalg.LinAlgError:
        raise QpStructureError("Q is not positive semidefinite") from None


def _null_space(A: np.ndarray, n: int, rtol: float = 1e-12) -> np.ndarray:
    if A.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > rtol * max(1.0, s[0])))
    return vt[rank:].T


def _independent_subset(E: np.ndarray, G: np.ndarray, candidates) -> list[int]:
    """Greedily keep the candidate rows of ``G`` that stay independent of ``E``."""
    basis: list[np.ndarray] = []

    def absorb(row) -> bool:
        r = np.array(row, dtype=float)
        norm = np.linalg.norm(r)
        if norm == 0.0:
            return False
        for _ in range(2):  # re-orthogonalise once for stability
            for b in basis:
                r -= (b @ r) * b
        rn = np.linalg.norm(r)
        if rn <= 1e-10 * norm:
            return False
        basis.append(r / rn)
        return True

    for row in E:
        absorb(row)
    return [int(i) for i in candidates if absorb(G[i])]


@dataclass
class _ActiveSetResult:
    x: np.ndarray
    working: list[int]
    y: np.ndarray
    z: np.ndarray
    status: QpStatus
    iterations: int


def _active_set(Q, c, E, e, G, h, x, working, tol, max_iter) -> _ActiveSetResult:
    """Primal active-set iterations from a feasible ``x``.

    ``working`` lists rows of ``G`` treated as equalities; it must be
    linearly independent together with ``E``.
    """
    n = Q.shape[0]
    working = list(working)
    q_scale = max(1.0, float(np.max(np.abs(Q), initial=0.0)))
    curv_tol = 1e-12 * q_scale
    degenerate_run = 0
    x = np.array(x, dtype=float)

    for it in range(max_iter):
        A = np.vstack([E, G[working]]) if working else E
        g = Q @ x + c
        g_scale = max(1.0, float(np.max(np.abs(g))))
        grad_tol = 1e-3 * tol * g_scale
        Z = _null_space(A, n)

        p = None
        ray = False
        if Z.shape[1]:
            gz = Z.T @ g
            if np.max(np.abs(gz)) > grad_tol:
                H = Z.T @ Q @ Z
                mu, V = np.linalg.eigh(0.5 * (H + H.T))
                flat = mu <= curv_tol
                gz_flat = V[:, flat].T @ gz
                if flat.any() and np.max(np.abs(gz_flat), initial=0.0) > grad_tol:
                    p = -Z @ (V[:, flat] @ gz_flat)
                    ray = True
                else:
                    inv = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, mu))
                    p = -Z @ (V @ (inv * (V.T @ gz)))

        if p is None:
            mult = np.linalg.lstsq(A.T, -g, rcond=None)[0] if A.shape[0] else np.zeros(0)
            y, z = mult[: E.shape[0]], mult[E.shape[0]:]
            dual_tol = 1e-3 * tol * g_scale
            negative = [k for k in range(len(working)) if z[k] < -dual_tol]
            if not negative:
                return _ActiveSetResult(x, working, y, z, QpStatus.OPTIMAL, it)
            if degenerate_run > 2 * n + 10:
                # Bland-style choice to break cycling on degenerate vertices.
                drop = min(negative, key=lambda k: working[k])
            else:
                drop = min(negative, key=lambda k: (z[k], working[k]))
            working.pop(drop)
            continue

        Gp = G @ p
        slack = h - G @ x
        step = np.inf if ray else 1.0
        block = -1
        p_scale = max(1e-300, float(np.max(np.abs(p))))
        in_w = np.zeros(G.shape[0], dtype=bool)
        in_w[working] = True
        for i in np.flatnonzero(~in_w & (Gp > 1e-14 * p_scale * (1.0 + np.abs(G).sum(axis=1)))):
            ratio = max(slack[i], 0.0) / Gp[i]
            if ratio < step:
                step, block = ratio, int(i)
        if not np.isfinite(step):
            return _ActiveSetResult(x, working, np.zeros(E.shape[0]), np.zeros(len(working)),
                                    QpStatus.UNBOUNDED, it)
        degenerate_run = degenerate_run + 1 if step == 0.0 else 0
        x = x + step * p
        if block >= 0:
            working.append(block)

    return _ActiveSetResult(x, working, np.zeros(E.shape[0]), np.zeros(len(working)),
                            QpStatus.MAX_ITER, max_iter)


def _stack_inequalities(p: QpProblem):
    """All one-sided constraints as ``G x <= h`` plus a row-kind map."""
    n = p.n_vars
    ub_idx = np.flatnonzero(np.isfinite(p.ub))
    lb_idx = np.flatnonzero(np.isfinite(p.lb))
    eye = np.eye(n)
    G = np.vstack([p.A_in, eye[ub_idx], -eye[lb_idx]])
    h = np.concatenate([p.b_in, p.ub[ub_idx], -p.lb[lb_idx]])
    return G, h, ub_idx, lb_idx


def _phase_one(p: QpProblem, tol: float, max_iter: int):
    """Find a feasible point by minimising total violation of the general rows.

    Bounds are kept hard. Returns ``(x, violation, iterations)``.
    """
    n = p.n_vars
    m_in, m_eq = p.A_in.shape[0], p.A_eq.shape[0]
    x0 = np.clip(np.zeros(n), p.lb, p.ub)
    if m_in + m_eq == 0:
        return x0, 0.0, 0
    r_in = p.A_in @ x0 - p.b_in
    r_eq = p.A_eq @ x0 - p.b_eq
    if np.all(r_in <= 0) and np.all(r_eq == 0):
        return x0, 0.0, 0

    # variables: x, s (one per inequality row), t+ and t- (per equality row)
    N = n + m_in + 2 * m_eq
    c = np.concatenate([np.zeros(n), np.ones(m_in + 2 * m_eq)])
    E = np.hstack([p.A_eq, np.zeros((m_eq, m_in)), np.eye(m_eq), -np.eye(m_eq)])
    lb = np.concatenate([p.lb, np.zeros(m_in + 2 * m_eq)])
    ub = np.concatenate([p.ub, np.full(m_in + 2 * m_eq, np.inf)])
    eye = np.eye(N)
    ub_idx = np.flatnonzero(np.isfinite(ub))
    lb_idx = np.flatnonzero(np.isfinite(lb))
    G = np.vstack([
        np.hstack([p.A_in, -np.eye(m_in), np.zeros((m_in, 2 * m_eq))]),
        eye[ub_idx],
        -eye[lb_idx],
    ])
    h = np.concatenate([p.b_in, ub[ub_idx], -lb[lb_idx]])
    start = np.concatenate([x0, np.maximum(r_in, 0.0), np.maximum(-r_eq, 0.0), np.maximum(r_eq, 0.0)])
    active = np.flatnonzero(np.abs(G @ start - h) <= 0.0)
    working = _independent_subset(E, G, active)
    res = _active_set(np.zeros((N, N)), c, E, p.b_eq, G, h, start, working, tol, max_iter)
    z = res.x
    violation = float(np.sum(np.maximum(p.A_in @ z[:n] - p.b_in, 0.0))
                      + np.sum(np.abs(p.A_eq @ z[:n] - p.b_eq)))
    return z[:n], violation, res.iterations


def qp_solve(p: QpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> QpSolution:
    """Solve a convex QP; see the module docstring for conventions."""
    check_psd(p.Q)
    n = p.n_vars
    m_eq, m_in = p.A_eq.shape[0], p.A_in.shape[0]
    G, h, ub_idx, lb_idx = _stack_inequalities(p)

    x0, violation, it1 = _phase_one(p, tol, max_iter)
    rhs_scale = max(1.0, float(np.max(np.abs(np.concatenate([p.b_eq, p.b_in])), initial=0.0)))
    if violation > 1e-9 * rhs_scale:
        return QpSolution(
            x=_ro(x0), duals_eq=_ro(np.zeros(m_eq)), duals_in=_ro(np.zeros(m_in)),
            duals_lb=_ro(np.zeros(n)), duals_ub=_ro(np.zeros(n)),
            objective=np.nan, status=QpStatus.INFEASIBLE, iterations=it1, certificate=violation,
        )

    active = np.flatnonzero(np.abs(G @ x0 - h) <= 1e-12 * rhs_scale)
    working = _independent_subset(p.A_eq, G, active)
    res = _active_set(p.Q, p.q, p.A_eq, p.b_eq, G, h, x0, working, tol, max_iter)
    x = res.x
    y, z = res.y, res.z

    if res.status is QpStatus.OPTIMAL:
        # Pull x exactly onto the active face, then refresh the multipliers.
        A = np.vstack([p.A_eq, G[res.working]]) if res.working else p.A_eq
        b = np.concatenate([p.b_eq, h[res.working]])
        if A.shape[0]:
            x = x + np.linalg.lstsq(A, b - A @ x, rcond=None)[0]
            mult = np.linalg.lstsq(A.T, -(p.Q @ x + p.q), rcond=None)[0]
            y, z = mult[:m_eq], mult[m_eq:]

    duals_in = np.zeros(m_in)
    duals_ub = np.zeros(n)
    duals_lb = np.zeros(n)
    if res.status is QpStatus.OPTIMAL:
        n_ub = len(ub_idx)
        for k, row in enumerate(res.working):
            if row < m_in:
                duals_in[row] = z[k]
            elif row < m_in + n_ub:
                duals_ub[ub_idx[row - m_in]] = z[k]
            else:
                duals_lb[lb_idx[row - m_in - n_ub]] = z[k]
    else:
        y = np.zeros(m_eq)

    objective = p.objective(x) if res.status is QpStatus.OPTIMAL else np.nan
    if res.status is QpStatus.UNBOUNDED:
        objective = -np.inf
    return QpSolution(
        x=_ro(x), duals_eq=_ro(y), duals_in=_ro(duals_in), duals_lb=_ro(duals_lb),
        duals_ub=_ro(duals_ub), objective=objective, status=res.status,
        iterations=it1 + res.iterations,
    )


def kkt_residual(p: QpProblem, s: QpSolution) -> KktResidual:
    """Recompute KKT residuals (max-norms) of ``s`` from the problem data alone."""
    x = np.asarray(s.x, dtype=float)
    if x.shape != (p.n_vars,):
        raise QpStructureError("solution dimension does not match problem")
    grad = (p.Q @ x + p.q + p.A_eq.T @ s.duals_eq + p.A_in.T @ s.duals_in
            + s.duals_ub - s.duals_lb)
    r_eq = p.A_eq @ x - p.b_eq
    r_in = p.A_in @ x - p.b_in
    finite_ub = np.isfinite(p.ub)
    finite_lb = np.isfinite(p.lb)
    # infinite bounds contribute a zero residual
    r_ub = np.where(finite_ub, x - np.where(finite_ub, p.ub, 0.0), 0.0)
    r_lb = np.where(finite_lb, np.where(finite_lb, p.lb, 0.0) - x, 0.0)
    primal_in = max(0.0, float(np.max(r_in, initial=0.0)),
                    float(np.max(r_ub, initial=0.0)), float(np.max(r_lb, initial=0.0)))
    comp = max(
        float(np.max(np.abs(s.duals_in * r_in), initial=0.0)),
        float(np.max(np.abs(s.duals_ub * r_ub), initial=0.0)),
        float(np.max(np.abs(s.duals_lb * r_lb), initial=0.0)),
    )
    # Multipliers on infinite bounds must vanish; count them as stationarity error.
    stray = max(float(np.max(np.abs(s.duals_ub[~finite_ub]), initial=0.0)),
                float(np.max(np.abs(s.duals_lb[~finite_lb]), initial=0.0)))
    dual = max(0.0, -float(np.min(np.concatenate([s.duals_in, s.duals_ub, s.duals_lb]),
                                  initial=0.0)))
    return KktResidual(
        stationarity=max(float(np.max(np.abs(grad), initial=0.0)), stray),
        primal_eq=float(np.max(np.abs(r_eq), initial=0.0)),
        primal_in=primal_in,
        comp_slack=comp,
        dual=dual,
    )


def dual_value(p: QpProblem, s: QpSolution) -> float:
    """Lagrangian dual function evaluated at the multipliers carried by ``s``.

    Returns ``-inf`` when the Lagrangian is unbounded below in ``x``.
    """
    lin = p.q + p.A_eq.T @ s.duals_eq + p.A_in.T @ s.duals_in + s.duals_ub - s.duals_lb
    const = (p.offset - p.b_eq @ s.duals_eq - p.b_in @ s.duals_in
             - np.where(np.isfinite(p.ub), p.ub, 0.0) @ s.duals_ub
             + np.where(np.isfinite(p.lb), p.lb, 0.0) @ s.duals_lb)
    if p.n_vars == 0:
        return float(const)
    x = np.linalg.lstsq(p.Q, -lin, rcond=None)[0]
    if np.max(np.abs(p.Q @ x + lin)) > 1e-9 * max(1.0, float(np.max(np.abs(lin)))):
        return -np.inf
    return float(0.5 * x @ p.Q @ x + lin @ x + const)
