import numpy as np
import pytest

from mmg_ems.centralized import build_network_qp
from mmg_ems.qpcore import (
    QpProblem,
    QpSolution,
    QpStatus,
    QpStructureError,
    dual_value,
    kkt_residual,
    qp_solve,
)
from oracles import enumerate_qp, random_qp


def _square_above_one():
    return QpProblem(Q=[[2.0]], q=[0.0], lb=[1.0])


def _hand_solution(x):
    return QpSolution(x=np.array([x]), duals_eq=np.zeros(0), duals_in=np.zeros(0),
                      duals_lb=np.array([2.0]), duals_ub=np.zeros(1), objective=x * x,
                      status=QpStatus.OPTIMAL)


def test_one_variable_bound():
    sol = qp_solve(_square_above_one())
    assert sol.optimal
    assert sol.x[0] == pytest.approx(1.0)
    assert sol.objective == pytest.approx(1.0)
    assert sol.duals_lb[0] == pytest.approx(2.0)


def test_projection_onto_line():
    p = QpProblem(Q=2 * np.eye(2), q=[-6.0, -6.0], A_eq=[[1.0, 1.0]], b_eq=[2.0], offset=18.0)
    sol = qp_solve(p)
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-10)
    assert sol.objective == pytest.approx(8.0)


def test_linear_program():
    # max x + y on the unit simplex corner set
    p = QpProblem(Q=np.zeros((2, 2)), q=[-1.0, -2.0], A_in=[[1.0, 1.0]], b_in=[1.0], lb=[0, 0])
    sol = qp_solve(p)
    np.testing.assert_allclose(sol.x, [0.0, 1.0], atol=1e-10)


def test_kkt_residual_of_hand_solution():
    res = kkt_residual(_square_above_one(), _hand_solution(1.0))
    assert res.max() <= 1e-12


def test_kkt_residual_after_perturbation():
    res = kkt_residual(_square_above_one(), _hand_solution(1.0 + 1e-3))
    assert res.stationarity == pytest.approx(2e-3, rel=1e-6)


def test_infeasible_detected():
    p = QpProblem(Q=np.eye(1), q=[0.0], A_in=[[1.0]], b_in=[-1.0], lb=[0.0])
    sol = qp_solve(p)
    assert sol.status is QpStatus.INFEASIBLE
    assert sol.certificate > 0


def test_unbounded_detected():
    p = QpProblem(Q=np.zeros((1, 1)), q=[-1.0], lb=[0.0])
    assert qp_solve(p).status is QpStatus.UNBOUNDED


def test_non_psd_rejected():
    with pytest.raises(QpStructureError):
        qp_solve(QpProblem(Q=[[-1.0]], q=[0.0], lb=[0.0], ub=[1.0]))


@pytest.mark.parametrize("kwargs", [
    {"Q": [[1.0, 2.0], [0.0, 1.0]], "q": [0.0, 0.0]},
    {"Q": np.eye(2), "q": [0.0]},
    {"Q": np.eye(1), "q": [0.0], "lb": [1.0], "ub": [0.0]},
    {"Q": np.eye(1), "q": [0.0], "A_eq": [[1.0]], "b_eq": [1.0, 2.0]},
])
def test_structure_errors(kwargs):
    with pytest.raises(QpStructureError):
        QpProblem(**kwargs)


def test_base_network_problem(base_case):
    qp, _ = build_network_qp(base_case)
    sol = qp_solve(qp)
    assert sol.objective == pytest.approx(70.54, abs=0.01)
    assert kkt_residual(qp, sol).max() <= 1e-6


def test_random_problems_match_oracle_and_kkt():
    rng = np.random.default_rng(3)
    for _ in range(40):
        Q, q, A_eq, b_eq, A_in, b_in, lb, ub = random_qp(rng)
        p = QpProblem(Q, q, A_eq, b_eq, A_in, b_in, lb, ub)
        sol = qp_solve(p)
        best, _ = enumerate_qp(Q, q, A_eq, b_eq, np.vstack([A_in, np.eye(len(q))]),
                               np.concatenate([b_in, ub]))
        assert abs(sol.objective - best) <= 1e-6 * max(1.0, abs(best))
        scale = max(1.0, np.max(np.abs(Q)), np.max(np.abs(q)), np.max(np.abs(A_in)))
        assert kkt_residual(p, sol).max() <= 1e-6 * scale


def test_weak_duality_of_returned_multipliers():
    rng = np.random.default_rng(4)
    for _ in range(30):
        p = QpProblem(*random_qp(rng))
        sol = qp_solve(p)
        assert dual_value(p, sol) <= sol.objective + 1e-7 * max(1.0, abs(sol.objective))


def test_deterministic(stressed_case):
    qp, _ = build_network_qp(stressed_case)
    a, b = qp_solve(qp), qp_solve(qp)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.duals_eq.tobytes() == b.duals_eq.tobytes()
    assert a.objective == b.objective


def test_problem_arrays_are_frozen():
    p = _square_above_one()
    with pytest.raises(ValueError):
        p.Q[0, 0] = 5.0
