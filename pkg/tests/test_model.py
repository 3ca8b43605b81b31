import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmg_ems.model import (
    CaseConfig,
    MicrogridParams,
    StructureError,
    check_feasibility,
    evaluate_objective,
    generation_cost,
    make_solution,
    transfer_cost,
)
from mmg_ems.scenarios import builtin_case

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _zero_dispatch(case):
    n = case.size
    return make_solution(case, np.zeros(n), np.zeros((n, n)), np.zeros(n), np.zeros(n))


def _base_table_dispatch(case):
    return make_solution(case, [110, 25, 0], np.zeros((3, 3)), [99.99, 99.99, 75.0], [0, 0, 0])


def test_generation_cost_examples(base_case):
    assert generation_cost(base_case.mg(1), 110) == pytest.approx(26.7052, abs=1e-9)
    assert generation_cost(base_case.mg(3), 0) == 7.5
    total = sum(generation_cost(base_case.mg(i + 1), p) for i, p in enumerate((110, 25, 0)))
    assert total == pytest.approx(47.99, abs=0.01)


def test_generation_cost_does_not_clamp(base_case):
    mg = base_case.mg(1)
    assert generation_cost(mg, -10) == pytest.approx(mg.a * 100 - mg.b * 10 + mg.c)


def test_transfer_cost_examples():
    assert transfer_cost(0.1, 0.0) == 0.0
    assert transfer_cost(0.1, 26.67) == pytest.approx(71.13, abs=0.01)
    assert float(np.sum(transfer_cost(0.1, np.array([26.67, 36.67, 63.33])))) == pytest.approx(
        606.67, abs=0.05)


def test_objective_of_table_dispatch(base_case):
    assert evaluate_objective(base_case, _base_table_dispatch(base_case)).total == pytest.approx(
        70.54, abs=0.01)


def test_objective_of_zero_dispatch_is_constant_terms(base_case):
    assert evaluate_objective(base_case, _zero_dispatch(base_case)).total == pytest.approx(17.153)


def test_objective_of_stressed_table_dispatch(stressed_case):
    ex = np.zeros((3, 3))
    ex[0, 1], ex[2, 0], ex[2, 1] = 26.67, 36.67, 63.33
    # balance fixes the generation: P = D + exports - imports - grid_buy
    D = [mg.demand for mg in stressed_case.microgrids]
    gen = [D[0] + 26.67 - 36.67, D[1] - 26.67 - 63.33 - 85.0, D[2] + 36.67 + 63.33]
    sol = make_solution(stressed_case, gen, ex, [0, 85.0, 0], [0, 0, 0])
    assert evaluate_objective(stressed_case, sol).total == pytest.approx(12187.31, abs=1.0)


def test_objective_dimension_mismatch(base_case, stressed_case):
    two = CaseConfig(microgrids=base_case.microgrids[:2], alpha=0.1, beta=0.1)
    with pytest.raises(StructureError):
        evaluate_objective(two, _zero_dispatch(base_case))


def test_table_dispatch_feasible_at_table_tolerance(base_case):
    assert check_feasibility(base_case, _base_table_dispatch(base_case), tol=0.1).feasible


def test_generation_violation_detected(base_case):
    mg = base_case.mg(1)
    sol = make_solution(base_case, [mg.gen_max + 1, 25, 0], np.zeros((3, 3)),
                        [99.99 - 91, 99.99, 75], [0, 0, 0])
    report = check_feasibility(base_case, sol, tol=0.1)
    assert report.gen_violation == pytest.approx(1.0)
    assert not report.feasible


def test_simultaneous_exchange_detected(base_case):
    ex = np.zeros((3, 3))
    ex[0, 1] = ex[1, 0] = 5.0
    sol = make_solution(base_case, [115, 30, 0], ex, [94.99, 94.99, 75], [0, 0, 0])
    report = check_feasibility(base_case, sol, tol=0.1)
    assert report.complementarity_violation == pytest.approx(25.0)
    assert not report.feasible
    assert check_feasibility(base_case, sol, tol=0.1, complementarity_tol=np.inf).feasible


def test_diagonal_exchange_rejected(base_case):
    ex = np.eye(3)
    with pytest.raises(ValueError):
        make_solution(base_case, [0, 0, 0], ex, [0, 0, 0], [0, 0, 0])


def test_solution_arrays_are_read_only(base_case):
    sol = _zero_dispatch(base_case)
    with pytest.raises(ValueError):
        sol.gen[0] = 1.0


@pytest.mark.parametrize("field,value", [("a", -1.0), ("demand", -5.0), ("gen_max", float("nan"))])
def test_microgrid_validation(base_case, field, value):
    with pytest.raises(ValueError):
        dataclasses.replace(base_case.mg(1), **{field: value})


def test_sell_above_buy_only_warns(base_case):
    with pytest.warns(UserWarning):
        dataclasses.replace(base_case.mg(1), sell_price=10.0)


@pytest.mark.parametrize("changes,message", [
    ({"alpha": -1.0}, "alpha must be > 0"),
    ({"beta": 0.0}, "beta must be > 0"),
    ({"max_iters": 0}, "max_iters"),
    ({"lambda_init": (0.0, 0.0)}, "lambda_init"),
])
def test_case_validation(base_case, changes, message):
    with pytest.raises(ValueError, match=message):
        dataclasses.replace(base_case, **changes)


def test_case_defaults(base_case):
    case = CaseConfig(microgrids=base_case.microgrids, alpha=0.1, beta=0.1)
    assert case.max_iters == 1000
    assert case.lambda_init == (0.0, 0.0, 0.0)
    assert case.gap_tol is None


@given(a=st.floats(0, 10), b=finite, c=finite, p1=finite, p2=finite, t=st.floats(0, 1))
def test_generation_cost_is_convex(a, b, c, p1, p2, t):
    mg = MicrogridParams(id=1, a=a, b=b, c=c, demand=0, gen_max=1, pcc_max=1,
                         buy_price=1, sell_price=0)
    lhs = generation_cost(mg, t * p1 + (1 - t) * p2)
    rhs = t * generation_cost(mg, p1) + (1 - t) * generation_cost(mg, p2)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))


dispatch = st.lists(st.floats(0, 300), min_size=3, max_size=3)


@settings(max_examples=50)
@given(gen=dispatch, buy=dispatch, sell=dispatch,
       ex=st.lists(st.floats(0, 100), min_size=6, max_size=6))
def test_objective_decomposes(gen, buy, sell, ex):
    case = builtin_case("stressed")
    matrix = np.zeros((3, 3))
    matrix[~np.eye(3, dtype=bool)] = ex
    sol = make_solution(case, gen, matrix, buy, sell)
    br = evaluate_objective(case, sol)
    assert br.total == br.gen_cost_total + br.transfer_cost_total + br.grid_buy_cost - br.grid_sell_revenue


@given(gen=dispatch, buy=dispatch, sell=dispatch)
def test_transfer_flag_irrelevant_without_exchanges(gen, buy, sell):
    case = builtin_case("base")
    sol = make_solution(case, gen, np.zeros((3, 3)), buy, sell)
    assert evaluate_objective(case, sol, True).total == evaluate_objective(case, sol, False).total
