import numpy as np
import pytest

from mmg_ems.centralized import (
    ComplementarityPattern,
    all_patterns,
    attribute_costs,
    solve_individual,
    solve_modified_centralized,
    solve_original_centralized,
    solve_original_centralized_detailed,
)
from mmg_ems.model import CaseConfig, InfeasibleCaseError, MicrogridParams, check_feasibility
from oracles import brute_force_original, random_case


def _twin_case():
    mg = dict(a=0.01, b=0.1, c=1.0, demand=50, gen_max=100, pcc_max=50,
              buy_price=5.0, sell_price=0.01)
    return CaseConfig(microgrids=(MicrogridParams(id=1, **mg), MicrogridParams(id=2, **mg)),
                      alpha=0.01, beta=0.1)


def test_patterns_cover_every_pair_in_order():
    pats = all_patterns((1, 2, 3))
    assert len(pats) == 8
    assert pats[0].zeroed == ((1, 2), (1, 3), (2, 3))
    assert pats[-1].zeroed == ((2, 1), (3, 1), (3, 2))
    with pytest.raises(ValueError):
        ComplementarityPattern(((1, 2),), ((1, 3),))


def test_base_modified_dispatch(base_case):
    sol = solve_modified_centralized(base_case)
    assert np.max(sol.exchange) < 1e-6
    np.testing.assert_allclose(sol.gen, [110, 25, 0], atol=0.1)
    np.testing.assert_allclose(sol.eps, sol.exchange.sum(axis=1))
    assert sol.prices is not None and len(sol.prices) == 3


def test_stressed_modified_exchanges(stressed_case):
    sol = solve_modified_centralized(stressed_case)
    assert sol.exchange[0, 1] == pytest.approx(26.67, abs=0.5)
    assert sol.exchange[2, 0] == pytest.approx(36.67, abs=0.5)
    assert sol.exchange[2, 1] == pytest.approx(63.33, abs=0.5)


def test_symmetric_twins_do_not_trade():
    sol = solve_modified_centralized(_twin_case())
    assert np.max(sol.exchange) < 1e-9
    assert np.max(sol.grid_buy) < 1e-9 and np.max(sol.grid_sell) < 1e-9
    np.testing.assert_allclose(sol.gen, [50, 50])


def test_original_results(base_case, stressed_case):
    assert solve_original_centralized(base_case).objective == pytest.approx(70.54, abs=0.01)
    detailed = solve_original_centralized_detailed(stressed_case)
    assert detailed.solution.objective == pytest.approx(11580.64, abs=1.0)
    assert detailed.solution.transfer_cost_total == 0.0
    assert detailed.patterns_tried == 8


def test_original_parallel_matches_serial(stressed_case):
    a = solve_original_centralized_detailed(stressed_case)
    b = solve_original_centralized_detailed(stressed_case, max_workers=4)
    assert a.pattern == b.pattern
    assert a.solution.objective == b.solution.objective


def test_original_pair_guard():
    mgs = tuple(MicrogridParams(id=i + 1, a=0.01, b=1, c=0, demand=1, gen_max=5, pcc_max=5,
                                buy_price=2, sell_price=1) for i in range(7))
    with pytest.raises(ValueError, match="limited"):
        solve_original_centralized(CaseConfig(microgrids=mgs, alpha=0.1, beta=0.1))


def test_original_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(11)
    for _ in range(6):
        case = random_case(rng, n=3)
        exact = solve_original_centralized(case).objective
        brute = brute_force_original(case)
        assert exact <= brute + 1e-6
        assert abs(brute - exact) <= 5e-3 * abs(exact)


def test_original_below_modified_without_transfer(stressed_case):
    rng = np.random.default_rng(12)
    for case in [stressed_case] + [random_case(rng, n=3) for _ in range(5)]:
        mod = solve_modified_centralized(case)
        assert solve_original_centralized(case).objective <= (
            mod.objective - mod.transfer_cost_total + 1e-6)


def test_infeasible_case_names_mg(base_case):
    case = base_case.with_microgrids(demand=[210, 125, 500])
    with pytest.raises(InfeasibleCaseError) as info:
        solve_modified_centralized(case)
    assert info.value.mg_id == 3


def test_individual_costs(coop_case):
    res = solve_individual(coop_case)
    assert res.costs[1] == pytest.approx(50.52, abs=0.05)
    assert res.costs[2] == pytest.approx(9787.79, abs=0.05)
    assert res.costs[3] == pytest.approx(24.86, abs=0.05)
    assert res.total == pytest.approx(9863.17, abs=0.5)
    assert check_feasibility(coop_case, res.solution).feasible


def test_individual_zero_demand_costs_constant(coop_case):
    case = coop_case.with_microgrids(demand=[0, 0, 0])
    res = solve_individual(case)
    for mg in case.microgrids:
        assert res.costs[mg.id] == pytest.approx(mg.c)


def test_individual_infeasible_names_mg(stressed_case):
    with pytest.raises(InfeasibleCaseError) as info:
        solve_individual(stressed_case)
    assert info.value.mg_id in (1, 2)


def test_cooperative_attribution(coop_case):
    sol = solve_modified_centralized(coop_case)
    shares = attribute_costs(coop_case, sol)
    assert sum(shares.values()) == pytest.approx(sol.objective, abs=1e-6)
    assert sol.objective == pytest.approx(6716.93, abs=1.0)
    for mg_id, expected in ((1, -980.68), (2, 7673.75), (3, 23.86)):
        assert shares[mg_id] == pytest.approx(expected, abs=0.05)


def test_cooperation_never_costs_more():
    rng = np.random.default_rng(13)
    checked = 0
    while checked < 8:
        case = random_case(rng)
        if any(mg.demand > mg.gen_max for mg in case.microgrids):
            continue
        assert solve_modified_centralized(case).objective <= solve_individual(case).total + 1e-6
        checked += 1
