from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import brentq

from gridmarket.errors import DimensionMismatch, Infeasible, MaxIterations
from gridmarket.network import BusSpec, ConvexCost, LineSpec, NetworkModel, QuadraticCost, derive_matrices
from gridmarket.planner import (
    PlannerPoint,
    kkt_residual,
    lagrangian_value,
    load_point,
    save_solution,
    solve_edp,
    solve_planner,
    to_planner_point,
)
from gridmarket.synthetic import random_network, single_bus, triangle, two_bus


def _solve(net):
    mats = derive_matrices(net)
    return mats, solve_planner(net, mats)


def test_single_bus_solution():
    net = single_bus(demand=1.0)
    _, sol = _solve(net)
    assert sol.q[0] == pytest.approx(1.0, abs=1e-10)
    assert sol.lam == pytest.approx(1.0, abs=1e-10)
    assert sol.eta.size == 0
    assert sol.prices[0] == pytest.approx(1.0, abs=1e-10)


def test_two_bus_uncongested_splits_evenly():
    _, sol = _solve(two_bus(flow_limit=10.0))
    np.testing.assert_allclose(sol.q, [0.5, 0.5], atol=1e-9)
    assert sol.lam == pytest.approx(0.5, abs=1e-9)
    np.testing.assert_allclose(sol.eta, 0.0, atol=1e-12)


def test_two_bus_congested_matches_grid_search():
    net = two_bus(flow_limit=0.25)
    mats, sol = _solve(net)
    # brute force: q1 + q2 = 1, flow = shift (q - d)
    grid = np.linspace(0.0, 1.0, 100_001)
    flows = np.array([(mats.shift @ (np.array([g, 1.0 - g]) - net.demand))[0] for g in grid])
    cost = 0.5 * grid**2 + 0.5 * (1.0 - grid) ** 2
    cost[np.abs(flows) > 0.25 + 1e-12] = np.inf
    best = grid[int(np.argmin(cost))]
    np.testing.assert_allclose(sol.q, [best, 1.0 - best], atol=1e-5)
    np.testing.assert_allclose(sol.q, [0.75, 0.25], atol=1e-9)
    flow = (mats.shift @ (sol.q - net.demand))[0]
    assert abs(flow) == pytest.approx(0.25, abs=1e-9)
    # marginal costs equal local prices, so the bus prices differ by H eta
    np.testing.assert_allclose(sol.prices, sol.q, atol=1e-9)
    np.testing.assert_allclose(sol.prices - sol.lam, -mats.H @ sol.eta, atol=1e-12)
    assert sol.prices[0] != pytest.approx(sol.prices[1])


def test_zero_demand_common_linear_cost():
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0, 0.0, QuadraticCost(1.0 + k, 0.7)) for k in range(3))
    net = NetworkModel(buses, (LineSpec("b0", "b1", 1.0, -1, 1), LineSpec("b1", "b2", 2.0, -1, 1)))
    _, sol = _solve(net)
    np.testing.assert_allclose(sol.q, 0.0, atol=1e-10)
    assert sol.lam == pytest.approx(0.7, abs=1e-10)
    np.testing.assert_allclose(sol.eta, 0.0, atol=1e-12)


def test_exact_single_bus_point_has_tiny_residuals():
    net = single_bus(demand=1.0)
    mats = derive_matrices(net)
    pt = PlannerPoint(
        p=np.array([1.0]),
        q=np.array([1.0]),
        omega=np.zeros(1),
        theta_tilde=np.zeros(0),
        alpha=np.array([1.0]),
        lam=1.0,
        eta=np.zeros(0),
        nu=np.zeros(1),
    )
    rep = kkt_residual(net, mats, pt)
    assert all(v < 1e-10 for v in rep.as_dict().values())


def test_lambda_perturbation_shows_in_stationarity():
    net = single_bus(demand=1.0)
    mats, sol = _solve(net)
    pt = sol.point
    moved = PlannerPoint(pt.p, pt.q, pt.omega, pt.theta_tilde, pt.alpha, pt.lam + 0.1, pt.eta, pt.nu)
    assert kkt_residual(net, mats, moved).stationarity >= 0.1 - 1e-9


def test_negative_multiplier_reported_as_dual_violation():
    net = two_bus()
    mats, sol = _solve(net)
    pt = sol.point
    eta = pt.eta.copy()
    eta[1] = -0.37
    bad = PlannerPoint(pt.p, pt.q, pt.omega, pt.theta_tilde, pt.alpha, pt.lam, eta, pt.nu)
    assert kkt_residual(net, mats, bad).dual_sign == pytest.approx(0.37)


def test_kkt_dimension_mismatch():
    net = two_bus()
    mats, sol = _solve(net)
    pt = sol.point
    with pytest.raises(DimensionMismatch):
        kkt_residual(net, mats, PlannerPoint(pt.p, pt.q, pt.omega, pt.theta_tilde, pt.alpha, pt.lam, pt.eta[:1], pt.nu))


def test_lagrangian_zero_point():
    net = two_bus(demand=(0.0, 0.0))
    mats = derive_matrices(net)
    z = np.zeros(2)
    pt = PlannerPoint(z, z, z, np.zeros(1), z, 0.0, np.zeros(2), z)
    assert lagrangian_value(net, mats, pt) == 0.0


def test_lagrangian_single_bus_value():
    net = single_bus(demand=1.0)
    mats, sol = _solve(net)
    assert lagrangian_value(net, mats, sol.point) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("net", [two_bus(flow_limit=0.25), triangle(demand=(0.0, 0.0, 1.0))], ids=["two_bus", "triangle"])
def test_saddle_inequality(net):
    mats, sol = _solve(net)
    pt = sol.point
    center = lagrangian_value(net, mats, pt)
    rng = np.random.default_rng(7)
    n, e, m = net.n_bus, net.n_line, 2 * net.n_line
    for _ in range(50):
        dual = PlannerPoint(
            pt.p,
            pt.q,
            pt.omega,
            pt.theta_tilde,
            pt.alpha + rng.normal(size=n),
            pt.lam + rng.normal(),
            np.maximum(pt.eta + rng.normal(size=m), 0.0),
            pt.nu + rng.normal(size=n),
        )
        primal = PlannerPoint(
            pt.p + rng.normal(size=n),
            pt.q + rng.normal(size=n),
            pt.omega + rng.normal(size=n),
            pt.theta_tilde + rng.normal(size=e),
            pt.alpha,
            pt.lam,
            pt.eta,
            pt.nu,
        )
        assert lagrangian_value(net, mats, dual) <= center + 1e-9
        assert center <= lagrangian_value(net, mats, primal) + 1e-9


@pytest.mark.parametrize("limit", [10.0, 0.25])
def test_edp_matches_planner_on_two_bus(limit):
    net = two_bus(flow_limit=limit)
    mats, sol = _solve(net)
    edp = solve_edp(net, mats)
    np.testing.assert_allclose(edp.q, sol.q, atol=1e-9)
    assert edp.lam == pytest.approx(sol.lam, abs=1e-9)
    np.testing.assert_allclose(edp.eta, sol.eta, atol=1e-9)


def test_edp_single_bus_dispatch_equals_demand():
    net = single_bus(demand=0.8)
    edp = solve_edp(net, derive_matrices(net))
    assert edp.q[0] == pytest.approx(0.8)


def _cyclic_infeasible():
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0, 0.0) for k in (1, 2, 3))
    # flows around a loop must sum to zero (weighted by 1/B); forcing all positive is impossible
    lines = (LineSpec("b1", "b2", 1.0, 0.1, 1.0), LineSpec("b2", "b3", 1.0, 0.1, 1.0), LineSpec("b3", "b1", 1.0, 0.1, 1.0))
    return NetworkModel(buses, lines)


def test_infeasible_limits_detected_by_both_solvers():
    net = _cyclic_infeasible()
    mats = derive_matrices(net)
    with pytest.raises(Infeasible):
        solve_planner(net, mats)
    with pytest.raises(Infeasible):
        solve_edp(net, mats)


def test_nonzero_flow_floor_is_feasible():
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0, 0.0) for k in (1, 2))
    net = NetworkModel(buses, (LineSpec("b1", "b2", 1.0, 0.2, 1.0),))
    mats = derive_matrices(net)
    sol = solve_planner(net, mats)
    edp = solve_edp(net, mats)
    assert (mats.shift @ (sol.q - net.demand))[0] == pytest.approx(0.2, abs=1e-9)
    np.testing.assert_allclose(sol.q, edp.q, atol=1e-9)


def test_max_iterations_reports_best_residual():
    net = triangle(demand=(0.0, 0.0, 1.0))
    mats = derive_matrices(net)
    with pytest.raises(MaxIterations) as info:
        solve_planner(net, mats, tol=1e-14, max_iter=5, polish=False)
    assert info.value.best_residual > 0


def test_dual_ascent_alone_converges():
    net = triangle(demand=(0.0, 0.0, 1.0))
    mats = derive_matrices(net)
    plain = solve_planner(net, mats, tol=1e-8, polish=False)
    ref = solve_edp(net, mats)
    np.testing.assert_allclose(plain.q, ref.q, atol=1e-7)


@pytest.mark.parametrize("seed", range(20))
def test_oracles_agree_on_random_networks(seed):
    rng = np.random.default_rng(1000 + seed)
    net = random_network(rng, int(rng.integers(3, 7)))
    mats = derive_matrices(net)
    sol = solve_planner(net, mats)
    edp = solve_edp(net, mats)
    assert np.max(np.abs(sol.q - edp.q)) < 1e-6
    assert sol.kkt_residual < 1e-6
    assert kkt_residual(net, mats, to_planner_point(net, mats, edp)).overall < 1e-6
    # active multipliers price binding limits only
    stacked = mats.H.T @ (sol.q - net.demand)
    for k in np.flatnonzero(sol.eta > 1e-6):
        assert stacked[k] == pytest.approx(mats.F[k], abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_uncongested_dispatch_scales_with_demand(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0, float(rng.normal()), QuadraticCost(float(rng.uniform(0.5, 3)), 0.0)) for k in range(n))
    lines = tuple(LineSpec(f"b{k}", f"b{k + 1}", 1.0) for k in range(n - 1))
    net = NetworkModel(buses, lines)
    mats = derive_matrices(net)
    q1 = solve_planner(net, mats).q
    q2 = solve_planner(net.with_demand(2 * net.demand), mats).q
    np.testing.assert_allclose(q2, 2 * q1, atol=1e-9)


def _quartic_net():
    def cost(scale):
        return ConvexCost(
            value=lambda q: scale * (q**2 / 2 + q**4 / 4),
            gradient=lambda q: scale * (q + q**3),
            inverse_gradient=lambda g: brentq(lambda q: scale * (q + q**3) - g, -1e3, 1e3, xtol=1e-15),
        )

    buses = (
        BusSpec("b1", 1.0, 1.0, 0.0, cost(1.0)),
        BusSpec("b2", 1.0, 1.0, 0.0, cost(2.0)),
        BusSpec("b3", 1.0, 1.0, 1.5, cost(1.5)),
    )
    lines = (LineSpec("b1", "b2", 1.0, -1, 1), LineSpec("b2", "b3", 1.0, -1, 1), LineSpec("b1", "b3", 1.0, -0.3, 0.3))
    return NetworkModel(buses, lines)


def test_generic_convex_costs_solved_by_both_routes():
    net = _quartic_net()
    mats = derive_matrices(net)
    sol = solve_planner(net, mats, tol=1e-8)
    edp = solve_edp(net, mats)
    assert sol.kkt_residual <= 1e-8
    np.testing.assert_allclose(sol.q, edp.q, atol=1e-7)
    np.testing.assert_allclose(net.costs.gradient(sol.q), sol.prices, atol=1e-8)


def test_solution_json_round_trip(tmp_path):
    net = triangle(demand=(0.0, 0.0, 1.0))
    mats, sol = _solve(net)
    save_solution(sol, tmp_path / "s.json")
    pt = load_point(tmp_path / "s.json")
    for name in ("p", "q", "omega", "theta_tilde", "alpha", "eta", "nu"):
        np.testing.assert_array_equal(getattr(pt, name), getattr(sol.point, name))
    assert kkt_residual(net, mats, pt).overall == sol.kkt_residual


def test_incentive_compatibility_of_solution():
    net = triangle(demand=(0.0, 0.0, 1.0))
    _, sol = _solve(net)
    np.testing.assert_allclose(net.costs.gradient(sol.q), sol.prices, atol=1e-9)
    np.testing.assert_array_equal(sol.point.omega, 0.0)
    np.testing.assert_array_equal(sol.point.nu, 0.0)
