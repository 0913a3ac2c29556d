from __future__ import annotations

import json

import numpy as np
import pytest
from scipy.optimize import brentq

from gridmarket.errors import NumericalError, ParseError, UnbalancedInjection, ValidationError
from gridmarket.network import (
    BusSpec,
    ConvexCost,
    LineSpec,
    NetworkModel,
    QuadraticCost,
    angles_from_injection,
    derive_matrices,
    flows_from_injection,
    laplacian_pinv,
    load_network,
    network_from_dict,
    save_network,
)
from gridmarket.synthetic import random_network, triangle, two_bus


def _two_bus_dict(**line):
    ln = {"from": "b1", "to": "b2", "susceptance": 1.0, "flow_min": -1.0, "flow_max": 1.0}
    ln.update(line)
    return {
        "buses": [
            {"id": "b1", "inertia": 1.0, "damping": 1.0, "demand": 0.0, "cost": {"c": 1.0, "c_bar": 0.0}},
            {"id": "b2", "inertia": 1.0, "damping": 1.0, "demand": 0.0, "cost": {"c": 1.0, "c_bar": 0.0}},
        ],
        "lines": [ln],
    }


def _ring(b=1.0):
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0) for k in (1, 2, 3))
    lines = (LineSpec("b1", "b2", b), LineSpec("b2", "b3", b), LineSpec("b1", "b3", b))
    return NetworkModel(buses, lines)


def test_load_minimal_network(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(_two_bus_dict()))
    net = load_network(path)
    assert net.n_bus == 2 and net.n_line == 1


def test_reversed_duplicate_line_rejected():
    data = _two_bus_dict()
    data["lines"].append({"from": "b2", "to": "b1", "susceptance": 1.0})
    with pytest.raises(ValidationError):
        network_from_dict(data)


def test_zero_inertia_rejected():
    data = _two_bus_dict()
    data["buses"][0]["inertia"] = 0.0
    with pytest.raises(ValidationError):
        network_from_dict(data)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d["lines"][0].update(susceptance=-1.0),
        lambda d: d["lines"][0].update(flow_min=2.0),
        lambda d: d["lines"][0].update(to="b1"),
        lambda d: d["lines"][0].update(to="nowhere"),
        lambda d: d["buses"][1].update(id="b1"),
        lambda d: d["buses"][0].update(damping=-0.1),
    ],
)
def test_invalid_parameters_rejected(mutate):
    data = _two_bus_dict()
    mutate(data)
    with pytest.raises(ValidationError):
        network_from_dict(data)


def test_disconnected_graph_rejected():
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0) for k in range(3))
    with pytest.raises(ValidationError):
        NetworkModel(buses, (LineSpec("b0", "b1", 1.0),))


@pytest.mark.parametrize("text", ["{not json", '{"lines": []}', '{"buses": [{"id": "a", "inertia": "x", "damping": 1}]}'])
def test_malformed_files_raise_parse_error(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ParseError):
        load_network(path)


def test_missing_file_raises_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_network(tmp_path / "absent.json")


def test_round_trip_preserves_network(tmp_path):
    net = triangle()
    save_network(net, tmp_path / "t.json")
    assert load_network(tmp_path / "t.json") == net


def test_unbounded_limits_round_trip(tmp_path):
    data = _two_bus_dict()
    del data["lines"][0]["flow_min"], data["lines"][0]["flow_max"]
    net = network_from_dict(data)
    assert net.flow_max[0] == np.inf and net.flow_min[0] == -np.inf
    save_network(net, tmp_path / "n.json")
    assert load_network(tmp_path / "n.json") == net


def test_two_bus_laplacian_and_pinv():
    mats = derive_matrices(two_bus())
    np.testing.assert_array_equal(mats.L, [[1.0, -1.0], [-1.0, 1.0]])
    np.testing.assert_allclose(mats.L_pinv, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
    np.testing.assert_allclose(mats.shift, [[0.5, -0.5]], atol=1e-15)


def test_triangle_laplacian_entries():
    mats = derive_matrices(_ring())
    np.testing.assert_allclose(np.diag(mats.L), 2.0)
    off = mats.L[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, -1.0)
    assert np.max(np.abs(np.ones(3) @ mats.H)) < 1e-12


def test_triangle_matrices_match_dense_recomputation():
    net = _ring()
    mats = derive_matrices(net)
    C = np.array([[1, 0, 1], [-1, 1, 0], [0, -1, -1]], dtype=float)
    np.testing.assert_array_equal(mats.C, C)
    pinv = np.linalg.pinv(C @ C.T)
    np.testing.assert_allclose(mats.L_pinv, pinv, atol=1e-12)
    np.testing.assert_allclose(mats.H, np.hstack([(C.T @ pinv).T, -(C.T @ pinv).T]), atol=1e-12)


def test_matrices_are_read_only():
    mats = derive_matrices(two_bus())
    with pytest.raises(ValueError):
        mats.L[0, 0] = 3.0


def test_laplacian_with_two_null_directions_rejected():
    L = np.zeros((3, 3))
    L[:2, :2] = [[1, -1], [-1, 1]]
    with pytest.raises(NumericalError):
        laplacian_pinv(L)


def test_single_bus_has_empty_line_matrices():
    net = NetworkModel((BusSpec("a", 1.0, 1.0),))
    mats = derive_matrices(net)
    assert mats.H.shape == (1, 0) and mats.F.shape == (0,)
    np.testing.assert_array_equal(mats.L_pinv, [[0.0]])


def test_two_bus_flow():
    mats = derive_matrices(two_bus())
    np.testing.assert_allclose(flows_from_injection(mats, [1.0, -1.0]), [1.0])


def test_zero_injection_zero_flow():
    mats = derive_matrices(triangle())
    np.testing.assert_array_equal(flows_from_injection(mats, np.zeros(3)), np.zeros(3))


def test_triangle_flows_by_hand():
    # theta = L^+ x = x / 3 for x orthogonal to 1, so flows are theta differences
    mats = derive_matrices(_ring())
    np.testing.assert_allclose(flows_from_injection(mats, [1.0, -1.0, 0.0]), [2 / 3, -1 / 3, 1 / 3], atol=1e-12)


def test_triangle_flows_follow_line_order():
    buses = tuple(BusSpec(f"b{k}", 1.0, 1.0) for k in (1, 2, 3))
    net = NetworkModel(buses, (LineSpec("b1", "b2", 1.0), LineSpec("b1", "b3", 1.0), LineSpec("b2", "b3", 1.0)))
    mats = derive_matrices(net)
    np.testing.assert_allclose(flows_from_injection(mats, [1.0, -1.0, 0.0]), [2 / 3, 1 / 3, -1 / 3], atol=1e-12)


def test_unbalanced_injection_rejected():
    mats = derive_matrices(two_bus())
    with pytest.raises(UnbalancedInjection):
        flows_from_injection(mats, [1.0, 0.0])


def test_stacked_flows_identity():
    mats = derive_matrices(triangle())
    x = np.array([0.3, -0.5, 0.2])
    f = flows_from_injection(mats, x)
    np.testing.assert_allclose(mats.H.T @ x, np.concatenate([f, -f]), atol=1e-14)


@pytest.mark.parametrize("seed", range(15))
def test_random_network_matrix_invariants(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, int(rng.integers(2, 9)))
    mats = derive_matrices(net)
    ones = np.ones(net.n_bus)
    assert np.all(ones @ mats.C == 0.0)
    assert np.max(np.abs(mats.L @ ones)) < 1e-12
    assert np.max(np.abs(mats.L_pinv @ ones)) < 1e-12
    assert np.max(np.abs(ones @ mats.H)) < 1e-10
    x = rng.normal(size=net.n_bus)
    x -= x.mean()
    np.testing.assert_allclose(mats.L @ mats.L_pinv @ x, x, atol=1e-10)
    # angles reproduce nodal balance and the shift-matrix flows
    theta = angles_from_injection(mats, x)
    assert np.max(np.abs(x - mats.CB @ theta)) < 1e-9
    np.testing.assert_allclose(mats.B @ theta, mats.shift @ x, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_inverse_gradient_round_trip(seed):
    rng = np.random.default_rng(seed)
    cost = QuadraticCost(float(rng.uniform(0.1, 5.0)), float(rng.normal()))
    q = rng.normal(scale=10.0, size=100)
    assert np.max(np.abs(cost.inverse_gradient(cost.gradient(q)) - q)) < 1e-12


def test_quadratic_cost_requires_positive_curvature():
    with pytest.raises(ValidationError):
        QuadraticCost(0.0)


def test_convex_cost_checks_inverse():
    cubic = ConvexCost(
        value=lambda q: q**2 / 2 + q**4 / 4,
        gradient=lambda q: q + q**3,
        inverse_gradient=lambda g: brentq(lambda q: q + q**3 - g, -1e3, 1e3, xtol=1e-14),
    )
    assert abs(cubic.curvature(1.0) - 4.0) < 1e-6
    with pytest.raises(ValidationError):
        ConvexCost(lambda q: q * q, lambda q: 2 * q, lambda g: g)


def test_with_demand_step_adds_to_stored_demand():
    net = two_bus(demand=(0.5, 0.0))
    stepped = net.with_demand_step({"b2": 1.0})
    np.testing.assert_array_equal(stepped.demand, [0.5, 1.0])
    with pytest.raises(ValidationError):
        net.with_demand_step({"zz": 1.0})
