"""Small synthetic networks used by tests, the acceptance run and examples."""

from __future__ import annotations

import numpy as np

from .network import BusSpec, LineSpec, NetworkModel, QuadraticCost, derive_matrices


def single_bus(inertia: float = 1.0, damping: float = 1.0, c: float = 1.0, c_bar: float = 0.0, demand: float = 0.0) -> NetworkModel:
    return NetworkModel((BusSpec("b1", inertia, damping, demand, QuadraticCost(c, c_bar)),))


def two_bus(flow_limit: float = 10.0, demand=(1.0, 0.0)) -> NetworkModel:
    buses = tuple(BusSpec(f"b{k + 1}", 1.0, 1.0, float(v), QuadraticCost(1.0, 0.0)) for k, v in enumerate(demand))
    return NetworkModel(buses, (LineSpec("b1", "b2", 1.0, -flow_limit, flow_limit),))


def triangle(congested: bool = True, demand=(0.0, 0.0, 0.0)) -> NetworkModel:
    """Three buses in a ring; with ``congested`` the 1-3 line binds after a load step at bus 3.

    Limits are set for a 1 pu demand step at b3. The unconstrained flow on
    b1-b3 is about 0.38 pu and its limit is 0.3 pu.
    """
    buses = (
        BusSpec("b1", 1.0, 1.0, demand[0], QuadraticCost(1.0, 0.0)),
        BusSpec("b2", 2.0, 1.5, demand[1], QuadraticCost(2.0, 0.5)),
        BusSpec("b3", 1.5, 1.2, demand[2], QuadraticCost(1.5, 0.2)),
    )
    limit = 0.3 if congested else 10.0
    lines = (
        LineSpec("b1", "b2", 1.0, -10.0, 10.0),
        LineSpec("b2", "b3", 1.5, -10.0, 10.0),
        LineSpec("b1", "b3", 1.0, -limit, limit),
    )
    return NetworkModel(buses, lines)


def random_network(
    rng: np.random.Generator,
    n_bus: int,
    extra_lines: int | None = None,
    congestion: float = 0.7,
    inertia_range=(0.5, 3.0),
    damping_range=(0.5, 2.0),
    c_range=(0.5, 3.0),
    c_bar_range=(0.0, 1.0),
) -> NetworkModel:
    """Random connected network with quadratic costs and feasible line limits.

    A random spanning tree is augmented with ``extra_lines`` chords. Limits
    are ``congestion`` times the unconstrained flow magnitude on a random
    subset of lines (so some bind), loose elsewhere. Zero injection is always
    feasible, so every instance has a solution.
    """
    ids = [f"b{k + 1}" for k in range(n_bus)]
    demand = rng.normal(0.0, 1.0, n_bus)
    buses = tuple(
        BusSpec(
            ids[k],
            float(rng.uniform(*inertia_range)),
            float(rng.uniform(*damping_range)),
            float(demand[k]),
            QuadraticCost(float(rng.uniform(*c_range)), float(rng.uniform(*c_bar_range))),
        )
        for k in range(n_bus)
    )
    edges: list[tuple[int, int]] = []
    order = rng.permutation(n_bus)
    for k in range(1, n_bus):
        edges.append((int(order[rng.integers(0, k)]), int(order[k])))
    if extra_lines is None:
        extra_lines = int(rng.integers(0, n_bus))
    candidates = [
        (a, b) for a in range(n_bus) for b in range(a + 1, n_bus) if (a, b) not in edges and (b, a) not in edges
    ]
    for idx in rng.permutation(len(candidates))[:extra_lines]:
        edges.append(candidates[int(idx)])
    oriented = [(a, b) if rng.random() < 0.5 else (b, a) for a, b in edges]
    susceptance = rng.uniform(0.5, 3.0, len(oriented))
    loose = tuple(LineSpec(ids[a], ids[b], float(s), -1e3, 1e3) for (a, b), s in zip(oriented, susceptance))
    net = NetworkModel(buses, loose)

    # unconstrained optimum: equal marginal cost everywhere
    c = net.costs.c
    c_bar = net.costs.c_bar
    lam = (np.sum(net.demand) + np.sum(c_bar / c)) / np.sum(1.0 / c)
    q = (lam - c_bar) / c
    flows = derive_matrices(net).shift @ (q - net.demand)
    lines = []
    for ln, f in zip(loose, flows):
        if rng.random() < 0.5 and abs(f) > 1e-3:
            cap = congestion * abs(f)
            lines.append(LineSpec(ln.from_bus, ln.to_bus, ln.susceptance, -cap, cap))
        else:
            cap = 2.0 * abs(f) + 1.0
            lines.append(LineSpec(ln.from_bus, ln.to_bus, ln.susceptance, -cap, cap))
    return NetworkModel(buses, tuple(lines))
