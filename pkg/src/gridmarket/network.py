"""Linearized power network: buses, lines, generator costs and derived matrices.

All quantities are deviations from a nominal operating point. Vector indices
follow the order in which buses and lines appear in the input (file order),
so trajectories are reproducible bit-for-bit for a given input file.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Union

import numpy as np

from .errors import DimensionMismatch, NumericalError, ParseError, UnbalancedInjection, ValidationError

PINV_RELATIVE_CUTOFF = 1e-9
BALANCE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticCost:
    """J(q) = c/2 q^2 + c_bar q with c > 0."""

    c: float
    c_bar: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValidationError(f"quadratic cost coefficient must be positive, got c={self.c}")
        if not math.isfinite(self.c_bar):
            raise ValidationError(f"linear cost coefficient must be finite, got c_bar={self.c_bar}")

    def value(self, q):
        return 0.5 * self.c * q * q + self.c_bar * q

    def gradient(self, q):
        return self.c * q + self.c_bar

    def inverse_gradient(self, price):
        return (price - self.c_bar) / self.c

    def curvature(self, q):
        return self.c + 0.0 * q


_SAMPLE_POINTS = np.linspace(-5.0, 5.0, 41)


@dataclass(frozen=True)
class ConvexCost:
    """Strictly convex cost given by user-supplied callables.

    ``inverse_gradient`` must invert ``gradient``; both are checked on a grid
    of sample points at construction.
    """

    value: Callable[[float], float]
    gradient: Callable[[float], float]
    inverse_gradient: Callable[[float], float]
    fd_step: float = 1e-6

    def __post_init__(self):
        grads = np.array([self.gradient(x) for x in _SAMPLE_POINTS], dtype=float)
        if not np.all(np.diff(grads) > 0):
            raise ValidationError("cost gradient is not strictly increasing on the sample grid")
        back = np.array([self.inverse_gradient(g) for g in grads], dtype=float)
        if np.max(np.abs(back - _SAMPLE_POINTS)) > 1e-10:
            raise ValidationError("inverse_gradient(gradient(q)) != q on the sample grid")

    def curvature(self, q):
        h = self.fd_step
        return (self.gradient(q + h) - self.gradient(q - h)) / (2 * h)


CostSpec = Union[QuadraticCost, ConvexCost]


class CostVector:
    """Element-wise evaluation of one cost function per bus.

    Uses array arithmetic when every cost is quadratic and falls back to a
    per-bus loop otherwise.
    """

    def __init__(self, costs: Sequence[CostSpec]):
        self.costs = tuple(costs)
        self.is_quadratic = all(isinstance(k, QuadraticCost) for k in self.costs)
        if self.is_quadratic:
            self.c = np.array([k.c for k in self.costs], dtype=float)
            self.c_bar = np.array([k.c_bar for k in self.costs], dtype=float)

    def __len__(self):
        return len(self.costs)

    def _each(self, name: str, x: np.ndarray) -> np.ndarray:
        return np.array([getattr(k, name)(float(v)) for k, v in zip(self.costs, x)], dtype=float)

    def value(self, q: np.ndarray) -> np.ndarray:
        if self.is_quadratic:
            return 0.5 * self.c * q * q + self.c_bar * q
        return self._each("value", q)

    def gradient(self, q: np.ndarray) -> np.ndarray:
        if self.is_quadratic:
            return self.c * q + self.c_bar
        return self._each("gradient", q)

    def inverse_gradient(self, price: np.ndarray) -> np.ndarray:
        if self.is_quadratic:
            return (price - self.c_bar) / self.c
        return self._each("inverse_gradient", price)

    def curvature(self, q: np.ndarray) -> np.ndarray:
        if self.is_quadratic:
            return self.c.copy()
        return self._each("curvature", q)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BusSpec:
    id: str
    inertia: float
    damping: float
    demand: float = 0.0
    cost: CostSpec = field(default_factory=lambda: QuadraticCost(1.0, 0.0))


@dataclass(frozen=True)
class LineSpec:
    from_bus: str
    to_bus: str
    susceptance: float
    flow_min: float = -math.inf
    flow_max: float = math.inf

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NetworkModel:
    """Connected, arbitrarily oriented network with one aggregate generator per bus."""

    buses: tuple[BusSpec, ...]
    lines: tuple[LineSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        self._validate()

    def _validate(self):
        if not self.buses:
            raise ValidationError("network has no buses")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus id")
        for b in self.buses:
            for name in ("inertia", "damping"):
                v = getattr(b, name)
                if not (math.isfinite(v) and v > 0):
                    raise ValidationError(f"bus {b.id!r}: {name} must be positive, got {v}")
            if not math.isfinite(b.demand):
                raise ValidationError(f"bus {b.id!r}: demand must be finite")
            if not isinstance(b.cost, (QuadraticCost, ConvexCost)):
                raise ValidationError(f"bus {b.id!r}: unsupported cost {type(b.cost).__name__}")
        known = set(ids)
        seen: set[tuple[str, str]] = set()
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise ValidationError(f"line {ln.name}: unknown endpoint")
            if ln.from_bus == ln.to_bus:
                raise ValidationError(f"line {ln.name}: self loop")
            if (ln.from_bus, ln.to_bus) in seen:
                raise ValidationError(f"line {ln.name}: duplicate line")
            if (ln.to_bus, ln.from_bus) in seen:
                raise ValidationError(f"line {ln.name}: both orientations of the same line present")
            seen.add((ln.from_bus, ln.to_bus))
            if not (math.isfinite(ln.susceptance) and ln.susceptance > 0):
                raise ValidationError(f"line {ln.name}: susceptance must be positive")
            if math.isnan(ln.flow_min) or math.isnan(ln.flow_max) or not ln.flow_min < ln.flow_max:
                raise ValidationError(f"line {ln.name}: need flow_min < flow_max")
        if not self._connected():
            raise ValidationError("network graph is not connected")

    def _connected(self) -> bool:
        adj: dict[str, list[str]] = {b.id: [] for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        start = self.buses[0].id
        stack, seen = [start], {start}
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(self.buses)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def inertia(self) -> np.ndarray:
        return _readonly(np.array([b.inertia for b in self.buses], dtype=float))

    @cached_property
    def damping(self) -> np.ndarray:
        return _readonly(np.array([b.damping for b in self.buses], dtype=float))

    @cached_property
    def demand(self) -> np.ndarray:
        return _readonly(np.array([b.demand for b in self.buses], dtype=float))

    @cached_property
    def susceptance(self) -> np.ndarray:
        return _readonly(np.array([ln.susceptance for ln in self.lines], dtype=float))

    @cached_property
    def flow_min(self) -> np.ndarray:
        return _readonly(np.array([ln.flow_min for ln in self.lines], dtype=float))

    @cached_property
    def flow_max(self) -> np.ndarray:
        return _readonly(np.array([ln.flow_max for ln in self.lines], dtype=float))

    @cached_property
    def costs(self) -> CostVector:
        return CostVector([b.cost for b in self.buses])

    def with_demand(self, demand: Sequence[float] | np.ndarray) -> NetworkModel:
        demand = np.asarray(demand, dtype=float)
        if demand.shape != (self.n_bus,):
            raise DimensionMismatch(f"demand has shape {demand.shape}, expected ({self.n_bus},)")
        buses = tuple(
            BusSpec(b.id, b.inertia, b.damping, float(v), b.cost) for b, v in zip(self.buses, demand)
        )
        return NetworkModel(buses, self.lines)

    def with_demand_step(self, step: Mapping[str, float] | np.ndarray) -> NetworkModel:
        """Return a copy whose demand is the stored demand plus ``step``."""
        if isinstance(step, Mapping):
            vec = np.zeros(self.n_bus)
            for bus_id, v in step.items():
                if bus_id not in self.bus_index:
                    raise ValidationError(f"demand step refers to unknown bus {bus_id!r}")
                vec[self.bus_index[bus_id]] = float(v)
        else:
            vec = np.asarray(step, dtype=float)
        return self.with_demand(self.demand + vec)

    def to_dict(self) -> dict[str, Any]:
        buses = []
        for b in self.buses:
            if not isinstance(b.cost, QuadraticCost):
                raise ValidationError("only quadratic costs can be serialized")
            buses.append(
                {
                    "id": b.id,
                    "inertia": b.inertia,
                    "damping": b.damping,
                    "demand": b.demand,
                    "cost": {"c": b.cost.c, "c_bar": b.cost.c_bar},
                }
            )
        lines = [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "susceptance": ln.susceptance,
                "flow_min": _json_float(ln.flow_min),
                "flow_max": _json_float(ln.flow_max),
            }
            for ln in self.lines
        ]
        return {"buses": buses, "lines": lines}


def _json_float(x: float):
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _number(obj: Mapping[str, Any], key: str, where: str, default=None) -> float:
    if key not in obj:
        if default is not None:
            return default
        raise ParseError(f"{where}: missing field {key!r}")
    v = obj[key]
    if v is None and default is not None:
        return default
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{where}: field {key!r} must be a number")
    return float(v)


def network_from_dict(data: Mapping[str, Any]) -> NetworkModel:
    if not isinstance(data, Mapping) or not isinstance(data.get("buses"), list):
        raise ParseError("network JSON needs a 'buses' list")
    lines_raw = data.get("lines", [])
    if not isinstance(lines_raw, list):
        raise ParseError("'lines' must be a list")
    buses = []
    for k, b in enumerate(data["buses"]):
        where = f"buses[{k}]"
        if not isinstance(b, Mapping) or not isinstance(b.get("id"), str):
            raise ParseError(f"{where}: needs a string 'id'")
        cost = b.get("cost", {"c": 1.0, "c_bar": 0.0})
        if not isinstance(cost, Mapping):
            raise ParseError(f"{where}: 'cost' must be an object")
        buses.append(
            BusSpec(
                id=b["id"],
                inertia=_number(b, "inertia", where),
                damping=_number(b, "damping", where),
                demand=_number(b, "demand", where, default=0.0),
                cost=QuadraticCost(_number(cost, "c", where + ".cost"), _number(cost, "c_bar", where + ".cost", 0.0)),
            )
        )
    lines = []
    for k, ln in enumerate(lines_raw):
        where = f"lines[{k}]"
        if not isinstance(ln, Mapping) or not isinstance(ln.get("from"), str) or not isinstance(ln.get("to"), str):
            raise ParseError(f"{where}: needs string 'from' and 'to'")
        lines.append(
            LineSpec(
                from_bus=ln["from"],
                to_bus=ln["to"],
                susceptance=_number(ln, "susceptance", where),
                flow_min=_number(ln, "flow_min", where, default=-math.inf),
                flow_max=_number(ln, "flow_max", where, default=math.inf),
            )
        )
    return NetworkModel(tuple(buses), tuple(lines))


def read_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def load_network(path: str | Path) -> NetworkModel:
    """Read and validate a network JSON file."""
    return network_from_dict(read_json(path))


def save_network(net: NetworkModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Derived matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DerivedMatrices:
    """Constant matrices of the linearized network.

    ``H`` is |N| x 2|E| with ``H.T = [shift; -shift]`` and ``F = [flow_max; -flow_min]``.
    """

    C: np.ndarray
    B: np.ndarray
    L: np.ndarray
    L_pinv: np.ndarray
    shift: np.ndarray
    H: np.ndarray
    F: np.ndarray

    @property
    def b(self) -> np.ndarray:
        return np.diag(self.B)

    @property
    def CB(self) -> np.ndarray:
        return self.C @ self.B


def incidence_matrix(net: NetworkModel) -> np.ndarray:
    C = np.zeros((net.n_bus, net.n_line))
    for e, ln in enumerate(net.lines):
        C[net.bus_index[ln.from_bus], e] = 1.0
        C[net.bus_index[ln.to_bus], e] = -1.0
    return C


def laplacian_pinv(L: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse of a connected-graph Laplacian via eigendecomposition."""
    evals, evecs = np.linalg.eigh(L)
    lam_max = float(np.max(np.abs(evals))) if evals.size else 0.0
    cutoff = PINV_RELATIVE_CUTOFF * lam_max
    keep = evals > cutoff
    n_zero = int(np.count_nonzero(~keep))
    if n_zero != 1:
        raise NumericalError(f"Laplacian has {n_zero} near-zero eigenvalues; expected exactly one")
    V = evecs[:, keep]
    P = (V / evals[keep]) @ V.T
    return 0.5 * (P + P.T)


def derive_matrices(net: NetworkModel) -> DerivedMatrices:
    C = incidence_matrix(net)
    B = np.diag(net.susceptance)
    L = C @ B @ C.T
    L_pinv = laplacian_pinv(L)
    shift = B @ C.T @ L_pinv
    H = np.hstack([shift.T, -shift.T])
    F = np.concatenate([net.flow_max, -net.flow_min])
    return DerivedMatrices(*(_readonly(np.array(a, dtype=float)) for a in (C, B, L, L_pinv, shift, H, F)))


def flows_from_injection(mats: DerivedMatrices, injection: Sequence[float] | np.ndarray) -> np.ndarray:
    """Line flows caused by a balanced vector of net bus injections."""
    x = np.asarray(injection, dtype=float)
    if x.shape != (mats.C.shape[0],):
        raise DimensionMismatch(f"injection has shape {x.shape}, expected ({mats.C.shape[0]},)")
    total = float(np.sum(x))
    if abs(total) > BALANCE_TOL:
        raise UnbalancedInjection(f"injection sums to {total:.3e}, flows are only defined for balanced injections")
    return mats.shift @ x


def angles_from_injection(mats: DerivedMatrices, injection: np.ndarray) -> np.ndarray:
    """Angle differences C^T L^+ x reproducing nodal balance for a balanced injection."""
    return mats.C.T @ (mats.L_pinv @ np.asarray(injection, dtype=float))
