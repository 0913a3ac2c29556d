"""Closed-loop grid, market and bidder dynamics.

Four market mechanisms share the linearized swing equations and the balance
and congestion price updates; they differ in what participants bid and how
the market turns bids into dispatch:

========================  ==================  ===============================
variant                   dynamic bid states  dispatch q
========================  ==================  ===============================
quantity_aligned          p                   q = p
price_aligned             alpha, q            integrated market state
price_misaligned_naive    alpha, q            integrated market state
price_misaligned_reg.     alpha, q_hat        (pi - alpha) / rho + q_hat
========================  ==================  ===============================

The frequency deviation doubles as the nodal imbalance price everywhere, so
clearing prices are ``pi = lambda - H eta - omega``.

States are flattened in a fixed order per mechanism (see :class:`StateLayout`)
and integrated with classical RK4. Congestion multipliers are projected onto
the non-negative orthant inside the field and clamped after every step.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, MechanismStateMismatch, NonFiniteState, ValidationError
from .network import DerivedMatrices, NetworkModel
from .planner import PlannerPoint, PlannerSolution

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e9
DEFAULT_DT = 0.01
DEFAULT_HORIZON = 150.0
DEFAULT_WINDOW = 5.0
DEFAULT_STEADY_TOL = 1e-5


class Variant(str, enum.Enum):
    QUANTITY_ALIGNED = "quantity_aligned"
    PRICE_ALIGNED = "price_aligned"
    PRICE_MISALIGNED_NAIVE = "price_misaligned_naive"
    PRICE_MISALIGNED_REGULARIZED = "price_misaligned_regularized"


# Dynamic fields per variant, in flattening order.
_FIELDS = {
    Variant.QUANTITY_ALIGNED: ("theta_tilde", "omega", "p", "lam", "eta"),
    Variant.PRICE_ALIGNED: ("theta_tilde", "omega", "alpha", "q", "lam", "eta"),
    Variant.PRICE_MISALIGNED_NAIVE: ("theta_tilde", "omega", "alpha", "q", "lam", "eta"),
    Variant.PRICE_MISALIGNED_REGULARIZED: ("theta_tilde", "omega", "alpha", "q_hat", "lam", "eta"),
}

_TAU_KEYS = ("p", "alpha", "q", "q_hat", "lam", "eta")


@dataclass(frozen=True)
class TimeConstants:
    """Positive diagonal time constants; each entry is a scalar or a per-element list."""

    p: float | tuple[float, ...] = 1.0
    alpha: float | tuple[float, ...] = 1.0
    q: float | tuple[float, ...] = 1.0
    q_hat: float | tuple[float, ...] = 1.0
    lam: float = 1.0
    eta: float | tuple[float, ...] = 1.0

    def __post_init__(self):
        for key in _TAU_KEYS:
            v = getattr(self, key)
            if isinstance(v, (list, np.ndarray)):
                v = tuple(float(x) for x in v)
                object.__setattr__(self, key, v)
            vals = np.atleast_1d(np.asarray(v, dtype=float))
            if vals.size == 0 or not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ValidationError(f"time constant {key!r} must be positive")

    def resolve(self, key: str, size: int) -> np.ndarray:
        v = np.atleast_1d(np.asarray(getattr(self, key), dtype=float))
        if v.size == 1:
            return np.full(size, float(v[0]))
        if v.size != size:
            raise DimensionMismatch(f"time constant {key!r} has {v.size} entries, expected {size}")
        return v.copy()


@dataclass(frozen=True)
class Mechanism:
    variant: Variant
    rho: Optional[float] = None
    time_constants: TimeConstants = field(default_factory=TimeConstants)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.PRICE_MISALIGNED_REGULARIZED:
            if self.rho is None or not (math.isfinite(self.rho) and self.rho > 0):
                raise ValidationError("regularized mechanism needs rho > 0")
        elif self.rho is not None:
            raise ValidationError(f"rho only applies to the regularized mechanism, not {self.variant.value}")

    @property
    def fields(self) -> tuple[str, ...]:
        return _FIELDS[self.variant]

    def check_network(self, net: NetworkModel) -> None:
        """Validate cost compatibility; warn when rho is outside the guaranteed range."""
        if self.variant is not Variant.PRICE_MISALIGNED_REGULARIZED:
            return
        if not net.costs.is_quadratic:
            raise ValidationError("the regularized mechanism requires quadratic costs")
        bound = 4.0 * float(np.min(net.costs.c))
        if self.rho >= bound:
            log.warning("rho=%g is not below 4*min(c)=%g; convergence is not guaranteed", self.rho, bound)


@dataclass(frozen=True)
class SystemState:
    """Closed-loop state. Fields not used by a mechanism are ``None``."""

    theta_tilde: np.ndarray
    omega: np.ndarray
    lam: float
    eta: np.ndarray
    p: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    q_hat: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, net: NetworkModel, mech: Mechanism) -> SystemState:
        layout = StateLayout.for_mechanism(net, mech)
        return layout.unpack(np.zeros(layout.size))


@dataclass(frozen=True)
class StateLayout:
    """Flattening order of a mechanism's dynamic variables."""

    names: tuple[str, ...]
    sizes: tuple[int, ...]

    @classmethod
    def for_mechanism(cls, net: NetworkModel, mech: Mechanism) -> StateLayout:
        size = {"theta_tilde": net.n_line, "lam": 1, "eta": 2 * net.n_line}
        names = mech.fields
        return cls(names, tuple(size.get(n, net.n_bus) for n in names))

    @property
    def size(self) -> int:
        return sum(self.sizes)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, k in zip(self.names, self.sizes):
            out[name] = slice(start, start + k)
            start += k
        return out

    def pack(self, state: SystemState) -> np.ndarray:
        parts = []
        for name, k in zip(self.names, self.sizes):
            v = getattr(state, name)
            if v is None:
                raise MechanismStateMismatch(f"state is missing {name!r} required by this mechanism")
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            if arr.shape != (k,):
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected ({k},)")
            parts.append(arr)
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, x: np.ndarray) -> SystemState:
        kw = {}
        for name, sl in self.slices().items():
            kw[name] = float(x[sl][0]) if name == "lam" else x[sl].copy()
        return SystemState(**kw)

    def labels(self, net: NetworkModel) -> list[str]:
        bus = [b.id for b in net.buses]
        line = [ln.name for ln in net.lines]
        out: list[str] = []
        for name in self.names:
            if name == "lam":
                out.append("lambda")
            elif name == "theta_tilde":
                out += [f"theta_{x}" for x in line]
            elif name == "eta":
                out += [f"eta_{k}" for k in range(2 * net.n_line)]
            else:
                out += [f"{name}_{x}" for x in bus]
        return out


def _check_active(state: SystemState, mech: Mechanism) -> None:
    active = set(mech.fields)
    for name in ("p", "q", "q_hat", "alpha"):
        present = getattr(state, name) is not None
        if present != (name in active):
            need = "requires" if name in active else "does not use"
            raise MechanismStateMismatch(f"{mech.variant.value} {need} state field {name!r}")


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def project_plus(y, u) -> np.ndarray:
    """Keep y_j where y_j > 0 or u_j > 0, else 0."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.shape != u.shape:
        raise DimensionMismatch(f"projection operands differ in shape: {y.shape} vs {u.shape}")
    return np.where((y > 0) | (u > 0), y, 0.0)


def clearing_prices(lam: float, eta, omega, mats: DerivedMatrices) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    n, m = mats.H.shape
    if eta.shape != (m,) or omega.shape != (n,):
        raise DimensionMismatch(f"expected eta of length {m} and omega of length {n}")
    return lam - mats.H @ eta - omega


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


class ClosedLoop:
    """A mechanism bound to a network, evaluating the flattened vector field.

    With quadratic costs every branch of the field is affine, so the raw
    (unprojected) field is compiled once into ``A x + b`` and only the
    congestion projection is applied per evaluation.
    """

    def __init__(self, net: NetworkModel, mats: DerivedMatrices, mech: Mechanism, demand: np.ndarray | None = None):
        mech.check_network(net)
        self.net, self.mats, self.mech = net, mats, mech
        self.layout = StateLayout.for_mechanism(net, mech)
        self.sl = self.layout.slices()
        self.demand = np.asarray(net.demand if demand is None else demand, dtype=float)
        n, e2 = net.n_bus, 2 * net.n_line
        tc = mech.time_constants
        self.tau = {k: tc.resolve(k, 1 if k == "lam" else (e2 if k == "eta" else n)) for k in _TAU_KEYS}
        self.finite_rows = np.isfinite(mats.F)
        self.F = np.where(self.finite_rows, mats.F, 0.0)
        self._affine: tuple[np.ndarray, np.ndarray] | None = None
        if net.costs.is_quadratic:
            self._affine = self._compile()

    # --- state-resolved quantities --------------------------------------

    def prices(self, x: np.ndarray) -> np.ndarray:
        omega = x[self.sl["omega"]]
        return x[self.sl["lam"]][0] - self.mats.H @ x[self.sl["eta"]] - omega

    def dispatch(self, x: np.ndarray) -> np.ndarray:
        v = self.mech.variant
        if v is Variant.QUANTITY_ALIGNED:
            return x[self.sl["p"]]
        if v is Variant.PRICE_MISALIGNED_REGULARIZED:
            return (self.prices(x) - x[self.sl["alpha"]]) / self.mech.rho + x[self.sl["q_hat"]]
        return x[self.sl["q"]]

    def scheduled_output(self, x: np.ndarray) -> np.ndarray:
        """Generator set-point p implied by the bid (best response to the signal it tracks)."""
        v = self.mech.variant
        inv = self.net.costs.inverse_gradient
        if v is Variant.QUANTITY_ALIGNED:
            return x[self.sl["p"]]
        if v is Variant.PRICE_ALIGNED:
            return inv(x[self.sl["alpha"]])
        return inv(self.prices(x))

    def bid_price(self, x: np.ndarray) -> np.ndarray:
        if self.mech.variant is Variant.QUANTITY_ALIGNED:
            return self.prices(x)
        return x[self.sl["alpha"]]

    # --- vector field ----------------------------------------------------

    def raw_field(self, x: np.ndarray) -> np.ndarray:
        """Time derivative with the congestion update left unprojected."""
        net, mats, sl, tau = self.net, self.mats, self.sl, self.tau
        costs = net.costs
        d = self.demand
        out = np.zeros_like(x)
        omega = x[sl["omega"]]
        theta = x[sl["theta_tilde"]]
        pi = self.prices(x)
        q = self.dispatch(x)
        out[sl["theta_tilde"]] = mats.C.T @ omega
        out[sl["omega"]] = (q - d - net.damping * omega - mats.CB @ theta) / net.inertia
        out[sl["lam"]] = -np.sum(q - d) / tau["lam"]
        out[sl["eta"]] = np.where(self.finite_rows, mats.H.T @ (q - d) - self.F, 0.0) / tau["eta"]
        v = self.mech.variant
        if v is Variant.QUANTITY_ALIGNED:
            out[sl["p"]] = (pi - costs.gradient(x[sl["p"]])) / tau["p"]
        else:
            alpha = x[sl["alpha"]]
            target = alpha if v is Variant.PRICE_ALIGNED else pi
            out[sl["alpha"]] = (q - costs.inverse_gradient(target)) / tau["alpha"]
            if v is Variant.PRICE_MISALIGNED_REGULARIZED:
                out[sl["q_hat"]] = (pi - alpha) / tau["q_hat"]
            else:
                out[sl["q"]] = (pi - alpha) / tau["q"]
        return out

    def _compile(self) -> tuple[np.ndarray, np.ndarray]:
        size = self.layout.size
        b = self.raw_field(np.zeros(size))
        A = np.empty((size, size))
        for k in range(size):
            e = np.zeros(size)
            e[k] = 1.0
            A[:, k] = self.raw_field(e) - b
        return A, b

    @property
    def affine(self) -> tuple[np.ndarray, np.ndarray] | None:
        return self._affine

    def field(self, x: np.ndarray) -> np.ndarray:
        if self._affine is not None:
            A, b = self._affine
            out = A @ x + b
        else:
            out = self.raw_field(x)
        se = self.sl["eta"]
        if se.stop > se.start:
            ye = out[se]
            out[se] = np.where((ye > 0) | (x[se] > 0), ye, 0.0)
        return out

    def step(self, x: np.ndarray, dt: float) -> np.ndarray:
        f = self.field
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        nxt = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        se = self.sl["eta"]
        nxt[se] = np.maximum(nxt[se], 0.0)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteState("state became non-finite during integration")
        return nxt


def vector_field(state: SystemState, net: NetworkModel, mats: DerivedMatrices, mech: Mechanism) -> SystemState:
    """Time derivative of ``state`` under ``mech`` (inactive fields stay ``None``)."""
    _check_active(state, mech)
    loop = ClosedLoop(net, mats, mech)
    x = loop.layout.pack(state)
    if np.any(x[loop.sl["eta"]] < 0):
        raise ValidationError("congestion multipliers must be non-negative")
    return loop.layout.unpack(loop.field(x))


def step(state: SystemState, net: NetworkModel, mats: DerivedMatrices, mech: Mechanism, dt: float) -> SystemState:
    """One RK4 step followed by clamping the congestion multipliers at zero."""
    if not dt > 0:
        raise ValidationError("dt must be positive")
    _check_active(state, mech)
    loop = ClosedLoop(net, mats, mech)
    x = loop.layout.pack(state)
    if np.any(x[loop.sl["eta"]] < 0):
        raise ValidationError("congestion multipliers must be non-negative")
    return loop.layout.unpack(loop.step(x, dt))


# ---------------------------------------------------------------------------
# Equilibria and planner mapping
# ---------------------------------------------------------------------------


def equilibrium_state(solution: PlannerSolution | PlannerPoint, net: NetworkModel, mech: Mechanism) -> SystemState:
    """Map a planner optimum into the mechanism's state space."""
    pt = solution.point if isinstance(solution, PlannerSolution) else solution
    q = np.asarray(pt.q, dtype=float)
    full = dict(
        theta_tilde=np.asarray(pt.theta_tilde, float).copy(),
        omega=np.asarray(pt.omega, float).copy(),
        lam=float(pt.lam),
        eta=np.asarray(pt.eta, float).copy(),
        p=q.copy(),
        q=q.copy(),
        q_hat=q.copy(),
        alpha=net.costs.gradient(q),
    )
    active = set(mech.fields)
    return SystemState(**{k: (v if k in active or k in ("theta_tilde", "omega", "lam", "eta") else None) for k, v in full.items()})


def to_planner_point(state: SystemState, net: NetworkModel, mats: DerivedMatrices, mech: Mechanism) -> PlannerPoint:
    """Read a closed-loop state as a planner primal-dual point (nu taken as omega)."""
    _check_active(state, mech)
    loop = ClosedLoop(net, mats, mech)
    x = loop.layout.pack(state)
    return PlannerPoint(
        p=loop.scheduled_output(x),
        q=loop.dispatch(x).copy(),
        omega=x[loop.sl["omega"]].copy(),
        theta_tilde=x[loop.sl["theta_tilde"]].copy(),
        alpha=loop.bid_price(x).copy(),
        lam=float(x[loop.sl["lam"]][0]),
        eta=x[loop.sl["eta"]].copy(),
        nu=x[loop.sl["omega"]].copy(),
    )


def lyapunov_weights(net: NetworkModel, mech: Mechanism) -> np.ndarray:
    """Diagonal weights of the quadratic energy function in flattened order.

    Angles are weighted by line susceptance, frequencies by inertia, and every
    market or bid variable by its time constant.
    """
    n, e2 = net.n_bus, 2 * net.n_line
    tc = mech.time_constants
    parts = []
    for name in mech.fields:
        if name == "theta_tilde":
            parts.append(np.asarray(net.susceptance, float))
        elif name == "omega":
            parts.append(np.asarray(net.inertia, float))
        elif name == "lam":
            parts.append(tc.resolve("lam", 1))
        elif name == "eta":
            parts.append(tc.resolve("eta", e2))
        else:
            parts.append(tc.resolve(name, n))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # one flattened state per row
    loop: ClosedLoop
    status: str = "completed"  # or "diverged"
    diverged_at: Optional[float] = None
    reference: Optional[np.ndarray] = None

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def layout(self) -> StateLayout:
        return self.loop.layout

    def state(self, k: int = -1) -> SystemState:
        return self.layout.unpack(self.states[k])

    @property
    def final_state(self) -> SystemState:
        return self.state(-1)

    def series(self, name: str) -> np.ndarray:
        return self.states[:, self.loop.sl[name]]

    def prices(self) -> np.ndarray:
        return np.array([self.loop.prices(x) for x in self.states])

    def dispatch(self) -> np.ndarray:
        return np.array([self.loop.dispatch(x) for x in self.states])

    def flows(self) -> np.ndarray:
        return self.series("theta_tilde") * self.loop.net.susceptance

    def lyapunov(self) -> Optional[np.ndarray]:
        if self.reference is None:
            return None
        w = lyapunov_weights(self.loop.net, self.loop.mech)
        dev = self.states - self.reference
        return 0.5 * np.sum(w * dev * dev, axis=1)


def simulate(
    net: NetworkModel,
    mats: DerivedMatrices,
    mech: Mechanism,
    scenario,
    reference: SystemState | None = None,
) -> Trajectory:
    """Integrate the closed loop from the scenario's initial state.

    The demand step is added to the network's stored demand at t = 0. The run
    stops early with status ``"diverged"`` once the state leaves a 1e9 box or
    stops being finite; the partial trajectory is kept.
    """
    demand = net.demand + scenario.demand_vector(net)
    loop = ClosedLoop(net.with_demand(demand), mats, mech)
    layout = loop.layout
    init = scenario.initial_state if scenario.initial_state is not None else SystemState.zeros(net, mech)
    _check_active(init, mech)
    x = layout.pack(init)
    if np.any(x[loop.sl["eta"]] < 0):
        raise ValidationError("initial congestion multipliers must be non-negative")
    n_steps = int(math.ceil(scenario.horizon / scenario.dt - 1e-9))
    dt = scenario.dt
    states = np.empty((n_steps + 1, layout.size))
    states[0] = x
    status, diverged_at, last = "completed", None, n_steps
    for k in range(1, n_steps + 1):
        try:
            x = loop.step(x, dt)
        except NonFiniteState:
            status, diverged_at, last = "diverged", k * dt, k - 1
            break
        states[k] = x
        if np.max(np.abs(x)) > DIVERGENCE_THRESHOLD:
            status, diverged_at, last = "diverged", k * dt, k
            break
    ref = layout.pack(reference) if reference is not None else None
    times = np.arange(last + 1) * dt
    return Trajectory(times, states[: last + 1].copy(), loop, status, diverged_at, ref)


def steady_state_detect(
    traj: Trajectory, window: float = DEFAULT_WINDOW, tol: float = DEFAULT_STEADY_TOL
) -> tuple[bool, SystemState]:
    """Converged iff the field stays below ``tol`` (max-norm) over the trailing window."""
    final = traj.final_state
    if traj.diverged or len(traj.times) == 0:
        return False, final
    t_end = traj.times[-1]
    mask = traj.times >= t_end - window - 1e-12
    worst = max(float(np.max(np.abs(traj.loop.field(x)), initial=0.0)) for x in traj.states[mask])
    return worst < tol, final
