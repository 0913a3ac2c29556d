"""Planner's problem oracle.

Two independent solvers for the same optimum:

* :func:`solve_planner` works in the dual. Projected (accelerated) gradient
  ascent on the balance price and congestion multipliers, with the dispatch
  recovered in closed form, followed by an active-set polish.
* :func:`solve_edp` works in the primal. A feasible-start active-set QP on the
  dispatch with only balance and line-limit constraints.

:func:`kkt_residual` and :func:`lagrangian_value` evaluate any candidate point,
so equilibria produced by the dynamics can be checked against either solver.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DimensionMismatch, Infeasible, MaxIterations, NumericalError, ParseError
from .network import DerivedMatrices, NetworkModel, angles_from_injection, read_json

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
ETA_DIVERGENCE = 1e6
ACTIVE_TOL = 1e-9


@dataclass(frozen=True)
class PlannerPoint:
    """Full primal-dual point of the planner's Lagrangian."""

    p: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    theta_tilde: np.ndarray
    alpha: np.ndarray
    lam: float
    eta: np.ndarray
    nu: np.ndarray

    def prices(self, mats: DerivedMatrices) -> np.ndarray:
        return self.lam - mats.H @ self.eta - self.nu


@dataclass(frozen=True)
class KKTReport:
    """Max-norm residual of every planner optimality condition."""

    cost_gradient: float  # grad J(p) - alpha
    price_balance: float  # alpha - lambda 1 + H eta + nu
    frequency: float  # D (omega - nu)
    angle: float  # B C^T nu
    bid_dispatch: float  # q - p
    power_balance: float  # 1^T (q - d)
    line_limits: float  # positive part of H^T (q - d) - F
    nodal_balance: float  # q - d - D omega - C B theta
    dual_sign: float  # positive part of -eta
    complementarity: float  # eta * (H^T (q - d) - F)

    @property
    def stationarity(self) -> float:
        return max(self.cost_gradient, self.price_balance, self.frequency, self.angle)

    @property
    def overall(self) -> float:
        return max(getattr(self, f.name) for f in fields(self))

    def as_dict(self) -> dict[str, float]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["overall"] = self.overall
        return out


@dataclass(frozen=True)
class PlannerSolution:
    point: PlannerPoint
    prices: np.ndarray
    kkt: KKTReport
    iterations: int = 0

    @property
    def q(self) -> np.ndarray:
        return self.point.q

    @property
    def lam(self) -> float:
        return self.point.lam

    @property
    def eta(self) -> np.ndarray:
        return self.point.eta

    @property
    def kkt_residual(self) -> float:
        return self.kkt.overall

    def to_dict(self) -> dict[str, Any]:
        pt = self.point
        return {
            "q_star": pt.q.tolist(),
            "p_star": pt.p.tolist(),
            "omega_star": pt.omega.tolist(),
            "theta_tilde_star": pt.theta_tilde.tolist(),
            "lambda_star": float(pt.lam),
            "eta_star": pt.eta.tolist(),
            "nu_star": pt.nu.tolist(),
            "alpha_star": pt.alpha.tolist(),
            "pi_star": self.prices.tolist(),
            "kkt_residual": self.kkt.overall,
            "kkt": self.kkt.as_dict(),
        }


def _vec(data: dict[str, Any], key: str) -> np.ndarray:
    if key not in data:
        raise ParseError(f"solution JSON missing {key!r}")
    try:
        return np.asarray(data[key], dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"solution JSON field {key!r} is not numeric") from exc


def point_from_dict(data: dict[str, Any]) -> PlannerPoint:
    if not isinstance(data, dict):
        raise ParseError("solution JSON must be an object")
    lam = data.get("lambda_star")
    if isinstance(lam, bool) or not isinstance(lam, (int, float)):
        raise ParseError("solution JSON needs a numeric 'lambda_star'")
    return PlannerPoint(
        p=_vec(data, "p_star"),
        q=_vec(data, "q_star"),
        omega=_vec(data, "omega_star"),
        theta_tilde=_vec(data, "theta_tilde_star"),
        alpha=_vec(data, "alpha_star"),
        lam=float(lam),
        eta=_vec(data, "eta_star"),
        nu=_vec(data, "nu_star"),
    )


def load_point(path: str | Path) -> PlannerPoint:
    return point_from_dict(read_json(path))


def save_solution(sol: PlannerSolution, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sol.to_dict(), indent=2) + "\n", encoding="utf-8")


def _check_dims(net: NetworkModel, pt: PlannerPoint) -> None:
    n, e2 = net.n_bus, 2 * net.n_line
    for name, size in (
        ("p", n),
        ("q", n),
        ("omega", n),
        ("alpha", n),
        ("nu", n),
        ("theta_tilde", net.n_line),
        ("eta", e2),
    ):
        arr = getattr(pt, name)
        if np.shape(arr) != (size,):
            raise DimensionMismatch(f"{name} has shape {np.shape(arr)}, expected ({size},)")


def _maxabs(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.max(np.abs(x))) if x.size else 0.0


def kkt_residual(net: NetworkModel, mats: DerivedMatrices, pt: PlannerPoint) -> KKTReport:
    _check_dims(net, pt)
    costs = net.costs
    d = net.demand
    slack = mats.H.T @ (pt.q - d) - mats.F
    return KKTReport(
        cost_gradient=_maxabs(costs.gradient(pt.p) - pt.alpha),
        price_balance=_maxabs(pt.alpha - pt.lam + mats.H @ pt.eta + pt.nu),
        frequency=_maxabs(net.damping * (pt.omega - pt.nu)),
        angle=_maxabs(mats.B @ mats.C.T @ pt.nu),
        bid_dispatch=_maxabs(pt.q - pt.p),
        power_balance=abs(float(np.sum(pt.q - d))),
        line_limits=_maxabs(np.maximum(slack, 0.0)),
        nodal_balance=_maxabs(pt.q - d - net.damping * pt.omega - mats.CB @ pt.theta_tilde),
        dual_sign=_maxabs(np.maximum(-pt.eta, 0.0)),
        complementarity=_maxabs(pt.eta * np.where(np.isfinite(slack), slack, 0.0)),
    )


def lagrangian_value(net: NetworkModel, mats: DerivedMatrices, pt: PlannerPoint) -> float:
    _check_dims(net, pt)
    d = net.demand
    D = net.damping
    flow_terms = mats.H.T @ (pt.q - d) - mats.F
    # rows with an infinite limit only contribute when their multiplier is nonzero
    cong = float(np.sum(np.where(pt.eta != 0.0, pt.eta * flow_terms, 0.0)))
    return float(
        np.sum(net.costs.value(pt.p))
        + 0.5 * pt.omega @ (D * pt.omega)
        + pt.nu @ (pt.q - d - D * pt.omega - mats.CB @ pt.theta_tilde)
        + pt.alpha @ (pt.q - pt.p)
        - pt.lam * np.sum(pt.q - d)
        + cong
    )


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _finite_rows(mats: DerivedMatrices) -> np.ndarray:
    return np.flatnonzero(np.isfinite(mats.F))


def check_feasible(net: NetworkModel, mats: DerivedMatrices) -> np.ndarray:
    """Return a balanced injection x meeting every line limit, or raise Infeasible.

    Without generation bounds the dispatch only enters through x = q - d, so
    feasibility does not depend on demand.
    """
    n = net.n_bus
    x0 = np.zeros(n)
    if np.all(mats.H.T @ x0 <= mats.F):
        return x0
    from scipy.optimize import linprog

    rows = _finite_rows(mats)
    res = linprog(
        c=np.zeros(n),
        A_ub=mats.H.T[rows],
        b_ub=mats.F[rows],
        A_eq=np.ones((1, n)),
        b_eq=[0.0],
        bounds=[(None, None)] * n,
        method="highs",
    )
    if res.status == 2:
        raise Infeasible("no balanced dispatch satisfies the line limits")
    if not res.success:
        raise NumericalError(f"feasibility LP failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def _assemble(net: NetworkModel, mats: DerivedMatrices, q: np.ndarray, lam: float, eta: np.ndarray) -> PlannerSolution:
    n = net.n_bus
    x = q - net.demand
    zeros = np.zeros(n)
    pt = PlannerPoint(
        p=q.copy(),
        q=q.copy(),
        omega=zeros.copy(),
        theta_tilde=angles_from_injection(mats, x),
        alpha=net.costs.gradient(q),
        lam=float(lam),
        eta=eta.copy(),
        nu=zeros.copy(),
    )
    return PlannerSolution(pt, pt.prices(mats), kkt_residual(net, mats, pt))


def _equality_qp(
    curv: np.ndarray, lin: np.ndarray, d: np.ndarray, H: np.ndarray, F: np.ndarray, active: np.ndarray
) -> tuple[np.ndarray, float, np.ndarray]:
    """Minimize sum(curv/2 q^2 + lin q) with balance and the ``active`` rows held at their limit.

    Multipliers are the minimum-norm solution of the stationarity system, which
    makes degenerate optima deterministic.
    """
    n = len(d)
    HA = H[:, active]
    K = np.hstack([np.ones((n, 1)), -HA])  # q = (K mu - lin) / curv
    G = K.copy()
    G[:, 1:] = HA
    rhs = np.concatenate([[np.sum(d)], F[active] + HA.T @ d])
    lhs = G.T @ (K / curv[:, None])
    rhs = rhs + G.T @ (lin / curv)
    mu, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    q = (K @ mu - lin) / curv
    return q, float(mu[0]), mu[1:]


def _local_model(net: NetworkModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal quadratic model of the cost around q: curvature and linear term."""
    costs = net.costs
    if costs.is_quadratic:
        return costs.c.copy(), costs.c_bar.copy()
    h = costs.curvature(q)
    return h, costs.gradient(q) - h * q


# ---------------------------------------------------------------------------
# Dual route
# ---------------------------------------------------------------------------


def _polish(net: NetworkModel, mats: DerivedMatrices, q: np.ndarray, lam: float, eta: np.ndarray, tol: float):
    """Active-set refinement seeded by the dual iterate.

    Returns (q, lam, eta) on success or None if the active-set loop stalls.
    """
    d = net.demand
    H, F = mats.H, mats.F
    rows = _finite_rows(mats)
    slack = H.T @ (q - d) - F
    active = [k for k in rows if eta[k] > ACTIVE_TOL or slack[k] > -1e-6 * (1.0 + abs(F[k]))]
    for _ in range(4 * len(rows) + 10):
        act = np.array(sorted(active), dtype=int)
        qk = q
        for _newton in range(50):
            curv, lin = _local_model(net, qk)
            q_new, lam_k, eta_a = _equality_qp(curv, lin, d, H, F, act)
            step = _maxabs(q_new - qk)
            qk = q_new
            if net.costs.is_quadratic or step < 1e-14 * (1.0 + _maxabs(qk)):
                break
        eta_k = np.zeros_like(eta)
        eta_k[act] = eta_a
        slack = H.T @ (qk - d) - F
        neg = [k for k, v in zip(act, eta_a) if v < -tol]
        viol = [k for k in rows if k not in active and slack[k] > tol]
        if not neg and not viol:
            return qk, lam_k, np.maximum(eta_k, 0.0)
        if viol:
            active.append(max(viol, key=lambda k: slack[k]))
        if neg:
            active.remove(min(neg, key=lambda k: eta_k[k]))
    return None


def solve_planner(
    net: NetworkModel,
    mats: DerivedMatrices,
    tol: float = DEFAULT_TOL,
    max_iter: int = 200_000,
    polish_every: int = 200,
    polish: bool = True,
) -> PlannerSolution:
    """Solve the planner's problem by dual ascent on (lambda, eta).

    For a fixed multiplier pair the dispatch is the per-bus best response
    q = inverse_gradient(lambda - H eta); the dual gradient is then the balance
    mismatch and the stacked line-limit slack.
    """
    check_feasible(net, mats)
    costs = net.costs
    d = net.demand
    H, F = mats.H, mats.F
    n, m = net.n_bus, H.shape[1]
    rows = _finite_rows(mats)
    Hf = H[:, rows]
    Ff = F[rows]

    curv0 = costs.curvature(d)
    K = np.hstack([np.ones((n, 1)), -Hf])
    lip = float(np.linalg.norm(K.T @ (K / curv0[:, None]), 2)) if K.size else 1.0
    step = 1.0 / max(lip, 1e-12)
    if not costs.is_quadratic:
        step *= 0.5

    mu = np.zeros(1 + len(rows))
    mu[0] = float(np.mean(costs.gradient(d)))
    y = mu.copy()
    t = 1.0
    best = math.inf

    def dispatch(v: np.ndarray) -> np.ndarray:
        return costs.inverse_gradient(v[0] - Hf @ v[1:])

    def expand(v: np.ndarray) -> np.ndarray:
        eta = np.zeros(m)
        eta[rows] = v
        return eta

    for it in range(1, max_iter + 1):
        q = dispatch(y)
        grad = np.concatenate([[-np.sum(q - d)], Hf.T @ (q - d) - Ff])
        mu_next = y + step * grad
        mu_next[1:] = np.maximum(mu_next[1:], 0.0)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = mu_next + ((t - 1.0) / t_next) * (mu_next - mu)
        if np.dot(mu_next - mu, grad) < 0:  # adaptive restart
            y = mu_next.copy()
            t_next = 1.0
        mu, t = mu_next, t_next
        if not np.all(np.isfinite(mu)):
            raise NumericalError("dual iterate became non-finite")
        if _maxabs(mu[1:]) > ETA_DIVERGENCE:
            raise Infeasible(f"congestion multipliers exceeded {ETA_DIVERGENCE:g}")

        if it % polish_every == 0 or it == 1:
            q = dispatch(mu)
            sol = _assemble(net, mats, q, mu[0], expand(mu[1:]))
            best = min(best, sol.kkt_residual)
            if sol.kkt_residual <= tol:
                return PlannerSolution(sol.point, sol.prices, sol.kkt, it)
            if not polish:
                continue
            refined = _polish(net, mats, q, mu[0], expand(mu[1:]), tol)
            if refined is not None:
                sol = _assemble(net, mats, *refined)
                best = min(best, sol.kkt_residual)
                if sol.kkt_residual <= tol:
                    log.debug("planner converged after %d dual iterations", it)
                    return PlannerSolution(sol.point, sol.prices, sol.kkt, it)
    raise MaxIterations("dual ascent did not reach the KKT tolerance", best)


# ---------------------------------------------------------------------------
# Primal route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DispatchSolution:
    """Optimum of the reduced dispatch problem (balance and line limits only)."""

    q: np.ndarray
    lam: float
    eta: np.ndarray
    theta_tilde: np.ndarray
    iterations: int


def _primal_active_set(
    curv: np.ndarray,
    lin: np.ndarray,
    d: np.ndarray,
    H: np.ndarray,
    F: np.ndarray,
    rows: np.ndarray,
    q: np.ndarray,
    tol: float,
    max_iter: int,
):
    """Classic primal active-set method from a feasible start for a diagonal QP."""
    work: list[int] = [k for k in rows if H[:, k] @ (q - d) - F[k] > -tol]
    for it in range(1, max_iter + 1):
        act = np.array(sorted(work), dtype=int)
        target, lam, eta_a = _equality_qp(curv, lin, d, H, F, act)
        direction = target - q
        if _maxabs(direction) <= 1e-13 * (1.0 + _maxabs(q)):
            if eta_a.size == 0 or eta_a.min() >= -tol:
                eta = np.zeros(H.shape[1])
                eta[act] = np.maximum(eta_a, 0.0)
                return target, lam, eta, it
            work.remove(int(act[int(np.argmin(eta_a))]))
            continue
        # longest feasible step toward the working-set optimum
        alpha, blocking = 1.0, None
        for k in rows:
            if k in work:
                continue
            rate = H[:, k] @ direction
            if rate > 0:
                room = F[k] - H[:, k] @ (q - d)
                frac = max(room, 0.0) / rate
                if frac < alpha:
                    alpha, blocking = frac, int(k)
        q = q + alpha * direction
        if blocking is not None:
            work.append(blocking)
    return None


def solve_edp(
    net: NetworkModel, mats: DerivedMatrices, tol: float = DEFAULT_TOL, max_iter: int = 500
) -> DispatchSolution:
    """Solve the reduced dispatch problem directly in the dispatch variable.

    Costs are replaced by their local quadratic model and the QP is re-solved
    until the dispatch stops moving (one pass for quadratic costs). The
    returned angles are checked to reproduce nodal power balance.
    """
    d = net.demand
    H, F = mats.H, mats.F
    rows = _finite_rows(mats)
    q = d + check_feasible(net, mats)
    total = 0
    for _outer in range(100):
        curv, lin = _local_model(net, q)
        out = _primal_active_set(curv, lin, d, H, F, rows, q, tol, max_iter)
        if out is None:
            raise MaxIterations("primal active set did not terminate", math.nan)
        q_new, lam, eta, its = out
        total += its
        moved = _maxabs(q_new - q)
        q = q_new
        if net.costs.is_quadratic or moved < 1e-13 * (1.0 + _maxabs(q)):
            break
    else:
        raise MaxIterations("sequential quadratic refinement did not settle", moved)

    x = q - d
    theta = angles_from_injection(mats, x)
    balance_err = _maxabs(x - mats.CB @ theta)
    if balance_err > 1e-9:
        raise NumericalError(f"reconstructed angles violate nodal balance by {balance_err:.3e}")
    sol = DispatchSolution(q=q, lam=lam, eta=eta, theta_tilde=theta, iterations=total)
    report = kkt_residual(net, mats, to_planner_point(net, mats, sol))
    if report.overall > max(tol, 1e-9) * 100:
        raise MaxIterations("primal active set ended above the KKT tolerance", report.overall)
    return sol


def to_planner_point(net: NetworkModel, mats: DerivedMatrices, sol: DispatchSolution) -> PlannerPoint:
    zeros = np.zeros(net.n_bus)
    return PlannerPoint(
        p=sol.q.copy(),
        q=sol.q.copy(),
        omega=zeros,
        theta_tilde=sol.theta_tilde,
        alpha=net.costs.gradient(sol.q),
        lam=sol.lam,
        eta=sol.eta,
        nu=zeros.copy(),
    )
