"""Linearization, eigenvalue verdicts, the regularization bound and energy certificates.

``linearize`` assembles the Jacobian block by block from the model equations
rather than differentiating :class:`~gridmarket.dynamics.ClosedLoop`, so the
two serve as independent checks of each other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import ClosedLoop, Mechanism, StateLayout, SystemState, Variant, lyapunov_weights
from .errors import ConvergenceFailure, DimensionMismatch, ProjectionBoundary, ValidationError
from .network import DerivedMatrices, NetworkModel

log = logging.getLogger(__name__)

ZERO_MODE_TOL = 1e-8
STABILITY_MARGIN = 1e-9
BOUNDARY_TOL = 1e-12
DET_CHECK_MAX_DIM = 8


@dataclass(frozen=True)
class LinearizedSystem:
    """Local affine model ``dx/dt = A x + constant`` on the current projection branch."""

    A: np.ndarray
    constant: np.ndarray
    labels: list[str]
    active_eta: np.ndarray  # boolean mask over congestion rows kept in the model


def linearize(net: NetworkModel, mats: DerivedMatrices, mech: Mechanism, point: SystemState) -> LinearizedSystem:
    if not net.costs.is_quadratic:
        raise ValidationError("linearize requires quadratic costs")
    mech.check_network(net)
    layout = StateLayout.for_mechanism(net, mech)
    x = layout.pack(point)
    sl = layout.slices()
    size = layout.size
    n, m = net.n_bus, 2 * net.n_line
    tc = mech.time_constants
    tau = {k: tc.resolve(k, 1 if k == "lam" else (m if k == "eta" else n)) for k in ("p", "alpha", "q", "q_hat", "lam", "eta")}
    c, c_bar = net.costs.c, net.costs.c_bar
    d = net.demand
    H = mats.H

    def sel(name: str) -> np.ndarray:
        """Matrix extracting a state block from the flat vector."""
        out = np.zeros((sl[name].stop - sl[name].start, size))
        out[:, sl[name]] = np.eye(out.shape[0])
        return out

    # clearing price is linear in the state with no offset
    price = sel("lam")[[0] * n] - H @ sel("eta") - sel("omega")
    v = mech.variant
    if v is Variant.QUANTITY_ALIGNED:
        disp, disp0 = sel("p"), np.zeros(n)
    elif v is Variant.PRICE_MISALIGNED_REGULARIZED:
        disp, disp0 = (price - sel("alpha")) / mech.rho + sel("q_hat"), np.zeros(n)
    else:
        disp, disp0 = sel("q"), np.zeros(n)

    A = np.zeros((size, size))
    const = np.zeros(size)
    A[sl["theta_tilde"]] = mats.C.T @ sel("omega")
    A[sl["omega"]] = (disp - net.damping[:, None] * sel("omega") - mats.CB @ sel("theta_tilde")) / net.inertia[:, None]
    const[sl["omega"]] = (disp0 - d) / net.inertia
    A[sl["lam"]] = -np.sum(disp, axis=0) / tau["lam"]
    const[sl["lam"]] = -np.sum(disp0 - d) / tau["lam"]

    # congestion rows on the current branch of the projection
    finite = np.isfinite(mats.F)
    F = np.where(finite, mats.F, 0.0)
    eta_rows = (H.T @ disp) / tau["eta"][:, None]
    eta_const = (H.T @ (disp0 - d) - F) / tau["eta"]
    eta = x[sl["eta"]]
    inner = eta_rows @ x + eta_const
    active = np.zeros(m, dtype=bool)
    for k in range(m):
        if not finite[k]:
            continue
        if eta[k] > 0:
            active[k] = True
        elif abs(inner[k]) <= BOUNDARY_TOL * (1.0 + abs(F[k])):
            raise ProjectionBoundary(f"congestion row {k} sits on the projection boundary")
        else:
            active[k] = inner[k] > 0
    se = np.arange(sl["eta"].start, sl["eta"].stop)
    A[se[active]] = eta_rows[active]
    const[se[active]] = eta_const[active]

    if v is Variant.QUANTITY_ALIGNED:
        A[sl["p"]] = (price - c[:, None] * sel("p")) / tau["p"][:, None]
        const[sl["p"]] = -c_bar / tau["p"]
    else:
        tracked = sel("alpha") if v is Variant.PRICE_ALIGNED else price
        A[sl["alpha"]] = (disp - tracked / c[:, None]) / tau["alpha"][:, None]
        const[sl["alpha"]] = (disp0 + c_bar / c) / tau["alpha"]
        key = "q_hat" if v is Variant.PRICE_MISALIGNED_REGULARIZED else "q"
        A[sl[key]] = (price - sel("alpha")) / tau[key][:, None]

    return LinearizedSystem(A, const, layout.labels(net), active)


def finite_difference_jacobian(loop: ClosedLoop, x: np.ndarray, active_eta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the field on the branch fixed by ``active_eta``.

    Differentiates the unprojected field and zeroes the congestion rows that
    the projection holds at zero, so the kink at eta = 0 is never crossed.
    """
    size = len(x)
    J = np.empty((size, size))
    for k in range(size):
        e = np.zeros(size)
        e[k] = h
        J[:, k] = (loop.raw_field(x + e) - loop.raw_field(x - e)) / (2 * h)
    se = np.arange(loop.sl["eta"].start, loop.sl["eta"].stop)
    J[se[~np.asarray(active_eta, dtype=bool)]] = 0.0
    return J


def eigenvalues(A: np.ndarray) -> np.ndarray:
    """All eigenvalues of a real square matrix.

    Small matrices are additionally checked against the characteristic
    polynomial: ``|det(A - lam I)| <= 1e-6 * max(||A||, 1)^n`` for every root.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"eigenvalues need a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError("matrix has non-finite entries")
    n = A.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex)
    try:
        eig = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"eigenvalue iteration failed: {exc}") from exc
    if n <= DET_CHECK_MAX_DIM:
        scale = max(float(np.linalg.norm(A, 2)), 1.0) ** n
        eye = np.eye(n)
        for lam in eig:
            resid = abs(np.linalg.det(A - lam * eye))
            if resid > 1e-6 * scale:
                raise ConvergenceFailure(f"eigenvalue {lam} fails the determinant check ({resid:.2e})")
    return eig


@dataclass(frozen=True)
class Verdict:
    label: str  # stable | unstable | indeterminate
    zero_modes: np.ndarray
    spectrum: np.ndarray  # non-zero modes

    @property
    def max_real(self) -> float:
        return float(np.max(self.spectrum.real)) if self.spectrum.size else float("-inf")


def stability_verdict(eig: np.ndarray) -> Verdict:
    """Classify a spectrum after setting aside structural zero modes."""
    eig = np.asarray(eig, dtype=complex)
    zero = np.abs(eig) < ZERO_MODE_TOL
    rest = eig[~zero]
    if rest.size and np.any(rest.real > STABILITY_MARGIN):
        label = "unstable"
    elif np.all(rest.real < -STABILITY_MARGIN):
        label = "stable"
    else:
        label = "indeterminate"
    return Verdict(label, eig[zero], rest)


def rho_bound(c) -> float:
    """Upper end of the guaranteed regularization interval, ``4 * min(c)``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.size == 0 or np.any(c <= 0):
        raise ValidationError("quadratic coefficients must be positive")
    return 4.0 * float(np.min(c))


@dataclass(frozen=True)
class WSigma:
    """Energy-decay matrix of the regularized market in (lambda, omega, alpha, eta) order."""

    matrix: np.ndarray
    rho: float
    R: np.ndarray

    @property
    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.matrix)))


def build_w_sigma(net: NetworkModel, mats: DerivedMatrices, rho: float) -> WSigma:
    if not net.costs.is_quadratic:
        raise ValidationError("the decay matrix is defined for quadratic costs only")
    if not rho > 0:
        raise ValidationError("rho must be positive")
    n = net.n_bus
    H = mats.H
    m = H.shape[1]
    inv_c = 1.0 / net.costs.c
    r = 1.0 / rho
    one = np.ones((n, 1))
    eye = np.eye(n)
    mix = r * eye - 0.5 * np.diag(inv_c)  # = R / rho

    W = np.block(
        [
            [np.array([[n * r]]), -r * one.T, 0.5 * inv_c[None, :] - r * one.T, -r * one.T @ H],
            [-r * one, r * eye + np.diag(net.damping), mix, r * H],
            [0.5 * inv_c[:, None] - r * one, mix, r * eye, mix @ H],
            [-r * H.T @ one, r * H.T, H.T @ mix, r * H.T @ H],
        ]
    )
    assert W.shape == (1 + 2 * n + m, 1 + 2 * n + m)
    return WSigma(W, float(rho), np.diag(1.0 - 0.5 * rho * inv_c))


def lyapunov_value(point: SystemState, reference: SystemState, mech: Mechanism, net: NetworkModel) -> float:
    """Quadratic energy ``1/2 (x - x*)^T diag(T) (x - x*)`` over the mechanism's dynamic states."""
    layout = StateLayout.for_mechanism(net, mech)
    dev = layout.pack(point) - layout.pack(reference)
    w = lyapunov_weights(net, mech)
    return float(0.5 * np.sum(w * dev * dev))
