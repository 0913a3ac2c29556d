"""Trajectory CSV format.

Columns, in order: ``t``, ``omega_<bus>``, ``p_<bus>``, ``q_<bus>``,
``alpha_<bus>``, ``lambda``, ``eta_<k>``, ``pi_<bus>``, ``flow_<from>-<to>``,
``V``. ``p`` is the generator set-point implied by the bid, ``q`` the market
dispatch and ``alpha`` the price bid (the clearing price under quantity
bidding, where no price is bid). ``eta_<k>`` indexes the stacked multipliers:
upper limits of every line first, then lower limits. ``V`` is ``nan`` when no
reference equilibrium was supplied.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import Trajectory
from .errors import MalformedCsv, ParseError, ValidationError
from .network import NetworkModel
from .planner import PlannerPoint


def header(net: NetworkModel) -> list[str]:
    bus = [b.id for b in net.buses]
    cols = ["t"]
    for prefix in ("omega", "p", "q", "alpha"):
        cols += [f"{prefix}_{b}" for b in bus]
    cols.append("lambda")
    cols += [f"eta_{k}" for k in range(2 * net.n_line)]
    cols += [f"pi_{b}" for b in bus]
    cols += [f"flow_{ln.name}" for ln in net.lines]
    cols.append("V")
    return cols


def trajectory_table(traj: Trajectory) -> np.ndarray:
    loop = traj.loop
    rows = []
    V = traj.lyapunov()
    for k, (t, x) in enumerate(zip(traj.times, traj.states)):
        rows.append(
            np.concatenate(
                [
                    [t],
                    x[loop.sl["omega"]],
                    loop.scheduled_output(x),
                    loop.dispatch(x),
                    loop.bid_price(x),
                    x[loop.sl["lam"]],
                    x[loop.sl["eta"]],
                    loop.prices(x),
                    x[loop.sl["theta_tilde"]] * loop.net.susceptance,
                    [np.nan if V is None else V[k]],
                ]
            )
        )
    return np.array(rows)


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else format(float(v), ".12g")


def write_trajectory(traj: Trajectory, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write(",".join(header(traj.loop.net)) + "\n")
    for row in trajectory_table(traj):
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass(frozen=True)
class Table:
    columns: list[str]
    data: np.ndarray  # rows x columns

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def block(self, prefix: str, keys: list[str]) -> np.ndarray:
        return np.array([self.column(f"{prefix}_{k}") for k in keys]).T


def read_table(path: str | Path) -> Table:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0]:
        raise MalformedCsv(f"{path}: missing header")
    cols = [c.strip() for c in rows[0]]
    if cols[0] != "t" or len(set(cols)) != len(cols):
        raise MalformedCsv(f"{path}: header must start with 't' and have unique names")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(cols):
            raise MalformedCsv(f"{path}:{lineno}: expected {len(cols)} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise MalformedCsv(f"{path}:{lineno}: non-numeric field") from exc
    if not data:
        raise MalformedCsv(f"{path}: no data rows")
    return Table(cols, np.array(data))


def point_at(table: Table, net: NetworkModel, time: float | None = None) -> tuple[float, PlannerPoint]:
    """Planner point from the row nearest ``time`` (last row when ``None``)."""
    expected = header(net)
    missing = [c for c in expected if c not in table.columns]
    if missing:
        raise ValidationError(f"trajectory does not match the network; missing columns {missing[:3]}")
    t = table.column("t")
    k = len(t) - 1 if time is None else int(np.argmin(np.abs(t - time)))
    row = dict(zip(table.columns, table.data[k]))
    bus = [b.id for b in net.buses]

    def vec(prefix: str, keys) -> np.ndarray:
        return np.array([row[f"{prefix}_{x}"] for x in keys], dtype=float)

    omega = vec("omega", bus)
    flows = vec("flow", [ln.name for ln in net.lines])
    pt = PlannerPoint(
        p=vec("p", bus),
        q=vec("q", bus),
        omega=omega,
        theta_tilde=flows / net.susceptance if net.n_line else np.zeros(0),
        alpha=vec("alpha", bus),
        lam=float(row["lambda"]),
        eta=vec("eta", range(2 * net.n_line)),
        nu=omega.copy(),
    )
    return float(t[k]), pt
