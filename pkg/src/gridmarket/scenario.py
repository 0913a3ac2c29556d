"""Simulation scenarios: demand step, horizon, step size, mechanism and initial state."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .dynamics import DEFAULT_DT, DEFAULT_HORIZON, Mechanism, StateLayout, SystemState, TimeConstants, Variant
from .errors import ParseError, ValidationError
from .network import NetworkModel, read_json

# JSON key -> TimeConstants attribute
_TAU_JSON = {"p": "p", "alpha": "alpha", "q": "q", "q_hat": "q_hat", "lambda": "lam", "eta": "eta"}


@dataclass(frozen=True)
class Scenario:
    mechanism: Mechanism
    demand_step: Mapping[str, float] = field(default_factory=dict)
    horizon: float = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    initial_state: Optional[SystemState] = None

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValidationError("horizon must be positive")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValidationError("dt must be positive")
        if self.initial_state is not None and np.any(np.asarray(self.initial_state.eta) < 0):
            raise ValidationError("initial congestion multipliers must be non-negative")

    def demand_vector(self, net: NetworkModel) -> np.ndarray:
        vec = np.zeros(net.n_bus)
        for bus_id, v in self.demand_step.items():
            if bus_id not in net.bus_index:
                raise ValidationError(f"demand step refers to unknown bus {bus_id!r}")
            vec[net.bus_index[bus_id]] = float(v)
        return vec

    def with_overrides(self, dt: float | None = None, horizon: float | None = None, rho: float | None = None) -> Scenario:
        mech = self.mechanism
        if rho is not None:
            if mech.variant is not Variant.PRICE_MISALIGNED_REGULARIZED:
                raise ValidationError("--rho only applies to the regularized mechanism")
            mech = replace(mech, rho=rho)
        return replace(
            self,
            mechanism=mech,
            dt=self.dt if dt is None else dt,
            horizon=self.horizon if horizon is None else horizon,
        )


def _num(x: Any, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ParseError(f"{where} must be a number")
    return float(x)


def _num_or_list(x: Any, where: str):
    if isinstance(x, list):
        return tuple(_num(v, where) for v in x)
    return _num(x, where)


def mechanism_from_dict(data: Any, tau: Any = None) -> Mechanism:
    if isinstance(data, str):
        data = {"variant": data}
    if not isinstance(data, Mapping) or "variant" not in data:
        raise ParseError("mechanism needs a 'variant'")
    try:
        variant = Variant(data["variant"])
    except ValueError as exc:
        raise ParseError(f"unknown mechanism variant {data['variant']!r}") from exc
    rho = data.get("rho")
    rho = None if rho is None else _num(rho, "mechanism.rho")
    tau = tau if tau is not None else data.get("time_constants", {})
    if not isinstance(tau, Mapping):
        raise ParseError("time_constants must be an object")
    kw = {}
    for key, v in tau.items():
        if key not in _TAU_JSON:
            raise ParseError(f"unknown time constant {key!r}")
        kw[_TAU_JSON[key]] = _num_or_list(v, f"time_constants.{key}")
    return Mechanism(variant, rho, TimeConstants(**kw))


def state_from_dict(data: Any, net: NetworkModel, mech: Mechanism) -> SystemState:
    if not isinstance(data, Mapping):
        raise ParseError("initial_state must be an object")
    layout = StateLayout.for_mechanism(net, mech)
    base = SystemState.zeros(net, mech)
    kw = {name: getattr(base, name) for name in layout.names}
    for key, v in data.items():
        name = "lam" if key == "lambda" else key
        if name not in kw:
            raise ValidationError(f"initial_state field {key!r} is not a state of {mech.variant.value}")
        if name == "lam":
            kw[name] = _num(v, "initial_state.lambda")
        else:
            if not isinstance(v, list):
                raise ParseError(f"initial_state.{key} must be a list")
            kw[name] = np.array([_num(x, f"initial_state.{key}") for x in v])
    state = SystemState(**kw)
    layout.pack(state)  # dimension check
    return state


def scenario_from_dict(data: Any, net: NetworkModel) -> Scenario:
    if not isinstance(data, Mapping):
        raise ParseError("scenario JSON must be an object")
    if "mechanism" not in data:
        raise ParseError("scenario JSON needs a 'mechanism'")
    mech = mechanism_from_dict(data["mechanism"], data.get("time_constants"))
    mech.check_network(net)
    step = data.get("demand_step", {})
    if not isinstance(step, Mapping):
        raise ParseError("demand_step must be an object keyed by bus id")
    step = {str(k): _num(v, f"demand_step.{k}") for k, v in step.items()}
    init = data.get("initial_state")
    sc = Scenario(
        mechanism=mech,
        demand_step=step,
        horizon=_num(data.get("horizon", DEFAULT_HORIZON), "horizon"),
        dt=_num(data.get("dt", DEFAULT_DT), "dt"),
        initial_state=None if init is None else state_from_dict(init, net, mech),
    )
    sc.demand_vector(net)  # reject unknown bus ids early
    return sc


def load_scenario(path: str | Path, net: NetworkModel) -> Scenario:
    return scenario_from_dict(read_json(path), net)
