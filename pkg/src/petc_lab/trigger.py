"""Dynamic periodic event trigger with packet-loss bookkeeping.

At every sampling index z >= 1 the trigger predicts, from the state x(zh) and
the input held at the actuator, an upper bound sigma_z on how much V can grow
before the next guaranteed successful transmission, and sends when that
prediction would cross a decreasing envelope anchored at the last successful
transmission.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from . import _numerics as nx
from .errors import ConfigError, ProtocolViolation

NU_CAP = 10 ** 6


class Reason(IntEnum):
    INITIAL = 0
    FORCED_BY_NU = 1
    RULE_VIOLATED = 2
    NO_SEND = 3
    PERIODIC = 4     # baseline mode: send at every sampling instant


class CnSchedule:
    """Piecewise-constant nonnegative c_n(z): entry (start, value) applies from
    sampling index `start` until the next entry; 0 before the first."""

    def __init__(self, table=()):
        table = sorted((int(s), float(v)) for s, v in table)
        if any(v < 0 for _, v in table):
            raise ConfigError("c_n schedule values must be nonnegative")
        if len({s for s, _ in table}) != len(table):
            raise ConfigError("duplicate start index in c_n schedule")
        self.starts = np.array([s for s, _ in table], dtype=np.int64)
        self.values = np.array([v for _, v in table], dtype=float)

    def __call__(self, z):
        return nx.schedule_value(self.starts, self.values, z)

    def __repr__(self):
        return f"CnSchedule({list(zip(self.starts.tolist(), self.values.tolist()))})"


@dataclass(frozen=True)
class TriggerRule:
    kind: str = "linear"        # "linear" | "exponential" | "adaptive"
    rate: float | None = None   # K, exponential rule only
    schedule: CnSchedule | None = None

    KINDS = {"linear": nx.LINEAR, "exponential": nx.EXPONENTIAL, "adaptive": nx.ADAPTIVE}

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown trigger rule {self.kind!r}")
        if self.kind == "exponential" and not (self.rate and self.rate > 0):
            raise ConfigError("the exponential rule needs a positive decay rate K")
        if self.kind == "adaptive" and self.schedule is None:
            object.__setattr__(self, "schedule", CnSchedule())

    @property
    def code(self):
        return self.KINDS[self.kind]

    def cn(self, z):
        return self.schedule(z) if self.schedule is not None else 0.0

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def exponential(cls, rate):
        return cls("exponential", rate=rate)

    @classmethod
    def adaptive(cls, table):
        return cls("adaptive", schedule=table if isinstance(table, CnSchedule) else CnSchedule(table))


@dataclass(frozen=True)
class TriggerState:
    i_ref: int
    V_ref: float
    m_bar: int
    u_star: np.ndarray
    nu: int
    rule: TriggerRule
    x_ref: np.ndarray   # logged only; never read by the rule


@dataclass(frozen=True)
class TriggerDecision:
    send: bool
    sigma_z: float
    threshold: float
    reason: Reason


def default_nu(sigma, rate, h):
    """ceil(1/(sigma K h)), capped: the forced send fires only after the
    exponential envelope would have decayed by 1/e."""
    return int(min(math.ceil(1.0 / (sigma * rate * h)), NU_CAP))


def initialize(x0, model, nu, rule=None) -> TriggerState:
    """State after the mandatory (always successful) transmission at z = 0."""
    x0 = model.require_domain(x0)
    if nu < 1:
        raise ConfigError(f"nu must be a positive integer, got {nu}")
    return TriggerState(i_ref=0, V_ref=float(model.lyapunov(x0)), m_bar=0,
                        u_star=np.asarray(model.feedback(x0), dtype=float), nu=int(nu),
                        rule=rule or TriggerRule.linear(), x_ref=x0.copy())


def sigma_z(model, constants, x, state: TriggerState) -> float:
    x = model.require_domain(x)
    _, lfv, gn, fn = nx.trigger_quantities(model.vector_field, model.lyapunov,
                                           model.lyapunov_gradient, x, state.u_star)
    horizon = constants.h * (constants.m - state.m_bar + 1)
    return float(nx.sigma_z_core(lfv, gn, fn, horizon, constants.mu_c))


def evaluate(z, x, model, constants, state: TriggerState) -> TriggerDecision:
    if z < 1:
        raise ConfigError("evaluate() handles z >= 1; z = 0 is the initial transmission")
    x = model.require_domain(x)
    v, lfv, gn, fn = nx.trigger_quantities(model.vector_field, model.lyapunov,
                                           model.lyapunov_gradient, x, state.u_star)
    m, h = constants.m, constants.h
    sz = nx.sigma_z_core(lfv, gn, fn, h * (m - state.m_bar + 1), constants.mu_c)
    steps = z - state.i_ref + m - state.m_bar + 1
    rule = state.rule
    thr = nx.threshold_core(rule.code, state.V_ref, steps, h, constants.sigma,
                            model.gamma(state.V_ref), rule.rate or 0.0, rule.cn(z))
    if z - state.i_ref > state.nu:
        reason = Reason.FORCED_BY_NU
    elif v + sz >= thr:
        reason = Reason.RULE_VIOLATED
    else:
        reason = Reason.NO_SEND
    return TriggerDecision(reason != Reason.NO_SEND, float(sz), float(thr), reason)


def on_transmission_result(state: TriggerState, z, x, model, success, m) -> TriggerState:
    if success:
        x = np.asarray(x, dtype=float)
        return replace(state, i_ref=int(z), V_ref=float(model.lyapunov(x)), m_bar=0,
                       u_star=np.asarray(model.feedback(x), dtype=float), x_ref=x.copy())
    if state.m_bar + 1 > m:
        raise ProtocolViolation(
            f"{state.m_bar + 1} consecutive losses at z={z} exceed the bound m={m}", index=z)
    return replace(state, m_bar=state.m_bar + 1)
