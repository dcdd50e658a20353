"""Closed-loop simulation of the sampled, event-triggered system.

Two interchangeable backends produce identical logs:

* ``"reference"`` walks the trigger and channel objects step by step,
* ``"compiled"`` (default) runs the same arithmetic in one numba loop, which is
  what makes runs with ~10^5-10^6 sampling instants practical.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from . import _numerics as nx
from . import trigger as trg
from .certify import CertificationConstants
from .channel import ChannelModel
from .dynamics import LevelSet, SystemModel
from .errors import ConfigError, DomainError, ProtocolViolation
from .trajlog import TrajectoryLog
from .verify import solve_reference

log = logging.getLogger(__name__)


def integrate_interval(model: SystemModel, x, u, dt, substeps=1) -> np.ndarray:
    """x(dt) for dx/dt = f(x, u) with u held, by `substeps` RK4 steps."""
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    out, bad = nx.rk4(model.vector_field, model.domain_guard, x, u, float(dt), int(substeps))
    if bad >= 0:
        t_exit = (bad + 1) * dt / substeps
        raise DomainError(f"state left the domain at t = {t_exit:.6g} within the interval", time=t_exit)
    return out


@dataclass
class SimConfig:
    model: SystemModel
    level_set: LevelSet
    constants: CertificationConstants
    channel: ChannelModel           # template; each run works on a fresh copy
    x0: np.ndarray
    horizon: float
    rule: trg.TriggerRule = trg.TriggerRule()
    nu: int | None = None           # None: default_nu from sigma, K and h
    substeps: int = 1
    h: float | None = None          # diagnostic override of the certified period

    def effective_constants(self) -> CertificationConstants:
        if self.h is None:
            return self.constants
        return replace(self.constants, h=float(self.h))

    def effective_nu(self) -> int:
        if self.nu is not None:
            return int(self.nu)
        rate = self.model.decay_rate or self.rule.rate
        if not rate:
            raise ConfigError("nu not given and the model has no linear decay rate to derive it from")
        c = self.effective_constants()
        return trg.default_nu(c.sigma, rate, c.h)

    def n_steps(self) -> int:
        h = self.effective_constants().h
        return int(math.floor(self.horizon / h + 1e-9))

    def validate(self):
        c = self.effective_constants()
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.model.state_dim,):
            raise ConfigError(f"x0 must have {self.model.state_dim} entries")
        if not self.level_set.contains(x0):
            raise ConfigError(
                f"x0 = {x0.tolist()} is outside the region of attraction X_c "
                f"(V(x0) = {self.model.lyapunov(x0):.6g} > c = {self.level_set.c})")
        if self.horizon < c.h:
            raise ConfigError(f"horizon {self.horizon} is shorter than one sampling period {c.h}")
        if self.channel.m != c.m:
            raise ConfigError(f"channel loss bound m={self.channel.m} differs from certified m={c.m}")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if not c.compliant:
            log.warning("(m+1) h = %.3e exceeds h_sigma_masp = %.3e: guarantees do not apply",
                        (c.m + 1) * c.h, c.h_sigma_masp)


OK, DOMAIN, PROTOCOL = 0, 1, 2


@njit(nogil=True)
def _closed_loop(f, kappa, V, dV, gamma, guard, x0, h, substeps, n_steps, m, mu, sigma, nu,
                 rule, rate, cn_starts, cn_values, periodic, chan_mode, chan_p, stream,
                 X, XH, U, VV, SENT, DELIV, REASON, SIGZ, THR, MBAR):
    x = x0.copy()
    xhat = x.copy()
    u = kappa(x)
    i_ref = 0
    v_ref = V(x)
    m_bar = 0
    attempts = 0
    fails = 0
    for z in range(n_steps + 1):
        if z == 0:
            SENT[0] = True
            DELIV[0] = True
            REASON[0] = 0
            SIGZ[0] = np.nan
            THR[0] = np.nan
            MBAR[0] = 0
        else:
            if not guard(x):
                return DOMAIN, z, attempts, fails
            v, lfv, gn, fn = nx.trigger_quantities(f, V, dV, x, u)
            sz = nx.sigma_z_core(lfv, gn, fn, h * (m - m_bar + 1), mu)
            steps = z - i_ref + m - m_bar + 1
            cn = nx.schedule_value(cn_starts, cn_values, z)
            thr = nx.threshold_core(rule, v_ref, steps, h, sigma, gamma(v_ref), rate, cn)
            if periodic:
                reason = 4
            elif z - i_ref > nu:
                reason = 1
            elif v + sz >= thr:
                reason = 2
            else:
                reason = 3
            MBAR[z] = m_bar
            SIGZ[z] = sz
            THR[z] = thr
            REASON[z] = reason
            send = reason != 3
            SENT[z] = send
            delivered = False
            if send:
                # mirrors ChannelModel.attempt
                if chan_mode == 0:
                    delivered = True
                elif chan_mode == 1:
                    delivered = not (stream[attempts] < chan_p and fails < m)
                else:
                    d = stream[attempts]
                    delivered = np.isnan(d) or d > 0.5 or fails >= m
                attempts += 1
                if delivered:
                    fails = 0
                    i_ref = z
                    v_ref = v
                    m_bar = 0
                    u = kappa(x)
                    xhat = x.copy()
                else:
                    fails += 1
                    if m_bar + 1 > m:
                        return PROTOCOL, z, attempts, fails
                    m_bar += 1
            DELIV[z] = delivered
        X[z] = x
        XH[z] = xhat
        U[z] = u
        VV[z] = V(x)
        if z < n_steps:
            x, bad = nx.rk4(f, guard, x, u, h, substeps)
            if bad >= 0:
                return DOMAIN, z, attempts, fails
    return OK, -1, attempts, fails


def _allocate(N, n, b):
    return dict(X=np.empty((N, n)), XH=np.empty((N, n)), U=np.empty((N, b)), VV=np.empty(N),
                SENT=np.zeros(N, dtype=np.bool_), DELIV=np.zeros(N, dtype=np.bool_),
                REASON=np.zeros(N, dtype=np.int8), SIGZ=np.empty(N), THR=np.empty(N),
                MBAR=np.zeros(N, dtype=np.int64))


def _run_compiled(cfg: SimConfig, periodic):
    model, c = cfg.model, cfg.effective_constants()
    N = cfg.n_steps() + 1
    buf = _allocate(N, model.state_dim, model.input_dim)
    chan = cfg.channel.fresh()
    sched = cfg.rule.schedule or trg.CnSchedule()
    status, where, attempts, fails = _closed_loop(
        model.vector_field, model.feedback, model.lyapunov, model.lyapunov_gradient, model.gamma,
        model.domain_guard, np.asarray(cfg.x0, dtype=float), c.h, cfg.substeps, N - 1, c.m, c.mu_c,
        c.sigma, cfg.effective_nu(), cfg.rule.code, cfg.rule.rate or 0.0, sched.starts, sched.values,
        periodic, chan.code, chan.p, chan.stream(N), **buf)
    if status == DOMAIN:
        raise DomainError(f"state left the domain of {model.name!r} after sampling index {where}",
                          index=where, time=where * c.h)
    if status == PROTOCOL:
        raise ProtocolViolation(f"loss bound m={c.m} exceeded at sampling index {where}", index=where)
    chan.advance(attempts, fails)
    return buf, chan


def _run_reference(cfg: SimConfig, periodic):
    model, c = cfg.model, cfg.effective_constants()
    N = cfg.n_steps() + 1
    buf = _allocate(N, model.state_dim, model.input_dim)
    chan = cfg.channel.fresh()
    x = np.asarray(cfg.x0, dtype=float).copy()
    state = trg.initialize(x, model, cfg.effective_nu(), cfg.rule)
    xhat = x.copy()
    for z in range(N):
        if z == 0:
            buf["SENT"][0] = buf["DELIV"][0] = True
            buf["REASON"][0] = trg.Reason.INITIAL
            buf["SIGZ"][0] = buf["THR"][0] = np.nan
        else:
            try:
                d = trg.evaluate(z, x, model, c, state)
            except DomainError as exc:
                raise DomainError(str(exc), index=z, time=z * c.h) from None
            reason = trg.Reason.PERIODIC if periodic else d.reason
            buf["MBAR"][z] = state.m_bar
            buf["SIGZ"][z], buf["THR"][z], buf["REASON"][z] = d.sigma_z, d.threshold, reason
            send = reason != trg.Reason.NO_SEND
            buf["SENT"][z] = send
            if send:
                ok = chan.attempt(z)
                buf["DELIV"][z] = ok
                state = trg.on_transmission_result(state, z, x, model, ok, c.m)
                if ok:
                    xhat = x.copy()
        buf["X"][z], buf["XH"][z], buf["U"][z] = x, xhat, state.u_star
        buf["VV"][z] = model.lyapunov(x)
        if z < N - 1:
            try:
                x = integrate_interval(model, x, state.u_star, c.h, cfg.substeps)
            except DomainError as exc:
                raise DomainError(str(exc), index=z, time=z * c.h) from None
    return buf, chan


def _simulate(cfg: SimConfig, periodic, backend):
    cfg.validate()
    c = cfg.effective_constants()
    if backend == "compiled":
        buf, chan = _run_compiled(cfg, periodic)
    elif backend == "reference":
        buf, chan = _run_reference(cfg, periodic)
    else:
        raise ConfigError(f"unknown backend {backend!r}")
    N = buf["VV"].size
    z = np.arange(N, dtype=np.int64)
    t = z * c.h
    S = solve_reference(cfg.model.gamma, c.sigma, float(buf["VV"][0]), t, substeps=cfg.substeps)
    meta = dict(model=cfg.model.name, rule=cfg.rule.kind, nu=cfg.effective_nu(),
                substeps=cfg.substeps, method="rk4", periodic=periodic, backend=backend,
                channel_mode=chan.mode, channel_seed=chan.seed, channel_p=chan.p,
                attempts=chan.attempts, compliant=c.compliant)
    return TrajectoryLog(h=c.h, m=c.m, z=z, t=t, x=buf["X"], xhat=buf["XH"], u=buf["U"], V=buf["VV"],
                         S=S, sent=buf["SENT"], delivered=buf["DELIV"], reason=buf["REASON"],
                         sigma_z=buf["SIGZ"], threshold=buf["THR"], m_bar=buf["MBAR"], meta=meta)


def run(config: SimConfig, backend="compiled") -> TrajectoryLog:
    """Event-triggered closed loop over z = 0 .. floor(horizon / h)."""
    return _simulate(config, False, backend)


def run_periodic_baseline(config: SimConfig, backend="compiled") -> TrajectoryLog:
    """Same loop, transmitting at every sampling instant (time-triggered)."""
    return _simulate(config, True, backend)
