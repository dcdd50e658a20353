"""Post-hoc checks of a closed-loop run.

Every check reports a signed worst margin  lhs - rhs  (positive means the
inequality is violated by that amount, in V-units unless stated) and passes
when the margin does not exceed its tolerance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _numerics as nx
from .dynamics import gamma_values
from .errors import ConfigError, PreconditionError
from .trajlog import TrajectoryLog

log = logging.getLogger(__name__)


def solve_reference(gamma, sigma, V0, times, substeps=1) -> np.ndarray:
    """S on `times` for dS/dt = -sigma*gamma(S), S(times[0]) = V0 (RK4 between grid points)."""
    if V0 < 0:
        raise ConfigError(f"V0 must be nonnegative, got {V0}")
    times = np.ascontiguousarray(times, dtype=float)
    return nx.solve_comparison(nx.as_jitted(gamma), float(sigma), float(V0), times, int(substeps))


def reference_function(gamma, sigma, V0, max_step=1e-3):
    """S(t) as a callable, integrated from 0 with steps no larger than max_step."""
    def S(t):
        if t <= 0:
            return float(V0)
        sub = max(1, math.ceil(t / max_step))
        return float(solve_reference(gamma, sigma, V0, np.array([0.0, t]), substeps=sub)[-1])
    return S


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    location: int
    tol: float
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self):
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [f"{c.name} = {'pass' if c.passed else 'FAIL'}  worst_margin = {c.worst_margin:.6e}"
                 f"  tol = {c.tol:.3e}  location = {c.location}" + (f"  ({c.detail})" if c.detail else "")
                 for c in self.checks]
        lines.append(f"verdict = {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["check,pass,worst_margin,location"]
        rows += [f"{c.name},{int(c.passed)},{c.worst_margin:.16e},{c.location}" for c in self.checks]
        return "\n".join(rows) + "\n"


def _result(name, margin, tol, detail="", offset=0):
    if margin.size == 0:
        return CheckResult(name, True, -math.inf, -1, tol, detail or "vacuous")
    i = int(np.argmax(margin))
    return CheckResult(name, bool(margin[i] <= tol), float(margin[i]), i + offset, tol, detail)


def default_tolerance(traj: TrajectoryLog, model, c) -> float:
    """1e-7 max(V(x0), 1e-3 c) plus an integrator allowance 10 dt^4 |f|max."""
    dt = traj.h / traj.meta.get("substeps", 1)
    fscale = float(np.linalg.norm(model.f_many(traj.x, traj.u), axis=1).max())
    return 1e-7 * max(float(traj.V[0]), 1e-3 * c) + 10.0 * dt ** 4 * fscale


def _check_grid(traj, h, S=None):
    if S is not None and len(S) != len(traj):
        raise ConfigError(f"reference has {len(S)} points, log has {len(traj)}")
    if not np.allclose(traj.t, traj.z * h, rtol=1e-9, atol=1e-15):
        raise ConfigError("log time column is not on the sampling grid t = z h")


def check_shifted_criterion(traj: TrajectoryLog, S, m, h, tol=None) -> CheckResult:
    """V(x((z+m+1)h)) <= S(zh) at every grid index where both exist."""
    S = np.asarray(S, dtype=float)
    _check_grid(traj, h, S)
    tol = 1e-7 * float(traj.V[0]) if tol is None else tol
    shift = m + 1
    margin = traj.V[shift:] - S[:-shift] if len(traj) > shift else np.empty(0)
    return _result("shifted_criterion", margin, tol, f"shift = {shift} samples")


def decrease_envelope(rule, V_start, dt, sigma, gamma_start):
    """Value V at the next successful transmission must not exceed.
    Linear and adaptive rules: V - dt sigma gamma(V); exponential: exp(-K sigma dt) V."""
    if rule is not None and rule.kind == "exponential":
        return np.exp(-rule.rate * sigma * dt) * V_start
    return V_start - dt * sigma * gamma_start


def check_nonmonotonic(traj: TrajectoryLog, constants, model, rule=None, tol=None) -> CheckResult:
    """Between consecutive successful transmissions: V stays below its value at
    the earlier one, and the average decrease meets the rule's envelope.
    The combined function (V(x) + V(xhat)) / 2 is checked along the grid as well."""
    tol = 1e-7 * float(traj.V[0]) if tol is None else tol
    idx = traj.success_index
    if idx.size < 2:
        log.warning("fewer than two successful transmissions; non-monotonic decrease holds vacuously")
        return CheckResult("nonmonotonic", True, -math.inf, -1, tol, "vacuous: single transmission")
    seg = slice(idx[0], idx[-1] + 1)
    starts = idx[:-1] - idx[0]
    V = traj.V[seg]
    peak = np.maximum(np.maximum.reduceat(V, starts)[: starts.size], traj.V[idx[1:]])
    bound_margin = peak - traj.V[idx[:-1]]

    V0, V1 = traj.V[idx[:-1]], traj.V[idx[1:]]
    dt = traj.t[idx[1:]] - traj.t[idx[:-1]]
    gam = gamma_values(model, V0)
    decrease_margin = V1 - decrease_envelope(rule, V0, dt, constants.sigma, gam)

    combined = 0.5 * (traj.V + model.V_many(traj.xhat))
    cseg = combined[seg]
    cpeak = np.maximum(np.maximum.reduceat(cseg, starts)[: starts.size], combined[idx[1:]])
    combined_margin = cpeak - combined[idx[:-1]]
    combined_drop = float(np.max(np.diff(combined[idx])))

    parts = {"bound": bound_margin, "decrease": decrease_margin, "combined": combined_margin}
    worst_name = max(parts, key=lambda k: parts[k].max())
    k = int(np.argmax(parts[worst_name]))
    worst = float(parts[worst_name][k])
    detail = (f"bound {bound_margin.max():.3e}, decrease {decrease_margin.max():.3e}, "
              f"combined {combined_margin.max():.3e}, max combined change {combined_drop:.3e}, "
              f"{idx.size} transmissions, worst part {worst_name}")
    return CheckResult("nonmonotonic", worst <= tol, worst, int(idx[k]), tol, detail)


def check_level_set(traj: TrajectoryLog, c, tol=None) -> CheckResult:
    tol = 1e-7 * c if tol is None else tol
    return _result("level_set_invariance", traj.V - c, tol)


def _next_success(traj):
    """For each z, the first successful-transmission index strictly after z."""
    N = len(traj)
    idx = traj.success_index
    pos = np.searchsorted(idx, np.arange(N), side="right")
    return np.where(pos < idx.size, idx[np.minimum(pos, idx.size - 1)], N - 1)


def check_bound_validity(traj: TrajectoryLog, model, constants, tol=None) -> CheckResult:
    """Realized V(x(zh + jh)) never exceeds the integrated derivative bound
    V + r L_fV + (2/3) r^(3/2) mu (|V'||f| + |f|^2) evaluated at x(zh) with the
    input applied after instant z, for r = jh up to the trigger horizon and not
    past the next input change."""
    tol = 1e-7 * float(traj.V[0]) if tol is None else tol
    N, h, m = len(traj), traj.h, constants.m
    success = traj.sent & traj.delivered
    m_eff = np.where(success, 0, traj.m_bar)
    horizon = m - m_eff + 1
    F = model.f_many(traj.x, traj.u)
    G = model.grad_many(traj.x)
    lfv = np.einsum("ij,ij->i", G, F)
    fn = np.linalg.norm(F, axis=1)
    growth = np.linalg.norm(G, axis=1) * fn + fn ** 2
    nxt = _next_success(traj)
    z = np.arange(N)
    r_max = 1.0 / (1.0 + 2.0 * constants.L1c)
    worst, loc, count, skipped = -math.inf, -1, 0, 0
    for j in range(1, m + 2):
        valid = (j <= horizon) & (z + j <= nxt) & (z + j < N)
        if j * h > r_max:
            skipped += int(valid.sum())
            continue
        zz = z[valid]
        if zz.size == 0:
            continue
        r = j * h
        vb = traj.V[zz] + r * lfv[zz] + (2.0 / 3.0) * r ** 1.5 * constants.mu_c * growth[zz]
        margin = traj.V[zz + j] - vb
        k = int(np.argmax(margin))
        count += zz.size
        if margin[k] > worst:
            worst, loc = float(margin[k]), int(zz[k])
    detail = f"{count} (instant, offset) pairs"
    if skipped:
        detail += f", {skipped} skipped beyond (1+2 L1)^-1"
    return CheckResult("bound_validity", worst <= tol, worst, loc, tol, detail)


def check_sigma_consistency(traj: TrajectoryLog, model, constants, rtol=1e-9) -> CheckResult:
    """Logged sigma_z against an independent re-evaluation V_bound(x, horizon) - V(x)
    with the input held before the decision. Margin is relative error."""
    if len(traj) < 2:
        return CheckResult("sigma_z_consistency", True, -math.inf, -1, rtol, "vacuous")
    X, U = traj.x[1:], traj.u[:-1]
    F = model.f_many(X, U)
    G = model.grad_many(X)
    lfv = np.einsum("ij,ij->i", G, F)
    fn = np.linalg.norm(F, axis=1)
    growth = np.linalg.norm(G, axis=1) * fn + fn ** 2
    r = traj.h * (constants.m - traj.m_bar[1:] + 1)
    expect = r * lfv + (2.0 / 3.0) * r ** 1.5 * constants.mu_c * growth
    scale = np.abs(r * lfv) + (2.0 / 3.0) * r ** 1.5 * constants.mu_c * growth + 1e-300
    err = np.abs(traj.sigma_z[1:] - expect) / scale
    return _result("sigma_z_consistency", err, rtol, offset=1)


def check_transmission_gaps(traj: TrajectoryLog, nu, m) -> CheckResult:
    """h <= tau_{k+1} - tau_k <= (nu + m + 1) h. Margin in sampling periods."""
    g = np.diff(traj.success_index)
    if g.size == 0:
        return CheckResult("transmission_gaps", True, -math.inf, -1, 0.0, "vacuous")
    margin = np.maximum(g - (nu + m + 1), 1 - g).astype(float)
    res = _result("transmission_gaps", margin, 0.0, f"max gap {g.max()} samples, bound {nu + m + 1}")
    return CheckResult(res.name, res.passed, res.worst_margin, int(traj.success_index[res.location]),
                       res.tol, res.detail)


def check_proposition3(C1, C2, r, s, S, gamma, sigma, tol=1e-12) -> bool:
    """Whether C1 <= C2 - r sigma gamma(C2); when it does, also confirms
    C1 <= S(s + r) on the solved reference (raises AssertionError otherwise)."""
    if min(C1, C2, r, s) < 0:
        raise PreconditionError("C1, C2, r, s must be nonnegative")
    Ss = S(s)
    if C2 > Ss + tol:
        raise PreconditionError(f"C2 = {C2} exceeds S(s) = {Ss}")
    holds = C1 <= C2 - r * sigma * gamma(C2)
    if holds:
        Ssr = S(s + r)
        if C1 > Ssr + tol:
            raise AssertionError(f"C1 = {C1} exceeds S(s+r) = {Ssr}")
    return bool(holds)


def verify_run(traj: TrajectoryLog, model, level_set, constants, rule=None, nu=None,
               tol=None) -> VerificationReport:
    """All checks; the comparison system is re-solved from the model, not read from the log."""
    tol = default_tolerance(traj, model, level_set.c) if tol is None else tol
    S = solve_reference(model.gamma, constants.sigma, float(traj.V[0]), traj.t,
                        substeps=traj.meta.get("substeps", 1))
    checks = [
        check_shifted_criterion(traj, S, constants.m, traj.h, tol),
        check_nonmonotonic(traj, constants, model, rule, tol),
        check_level_set(traj, level_set.c, max(tol, 1e-7 * level_set.c)),
        check_bound_validity(traj, model, constants, tol),
        check_sigma_consistency(traj, model, constants),
    ]
    if nu is not None:
        checks.append(check_transmission_gaps(traj, nu, constants.m))
    return VerificationReport(checks)
