"""Plant, feedback law and Lyapunov certificate.

Every callable on a :class:`SystemModel` is a single-point function compiled
with numba (plain Python functions are jitted on construction).  Shapes:

    vector_field(x, u) -> (n,)     feedback(x) -> (b,)
    lyapunov(x) -> float           lyapunov_gradient(x) -> (n,)
    gamma(v) -> float              domain_guard(x) -> bool
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
from numba import njit

from . import _numerics as nx
from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class SystemModel:
    name: str
    state_dim: int
    input_dim: int
    vector_field: Callable
    feedback: Callable
    lyapunov: Callable
    lyapunov_gradient: Callable
    gamma: Callable
    domain_guard: Callable | None = None
    # K when gamma(v) = K*v; used by the exponential trigger rule
    decay_rate: float | None = None
    notes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("vector_field", "feedback", "lyapunov", "lyapunov_gradient", "gamma"):
            object.__setattr__(self, name, nx.as_jitted(getattr(self, name)))
        guard = nx.as_jitted(self.domain_guard) if self.domain_guard is not None else nx.always_true
        object.__setattr__(self, "domain_guard", guard)

    def with_gamma(self, gamma, decay_rate=None) -> "SystemModel":
        return replace(self, gamma=gamma, decay_rate=decay_rate)

    def in_domain(self, x) -> bool:
        return bool(self.domain_guard(np.asarray(x, dtype=float)))

    def require_domain(self, x):
        x = np.asarray(x, dtype=float)
        if not self.domain_guard(x):
            raise DomainError(f"state {x.tolist()} is outside the domain of model {self.name!r}")
        return x

    # vectorized helpers over arrays of states (N, n)
    def V_many(self, X):
        return nx.map_scalar(self.lyapunov, np.ascontiguousarray(X, dtype=float))

    def grad_many(self, X):
        return nx.map_vector(self.lyapunov_gradient, np.ascontiguousarray(X, dtype=float))

    def kappa_many(self, X):
        return nx.map_vector(self.feedback, np.ascontiguousarray(X, dtype=float))

    def f_many(self, X, U):
        X = np.ascontiguousarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            return nx.map_field_fixed_input(self.vector_field, X, np.ascontiguousarray(U))
        return nx.map_field(self.vector_field, X, np.ascontiguousarray(U))

    def guard_many(self, X):
        return nx.map_bool(self.domain_guard, np.ascontiguousarray(X, dtype=float))


@dataclass(frozen=True)
class LevelSet:
    """Sublevel set {x : V(x) <= c} intersected with the domain guard."""

    model: SystemModel
    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError(f"level c must be positive, got {self.c}")

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(self.model.domain_guard(x)) and self.model.lyapunov(x) <= self.c

    def contains_many(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        inside = self.model.guard_many(X)
        V = np.full(X.shape[0], np.inf)
        if inside.any():
            V[inside] = self.model.V_many(X[inside])
        return inside & (V <= self.c)

    @cached_property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return bounding_box(self)


def _ray_radius(level_set, d, r_max=1e6):
    inside = level_set.contains
    lo, hi = 0.0, 1e-3
    while inside(hi * d):
        lo, hi = hi, 2.0 * hi
        if hi > r_max:
            raise ConfigError(f"level set c={level_set.c} appears unbounded along {d.tolist()}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if inside(mid * d):
            lo = mid
        else:
            hi = mid
    return lo


def bounding_box(level_set: LevelSet, n_random=256, pad=0.05, seed=0):
    """Axis-aligned box around the level set, from bisection along rays.

    Rays: the coordinate axes, all diagonals (up to n=10) and `n_random`
    fixed pseudo-random directions. Assumes the set is star-shaped about 0.
    """
    n = level_set.model.state_dim
    if not level_set.contains(np.zeros(n)):
        raise ConfigError("the origin is not inside the level set")
    dirs = [s * e for e in np.eye(n) for s in (1.0, -1.0)]
    if n <= 10 and n > 1:
        for signs in itertools.product((1.0, -1.0), repeat=n):
            dirs.append(np.array(signs) / math.sqrt(n))
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_random, n))
    dirs.extend(g / np.linalg.norm(g, axis=1, keepdims=True))
    ext = np.zeros(n)
    for d in dirs:
        p = _ray_radius(level_set, d) * d
        ext = np.maximum(ext, np.abs(p))
    ext = ext * (1.0 + pad)
    return -ext, ext


def uniform_grid(lo, hi, density):
    axes = [np.linspace(a, b, density) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def sample_level_set(level_set: LevelSet, n, seed=0):
    """n points uniformly distributed in the level set (rejection sampling)."""
    lo, hi = level_set.bounding_box
    rng = np.random.default_rng(seed)
    out = []
    count = 0
    while count < n:
        X = rng.uniform(lo, hi, size=(max(2 * n, 1024), lo.size))
        X = X[level_set.contains_many(X)]
        out.append(X)
        count += X.shape[0]
    return np.concatenate(out)[:n]


def lie_derivative(model: SystemModel, x, u) -> float:
    """V'(x) f(x, u)."""
    x = model.require_domain(x)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(np.dot(model.lyapunov_gradient(x), model.vector_field(x, u)))


@dataclass(frozen=True)
class DecayConditionReport:
    passed: bool
    max_margin: float       # max of L_fV(x, kappa(x)) + gamma(V(x)) over the grid
    worst_point: np.ndarray
    decay_rate: float       # min over grid of -L_fV / V
    n_points: int


def check_assumption1(model: SystemModel, level_set: LevelSet, grid_density=201, tol=1e-9):
    lo, hi = level_set.bounding_box
    X = uniform_grid(lo, hi, grid_density)
    X = X[level_set.contains_many(X)]
    if X.shape[0] == 0:
        raise ConfigError("grid has no points inside the level set")
    V, lfv = nx.closed_loop_decay(model.vector_field, model.feedback, model.lyapunov,
                                  model.lyapunov_gradient, X)
    gam = gamma_values(model, V)
    margin = lfv + gam
    worst = int(np.argmax(margin))
    pos = V > 0
    if not pos.any():
        raise ConfigError("no grid point with V > 0 inside the level set")
    rate = float(np.min(-lfv[pos] / V[pos]))
    return DecayConditionReport(
        passed=bool(margin[worst] <= tol),
        max_margin=float(margin[worst]),
        worst_point=X[worst],
        decay_rate=rate,
        n_points=int(X.shape[0]),
    )


@lru_cache(maxsize=None)
def _wrap_scalar(gamma):
    @njit
    def g(v):
        return gamma(v[0])
    return g


def gamma_values(model: SystemModel, v):
    v = np.ascontiguousarray(np.atleast_1d(v), dtype=float)
    return nx.map_scalar(_wrap_scalar(model.gamma), v[:, None])


def check_class_k(gamma, upper, n=1001) -> bool:
    """gamma(0) = 0 and strictly increasing on a uniform grid over [0, upper]."""
    v = np.linspace(0.0, upper, n)
    g = np.array([gamma(float(s)) for s in v])
    return bool(g[0] == 0.0 and np.all(np.diff(g) > 0))


@dataclass(frozen=True)
class ModelCheckReport:
    equilibrium: bool
    lyapunov_zero: bool
    positive_definite: bool
    gradient_matches: bool
    gamma_class_k: bool
    max_gradient_error: float

    @property
    def passed(self):
        return all((self.equilibrium, self.lyapunov_zero, self.positive_definite,
                    self.gradient_matches, self.gamma_class_k))


def check_model_invariants(model: SystemModel, level_set: LevelSet, n_points=1000, seed=0,
                           fd_step=1e-6, grad_rtol=1e-6):
    n, b = model.state_dim, model.input_dim
    f00 = model.vector_field(np.zeros(n), np.zeros(b))
    equilibrium = bool(np.all(np.abs(f00) <= 1e-12))
    lyapunov_zero = model.lyapunov(np.zeros(n)) == 0.0
    X = sample_level_set(level_set, n_points, seed=seed)
    X = X[np.linalg.norm(X, axis=1) > 0]
    positive = bool(np.all(model.V_many(X) > 0))
    G = model.grad_many(X)
    G_fd = np.empty_like(G)
    for j in range(n):
        e = np.zeros(n)
        e[j] = fd_step
        G_fd[:, j] = (model.V_many(X + e) - model.V_many(X - e)) / (2 * fd_step)
    err = np.linalg.norm(G - G_fd, axis=1) / np.maximum(np.linalg.norm(G, axis=1), 1e-6)
    return ModelCheckReport(
        equilibrium=equilibrium,
        lyapunov_zero=bool(lyapunov_zero),
        positive_definite=positive,
        gradient_matches=bool(err.max() <= grad_rtol),
        gamma_class_k=check_class_k(model.gamma, level_set.c),
        max_gradient_error=float(err.max()),
    )


def linear_rate(K):
    """gamma(v) = K v, compiled with K frozen in."""
    K = float(K)

    @njit
    def gamma(v):
        return K * v
    return gamma


# -- pendulum ---------------------------------------------------------------

OMEGA0 = 0.1
PENDULUM_C = 0.258
# fraction of the grid-minimal decay rate kept, so off-grid points satisfy
# L_fV <= -K V with slack
PENDULUM_RATE_BACKOFF = 0.99


@njit(cache=True)
def _pendulum_f(x, u):
    out = np.empty(2)
    out[0] = x[1]
    out[1] = (np.sin(x[0]) - u[0] * np.cos(x[0])) * OMEGA0
    return out


@njit(cache=True)
def _pendulum_kappa(x):
    out = np.empty(1)
    out[0] = (31.6 * x[0] + 40.4 * x[1] + np.sin(x[0])) / np.cos(x[0])
    return out


@njit(cache=True)
def _pendulum_V(x):
    return 1.278 * x[0] * x[0] + 0.632 * x[0] * x[1] + 0.404 * x[1] * x[1]


@njit(cache=True)
def _pendulum_dV(x):
    out = np.empty(2)
    out[0] = 2.556 * x[0] + 0.632 * x[1]
    out[1] = 0.632 * x[0] + 0.808 * x[1]
    return out


@njit(cache=True)
def _pendulum_guard(x):
    return abs(x[0]) < 0.5 * np.pi


@njit(cache=True)
def _zero_gamma(v):
    return 0.0


PENDULUM_P = np.array([[1.278, 0.316], [0.316, 0.404]])


@lru_cache(maxsize=None)
def pendulum_preset(c=PENDULUM_C, grid_density=201):
    """Inverted pendulum with omega0 = 0.1 and the quadratic certificate V = x'Px.

    gamma(v) = K v, where K is the grid-minimal decay rate -L_fV/V over the
    level set (about 1.2826 for c = 0.258) scaled by PENDULUM_RATE_BACKOFF.
    Returns (model, level_set).
    """
    base = SystemModel(
        name="pendulum",
        state_dim=2,
        input_dim=1,
        vector_field=_pendulum_f,
        feedback=_pendulum_kappa,
        lyapunov=_pendulum_V,
        lyapunov_gradient=_pendulum_dV,
        gamma=_zero_gamma,
        domain_guard=_pendulum_guard,
    )
    report = check_assumption1(base, LevelSet(base, c), grid_density=grid_density)
    K = report.decay_rate * PENDULUM_RATE_BACKOFF
    model = replace(base, gamma=linear_rate(K), decay_rate=K,
                    notes={"grid_decay_rate": report.decay_rate, "rate_backoff": PENDULUM_RATE_BACKOFF})
    return model, LevelSet(model, c)


PRESETS = {"pendulum": pendulum_preset}


def get_preset(name, **params):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; available: {sorted(PRESETS)}") from None
    return factory(**params)
