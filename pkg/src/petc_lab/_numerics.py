"""Compiled numerical kernels shared by the Python-level API and the fast
closed-loop engine.

Model callables are numba-jitted single-point functions; the kernels here take
them as first-class arguments so a single compiled loop serves any model.
"""
import numpy as np
from numba import njit
from numba.extending import is_jitted


def as_jitted(fn):
    if fn is None or is_jitted(fn):
        return fn
    return njit(fn)


@njit(cache=True)
def always_true(x):
    return True


@njit(cache=True)
def norm(v):
    return np.sqrt(np.dot(v, v))


@njit
def rk4(f, guard, x, u, dt, substeps):
    """Classical RK4 under a held input. Returns (state, failed_substep);
    failed_substep is -1 unless the guard rejected a substep end point."""
    step = dt / substeps
    half = 0.5 * step
    sixth = step / 6.0
    for i in range(substeps):
        k1 = f(x, u)
        k2 = f(x + half * k1, u)
        k3 = f(x + half * k2, u)
        k4 = f(x + step * k3, u)
        x = x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not guard(x):
            return x, i
    return x, -1


@njit
def trigger_quantities(f, V, dV, x, u):
    """V(x), L_fV(x,u), |V'(x)| and |f(x,u)| in one pass."""
    fx = f(x, u)
    g = dV(x)
    return V(x), np.dot(g, fx), norm(g), norm(fx)


@njit(cache=True)
def sigma_z_core(lfv, grad_norm, f_norm, horizon, mu):
    growth = grad_norm * f_norm + f_norm * f_norm
    return horizon * lfv + (2.0 / 3.0) * horizon ** 1.5 * mu * growth


LINEAR = 0
EXPONENTIAL = 1
ADAPTIVE = 2


@njit(cache=True)
def threshold_core(rule, v_ref, steps, h, sigma, gamma_vref, rate, cn):
    if rule == EXPONENTIAL:
        return np.exp(-rate * sigma * steps * h) * v_ref
    if rule == ADAPTIVE:
        return v_ref - steps * h * (sigma + cn) * gamma_vref
    return v_ref - steps * h * sigma * gamma_vref


@njit(cache=True)
def schedule_value(starts, values, z):
    out = 0.0
    for i in range(starts.shape[0]):
        if starts[i] <= z:
            out = values[i]
        else:
            break
    return out


# vectorized evaluation of single-point model functions

@njit
def map_scalar(fn, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = fn(X[i])
    return out


@njit
def map_bool(fn, X):
    out = np.empty(X.shape[0], dtype=np.bool_)
    for i in range(X.shape[0]):
        out[i] = fn(X[i])
    return out


@njit
def map_vector(fn, X):
    first = fn(X[0])
    out = np.empty((X.shape[0], first.shape[0]))
    out[0] = first
    for i in range(1, X.shape[0]):
        out[i] = fn(X[i])
    return out


@njit
def map_field(f, X, U):
    first = f(X[0], U[0])
    out = np.empty((X.shape[0], first.shape[0]))
    out[0] = first
    for i in range(1, X.shape[0]):
        out[i] = f(X[i], U[i])
    return out


@njit
def map_field_fixed_input(f, X, u):
    first = f(X[0], u)
    out = np.empty((X.shape[0], first.shape[0]))
    out[0] = first
    for i in range(1, X.shape[0]):
        out[i] = f(X[i], u)
    return out


@njit
def closed_loop_decay(f, kappa, V, dV, X):
    """V(x) and L_fV(x, kappa(x)) over the rows of X in one pass."""
    v = np.empty(X.shape[0])
    lfv = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        x = X[i]
        v[i] = V(x)
        lfv[i] = np.dot(dV(x), f(x, kappa(x)))
    return v, lfv


@njit
def solve_comparison(gamma, sigma, v0, times, substeps):
    """RK4 for dS/dt = -sigma*gamma(S) on an arbitrary time grid."""
    out = np.empty(times.shape[0])
    s = v0
    out[0] = s
    for i in range(1, times.shape[0]):
        dt = (times[i] - times[i - 1]) / substeps
        for _ in range(substeps):
            k1 = -sigma * gamma(s)
            k2 = -sigma * gamma(max(s + 0.5 * dt * k1, 0.0))
            k3 = -sigma * gamma(max(s + 0.5 * dt * k2, 0.0))
            k4 = -sigma * gamma(max(s + dt * k3, 0.0))
            s_new = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            # exact solution is nonincreasing and bounded below by 0
            s = min(max(s_new, 0.0), s)
        out[i] = s
    return out
