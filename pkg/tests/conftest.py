from pathlib import Path

import numpy as np
import pytest
from numba import njit

from petc_lab import certify, dynamics
from petc_lab.channel import bernoulli
from petc_lab.engine import SimConfig

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# constants pinned so that (3(1 - sigma) / (2 mu M))^2 = 2.77e-5 at sigma = 0.35
REF_L1 = 1.65
REF_L2 = 2.760563859954523
REF_SIGMA = 0.35
REF_H_SIGMA = 2.77e-5


def reference_overrides():
    mu = certify.compute_mu(REF_L1, REF_L2)
    M = 3 * (1 - REF_SIGMA) / (2 * mu * np.sqrt(REF_H_SIGMA))
    return {"L1c": REF_L1, "L2c": REF_L2, "M_max_c": float(M)}


@pytest.fixture(scope="session")
def pendulum():
    return dynamics.pendulum_preset()


@pytest.fixture(scope="session")
def reference_constants(pendulum):
    model, ls = pendulum
    cfg = certify.EstimationConfig(overrides=reference_overrides())
    return certify.certify_system(model, ls, REF_SIGMA, 1, config=cfg)


@pytest.fixture
def reference_sim(pendulum, reference_constants):
    """5 s pendulum run with the certified h, Bernoulli(0.5, m=1) channel."""
    model, ls = pendulum

    def make(seed=1, horizon=5.0, **kw):
        return SimConfig(model, ls, reference_constants, bernoulli(0.5, 1, seed=seed),
                         np.array([0.43, 0.0]), horizon, **kw)
    return make


# -- small analytic models --------------------------------------------------

@njit
def _zero_input(x):
    return np.zeros(1)


def linear_model(A, P, K=1.0, name="linear"):
    """dx/dt = A x (input ignored), V = x'Px, gamma(v) = K v."""
    A = np.ascontiguousarray(A, dtype=float)
    P = np.ascontiguousarray(P, dtype=float)

    @njit
    def f(x, u):
        return A @ x

    @njit
    def V(x):
        return x @ (P @ x)

    @njit
    def dV(x):
        return 2.0 * (P @ x)

    return dynamics.SystemModel(name, A.shape[0], 1, f, _zero_input, V, dV,
                                dynamics.linear_rate(K), decay_rate=K)


@njit
def _scalar_decay_f(x, u):
    return -x + u


@njit
def _scalar_V(x):
    return x[0] * x[0]


@njit
def _scalar_dV(x):
    return 2.0 * x


@pytest.fixture(scope="session")
def scalar_decay():
    """dx/dt = -x + u, u = 0, V = x^2 (so L_fV = -2V)."""
    model = dynamics.SystemModel("scalar", 1, 1, _scalar_decay_f, _zero_input, _scalar_V,
                                 _scalar_dV, dynamics.linear_rate(2.0), decay_rate=2.0)
    return model, dynamics.LevelSet(model, 1.0)
