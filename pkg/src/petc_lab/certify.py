"""Level-set constants, the sigma-MASP bound and the sampling period.

Suprema are estimated on a scrambled Halton sequence filtered to the level
set.  Each estimator evaluates the nested prefixes N, N/2, N/4, ... of that
sequence and returns the maximum, so doubling the sample count can never lower
an estimate.  Sampled suprema are lower bounds of the true values; a safety
factor (default 1.1) is applied before the bound is formed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .dynamics import LevelSet, SystemModel
from .errors import AssumptionViolation, ConfigError

SQRT_E = math.sqrt(math.e)
MIN_LEVEL = 64
CONSTANT_NAMES = ("L1c", "L2c", "M_max_c", "mu_c")


def halton_in_set(level_set: LevelSet, samples: int, seed: int = 0) -> np.ndarray:
    """First `samples` points of a scrambled Halton sequence over the bounding
    box that fall inside the level set. Prefixes are stable in `samples`."""
    lo, hi = level_set.bounding_box
    engine = qmc.Halton(d=lo.size, scramble=True, seed=seed)
    batch = max(2 * samples, 1024)
    chunks, count, drawn = [], 0, 0
    while count < samples:
        U = engine.random(batch)
        drawn += batch
        X = qmc.scale(U, lo, hi)
        X = X[level_set.contains_many(X)]
        chunks.append(X)
        count += X.shape[0]
        if drawn > 1000 * max(samples, 1000) and count < 2:
            break
    pts = np.concatenate(chunks)[:samples] if chunks else np.empty((0, lo.size))
    if pts.shape[0] < 2:
        raise ConfigError(f"fewer than 2 sample points found inside the level set c={level_set.c}")
    return pts


def _levels(n):
    sizes = [n]
    while sizes[-1] // 2 >= MIN_LEVEL:
        sizes.append(sizes[-1] // 2)
    return sizes


def _pairs(X, neighbors):
    """Index pairs: k nearest neighbours of every point, plus antipodal-stride
    pairs (i, i + N/2) probing long-range quotients."""
    N = X.shape[0]
    k = min(neighbors, N - 1)
    _, idx = cKDTree(X).query(X, k=k + 1)
    I = np.repeat(np.arange(N), k)
    J = idx[:, 1:].ravel()
    half = N // 2
    I = np.concatenate([I, np.arange(N - half)])
    J = np.concatenate([J, np.arange(N - half) + half])
    keep = I != J
    return I[keep], J[keep]


def _max_quotient(values, X, I, J):
    num = np.linalg.norm(values[I] - values[J], axis=1)
    den = np.linalg.norm(X[I] - X[J], axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0


def _input_candidates(model, X, n_inputs):
    """Feedback values used as the frozen input kappa(x3): the first n_inputs
    points of the sequence plus the n_inputs points with largest |kappa|."""
    U = model.kappa_many(X)
    first = np.arange(min(n_inputs, X.shape[0]))
    largest = np.argsort(-np.linalg.norm(U, axis=1), kind="stable")[:n_inputs]
    idx = np.unique(np.concatenate([first, largest]))
    return U[idx]


def estimate_L1(model: SystemModel, level_set: LevelSet, samples=100_000, seed=0,
                neighbors=4, n_inputs=16) -> float:
    """sup |f(x1, kappa(x3)) - f(x2, kappa(x3))| / |x1 - x2| over the level set."""
    pts = halton_in_set(level_set, samples, seed)
    best = 0.0
    for n in _levels(pts.shape[0]):
        X = pts[:n]
        I, J = _pairs(X, neighbors)
        for u in _input_candidates(model, X, n_inputs):
            F = model.f_many(X, u)
            best = max(best, _max_quotient(F, X, I, J))
    return best


def estimate_L2(model: SystemModel, level_set: LevelSet, samples=100_000, seed=0,
                neighbors=4) -> float:
    """sup |V'(x1) - V'(x2)| / |x1 - x2| over the level set."""
    pts = halton_in_set(level_set, samples, seed)
    G = model.grad_many(pts)
    best = 0.0
    for n in _levels(pts.shape[0]):
        I, J = _pairs(pts[:n], neighbors)
        best = max(best, _max_quotient(G[:n], pts[:n], I, J))
    return best


def estimate_M_max(model: SystemModel, level_set: LevelSet, samples=100_000, seed=0,
                   excluded_fraction=1e-4) -> float:
    """sup of (|V'| |f| + |f|^2) / |V' f| along the closed loop, excluding
    the neighbourhood V(x) < excluded_fraction * c where the ratio is 0/0."""
    pts = halton_in_set(level_set, samples, seed)
    V = model.V_many(pts)
    pts = pts[V >= excluded_fraction * level_set.c]
    if pts.shape[0] == 0:
        raise ConfigError("no sample points outside the excluded ball")
    F = model.f_many(pts, model.kappa_many(pts))
    G = model.grad_many(pts)
    lfv = np.abs(np.einsum("ij,ij->i", G, F))
    if np.any(lfv < 1e-14):
        i = int(np.argmin(lfv))
        raise AssumptionViolation(
            f"|L_fV| = {lfv[i]:.3e} vanishes at x = {pts[i].tolist()}; no finite M_c exists there")
    fn = np.linalg.norm(F, axis=1)
    ratio = (np.linalg.norm(G, axis=1) * fn + fn ** 2) / lfv
    # prefixes of the filtered sequence are still nested
    return float(max(ratio[:n].max() for n in _levels(ratio.size)))


def compute_mu(L1, L2) -> float:
    return SQRT_E * max(L1, L2 * (1.0 + L1 * SQRT_E))


class MaspBound(NamedTuple):
    value: float
    branch: str     # "first" (sampling-rate term) or "second" (Lipschitz term)


def _check_sigma(sigma):
    if not 0.0 < sigma < 1.0:
        raise ConfigError(f"sigma must lie in (0, 1), got {sigma}")


def _masp(first, L1):
    second = 1.0 / (1.0 + 2.0 * L1)
    if first <= second:
        return MaspBound(first, "first")
    return MaspBound(second, "second")


def compute_sigma_masp(mu, M_max, L1, sigma) -> MaspBound:
    """min{(3(1-sigma) / (2 mu M))^2, 1/(1 + 2 L1)}."""
    _check_sigma(sigma)
    denom = 2.0 * mu * M_max
    first = math.inf if denom == 0 else (3.0 * (1.0 - sigma) / denom) ** 2
    return _masp(first, L1)


def compute_masp_prior(mu, M_max, L1, sigma) -> MaspBound:
    """Bound of the earlier monotone-Lyapunov design: min{((1-sigma) / (mu M))^2, 1/(1 + 2 L1)}."""
    _check_sigma(sigma)
    denom = mu * M_max
    first = math.inf if denom == 0 else ((1.0 - sigma) / denom) ** 2
    return _masp(first, L1)


def period_for_losses(h_masp, m):
    """Largest h with (m+1) h <= h_masp in floating point."""
    h = h_masp / (m + 1)
    while h * (m + 1) > h_masp:
        h = math.nextafter(h, 0.0)
    return h


@dataclass
class EstimationConfig:
    samples: int = 100_000
    seed: int = 0
    safety_factor: float = 1.1
    excluded_fraction: float = 1e-4
    neighbors: int = 4
    n_inputs: int = 16
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.overrides) - set(CONSTANT_NAMES)
        if unknown:
            raise ConfigError(f"unknown constant override(s): {sorted(unknown)}")
        if self.samples < 2:
            raise ConfigError("samples must be >= 2")
        if self.safety_factor < 1.0:
            raise ConfigError("safety_factor must be >= 1")


@dataclass(frozen=True)
class RawEstimates:
    L1c: float
    L2c: float
    M_max_c: float


def estimate_constants(model, level_set, config: EstimationConfig) -> RawEstimates:
    """Run only the estimators that are not overridden."""
    o = config.overrides
    kw = dict(samples=config.samples, seed=config.seed)
    L1 = math.nan if "L1c" in o else estimate_L1(model, level_set, neighbors=config.neighbors,
                                                  n_inputs=config.n_inputs, **kw)
    L2 = math.nan if "L2c" in o else estimate_L2(model, level_set, neighbors=config.neighbors, **kw)
    M = math.nan if "M_max_c" in o else estimate_M_max(model, level_set,
                                                        excluded_fraction=config.excluded_fraction, **kw)
    return RawEstimates(L1, L2, M)


@dataclass(frozen=True)
class CertificationConstants:
    c: float
    sigma: float
    L1c: float
    L2c: float
    M_max_c: float
    mu_c: float
    h_sigma_masp: float
    h_masp_prior: float
    m: int
    h: float
    active_branch: str
    prior_branch: str
    # constant name -> "override" | "estimate x<safety factor>" | "formula"
    provenance: dict = field(default_factory=dict, compare=False)

    CSV_FIELDS = ("c", "sigma", "m", "L1c", "L2c", "M_max_c", "mu_c", "h_sigma_masp",
                  "h_masp_prior", "h", "active_branch")

    @property
    def compliant(self) -> bool:
        """(m+1) h <= h_sigma_masp, the hypothesis every guarantee rests on."""
        return (self.m + 1) * self.h <= self.h_sigma_masp

    @property
    def bound_ratio(self):
        return self.h_sigma_masp / self.h_masp_prior

    def report(self) -> str:
        lines = []
        for name in self.CSV_FIELDS + ("prior_branch",):
            v = getattr(self, name)
            lines.append(f"{name} = {v!r}" if isinstance(v, str) else f"{name} = {_fmt(v)}")
        lines.append(f"bound_ratio = {_fmt(self.bound_ratio)}")
        for k, v in sorted(self.provenance.items()):
            lines.append(f"provenance.{k} = {v}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, k)) for k in self.CSV_FIELDS)

    def to_dict(self):
        return asdict(self)


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(v)
    return f"{v:.16e}"


def certify_system(model: SystemModel, level_set: LevelSet, sigma, m,
                   config: EstimationConfig | None = None,
                   estimates: RawEstimates | None = None) -> CertificationConstants:
    """Estimate (or take overridden) constants, form mu_c and both MASP bounds,
    and select h = h_sigma_masp / (m + 1).

    `estimates` may be passed to reuse estimator output across sigma/m values.
    """
    config = config or EstimationConfig()
    _check_sigma(sigma)
    if int(m) != m or m < 0:
        raise ConfigError(f"loss bound m must be a nonnegative integer, got {m}")
    m = int(m)
    if estimates is None:
        estimates = estimate_constants(model, level_set, config)
    o = config.overrides
    sf = config.safety_factor
    prov = {}
    vals = {}
    for name in ("L1c", "L2c", "M_max_c"):
        if name in o:
            vals[name] = float(o[name])
            prov[name] = "override"
        else:
            vals[name] = getattr(estimates, name) * sf
            prov[name] = f"estimate x{sf:g}"
    if "mu_c" in o:
        mu = float(o["mu_c"])
        prov["mu_c"] = "override"
    else:
        mu = compute_mu(vals["L1c"], vals["L2c"])
        prov["mu_c"] = "formula"
    new = compute_sigma_masp(mu, vals["M_max_c"], vals["L1c"], sigma)
    prior = compute_masp_prior(mu, vals["M_max_c"], vals["L1c"], sigma)
    return CertificationConstants(
        c=level_set.c, sigma=sigma, L1c=vals["L1c"], L2c=vals["L2c"], M_max_c=vals["M_max_c"],
        mu_c=mu, h_sigma_masp=new.value, h_masp_prior=prior.value, m=m,
        h=period_for_losses(new.value, m), active_branch=new.branch, prior_branch=prior.branch,
        provenance=prov,
    )
