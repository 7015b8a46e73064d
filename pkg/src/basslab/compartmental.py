"""Compartmental (mean-field) Bass models: closed forms and small ODE systems."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .model import BassParams, GroupSizes, HeteroSpec, Trajectory, ValidationError
from .odeint import DEFAULT_CONFIG, IntegrationError, IntegratorConfig, check_grid, integrate

BOUND_TOL = 1e-9


def bass_formula(t, params: BassParams):
    """Fraction of adopters ``(1 - e^{-(p+q)t}) / (1 + (q/p) e^{-(p+q)t})``."""
    params.require_positive_p()
    p, q = params.p, params.q
    e = np.exp(-(p + q) * np.asarray(t, dtype=float))
    return (1.0 - e) / (1.0 + (q / p) * e)


def circle_limit(t, params: BassParams):
    """Infinite-circle fraction ``1 - exp(-(p+q)t + q(1 - e^{-pt})/p)``."""
    params.require_positive_p()
    p, q = params.p, params.q
    t = np.asarray(t, dtype=float)
    return -np.expm1(-(p + q) * t - q * np.expm1(-p * t) / p)


def bass_horizon(params: BassParams, tol: float = 1e-4) -> float:
    """Smallest t with ``1 - f_Bass(t) < tol``."""
    params.require_positive_p()
    r = params.q / params.p
    e = tol / ((1 + r) - r * tol)
    return -math.log(e) / (params.p + params.q)


def circle_horizon(params: BassParams, tol: float = 1e-4) -> float:
    params.require_positive_p()
    g = lambda t: float(1.0 - circle_limit(t, params)) - tol
    hi = -math.log(tol) / params.p
    while g(hi) > 0:
        hi *= 2
    return brentq(g, 0.0, hi, xtol=1e-12)


@dataclass(frozen=True, eq=False)
class HeteroTrajectory:
    """Group-k adopter fractions of the whole population, ``f[:, k]``."""

    t: np.ndarray
    f: np.ndarray
    a: np.ndarray

    @property
    def f_het(self) -> np.ndarray:
        return self.f.sum(axis=1)

    @property
    def within_group(self) -> np.ndarray:
        """Adoption level inside each group, ``f_k / a_k``."""
        return self.f / self.a

    def as_trajectory(self) -> Trajectory:
        series = {f"f_{k + 1}": self.f[:, k] for k in range(self.f.shape[1])}
        series["f_het"] = self.f_het
        return Trajectory(self.t, series)


def _solve_groups(ceiling: np.ndarray, p: np.ndarray, Q: np.ndarray, grid, cfg) -> HeteroTrajectory:
    grid = check_grid(grid)
    cfg = cfg or DEFAULT_CONFIG
    if math.isinf(cfg.max_step):
        # near saturation the steps grow long and dense output between them
        # can overshoot the ceiling; the system is tiny so short steps are cheap
        cfg = replace(cfg, max_step=max((grid[-1] - grid[0]) / 100, 1e-12))
    QT = np.ascontiguousarray(Q.T)

    def rhs(t, f):
        return (ceiling - f) * (p + QT @ f)

    f = integrate(rhs, np.zeros(ceiling.size), grid, cfg)
    if np.any(f > ceiling + BOUND_TOL) or np.any(f < -BOUND_TOL):
        raise IntegrationError("group fraction left [0, a_k]; tighten the tolerances")
    return HeteroTrajectory(grid, f, ceiling.copy())


def solve_hetero(spec: HeteroSpec, grid, cfg: IntegratorConfig | None = None) -> HeteroTrajectory:
    """``f_k' = (a_k - f_k)(p_k + sum_m Q[m, k] f_m)``, ``f_k(0) = 0``."""
    return _solve_groups(spec.a, spec.p, spec.Q, grid, cfg)


def solve_hetero_finiteM(
    spec: HeteroSpec, sizes: GroupSizes, grid, cfg: IntegratorConfig | None = None
) -> HeteroTrajectory:
    """Finite-population version with ceilings ``M_k / M`` (denominator M, not M - 1)."""
    if len(sizes.sizes) != spec.K:
        raise ValidationError(f"{len(sizes.sizes)} group sizes for K={spec.K} groups")
    return _solve_groups(sizes.fractions, spec.p, spec.Q, grid, cfg)


def solve_mild_hetero(p, q, a, grid, cfg: IntegratorConfig | None = None) -> HeteroTrajectory:
    """``f_k' = (a_k - f_k)(p_k + q_k f_het)``: every adopter influences group k equally."""
    p, q, a = (np.asarray(x, dtype=float) for x in (p, q, a))
    if not (p.shape == q.shape == a.shape) or p.ndim != 1:
        raise ValidationError("p, q and a must be 1-d with equal lengths")
    return solve_hetero(HeteroSpec.mild(a, p, q), grid, cfg)


def het_faster_spec(p: float, q: float) -> HeteroSpec:
    """Two half-size groups; group 2 adopts externally at 2p and pushes group 1 at 4q."""
    return HeteroSpec([0.5, 0.5], [0.0, 2 * p], [[0.0, 0.0], [4 * q, 0.0]])


def negative_mild_rates(p: float, q: float):
    """``(p_k, q_k, a_k)`` of the negatively related two-group example."""
    return np.array([0.0, 2 * p]), np.array([2 * q, 0.0]), np.array([0.5, 0.5])


# one-sided 5-point stencils at t = 0
_D1 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
_D2 = np.array([35.0, -104.0, 114.0, -56.0, 11.0]) / 12.0


def second_derivatives_at_zero(system: str, p: float, q: float, cfg: IntegratorConfig | None = None):
    """Finite-difference ``(f'(0), f''(0))`` of an integrated trajectory.

    ``system`` is ``"het_faster"`` (two-group counterexample) or
    ``"homogeneous"``. The step is ``h = 1e-3 / (p + q)``.
    """
    if p + q <= 0:
        raise ValidationError("need p + q > 0")
    h = 1e-3 / (p + q)
    grid = h * np.arange(5)
    cfg = cfg or IntegratorConfig(rtol=1e-13, atol=1e-16)
    if system == "het_faster":
        f = solve_hetero(het_faster_spec(p, q), grid, cfg).f_het
    elif system == "homogeneous":
        f = solve_hetero(HeteroSpec.homogeneous(BassParams(p, q)), grid, cfg).f_het
    else:
        raise ValidationError(f"unknown system {system!r}")
    return float(_D1 @ f / h), float(_D2 @ f / h**2)


def hetero_horizon(spec: HeteroSpec, tol: float = 1e-4, cfg: IntegratorConfig | None = None,
                   t_max: float = 1e6) -> float:
    """Smallest grid-resolved t with ``1 - f_het(t) < tol``; doubles the window until reached."""
    T = 10.0 / max(float(spec.p.max() + spec.q_received.max()), 1e-12)
    while T <= t_max:
        grid = np.linspace(0.0, T, 2001)
        f = solve_hetero(spec, grid, cfg).f_het
        hit = np.nonzero(1.0 - f < tol)[0]
        if hit.size:
            return float(grid[hit[0]])
        T *= 2
    raise ValidationError(f"f_het does not reach 1 - {tol:g} before t = {t_max:g}")
