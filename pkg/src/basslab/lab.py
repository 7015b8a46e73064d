"""Experiments: convergence-rate studies, heterogeneity comparisons, the
toy embedding systems and the eps-norm bound check."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaincc

from . import compartmental as comp
from .io import write_columns_csv, write_json
from .master import (
    complete_rates,
    circle_rates,
    embedded_diff_norm,
    kgroup_state_count,
    solve_circle_reduced,
    solve_complete_reduced,
    solve_kgroup_reduced,
    KGROUP_STATE_BUDGET,
)
from .model import BassParams, GroupSizes, HeteroSpec, ValidationError, homogenize
from .odeint import (
    FitResult,
    IntegratorConfig,
    check_grid,
    critical_eps,
    fit_line,
    integrate,
    theta,
    uniform_grid,
)
from .stochastic import default_workers

HORIZON_TOL = 1e-4
GRID_POINTS = 400
CIRCLE_FLOOR = 1e-13
# complete and circle reduced systems are small, so studies resolve them tightly
STUDY_CONFIG = IntegratorConfig(rtol=1e-13, atol=1e-15)


def _pmap(fn: Callable, items: Sequence, workers: int | None):
    workers = workers or default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True, eq=False)
class ConvergenceStudy:
    """Signed sup over the grid of ``f_limit - f_discrete(M)`` for each M."""

    family: str
    params: dict
    Ms: list[int]
    diffs: np.ndarray
    fit: FitResult | None
    t: np.ndarray
    f_limit: np.ndarray
    f_discrete: np.ndarray
    dropped: list[int] = field(default_factory=list)
    bounds: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def T(self) -> float:
        return float(self.t[-1])

    def summary(self) -> dict:
        out = {
            "family": self.family,
            "params": self.params,
            "Ms": list(self.Ms),
            "sup_diff": self.diffs.tolist(),
            "fit": None if self.fit is None else {
                "slope": self.fit.slope,
                "intercept": self.fit.intercept,
                "rms": self.fit.rms_residual,
                "model": self.fit.model,
            },
            "grid": {"T": self.T, "points": int(self.t.size)},
        }
        if self.dropped:
            out["dropped_Ms"] = list(self.dropped)
        if self.bounds is not None:
            out["analytic_bound"] = self.bounds.tolist()
        if self.notes:
            out["notes"] = list(self.notes)
        return out

    def write(self, outdir, trajectories: bool = False) -> list[Path]:
        outdir = Path(outdir)
        csv_path = outdir / f"{self.family}_convergence.csv"
        cols = {"M": np.array(self.Ms), "sup_diff": self.diffs}
        if self.bounds is not None:
            cols["bound"] = self.bounds
        write_columns_csv(csv_path, cols)
        json_path = outdir / f"{self.family}_summary.json"
        write_json(json_path, self.summary())
        paths = [csv_path, json_path]
        if trajectories:
            for i, M in enumerate(self.Ms):
                p = outdir / f"{self.family}_M{M}.csv"
                write_columns_csv(p, {"t": self.t, "f_limit": self.f_limit, "f_discrete": self.f_discrete[:, i]})
                paths.append(p)
        return paths


def noise_floor(cfg: IntegratorConfig | None) -> float:
    """Differences below this are indistinguishable from integration error."""
    return max(CIRCLE_FLOOR, 10 * (cfg or IntegratorConfig()).atol)


def _fit_if_positive(Ms, diffs, model, cfg) -> tuple[FitResult | None, list[str]]:
    floor = noise_floor(cfg)
    if np.all(diffs > floor) and len(Ms) >= 2:
        return fit_line(Ms, diffs, model), []
    return None, [f"differences not all above the noise floor {floor:g}; no rate fitted"]


def _check_Ms(Ms) -> list[int]:
    Ms = [int(m) for m in Ms]
    if not Ms:
        raise ValidationError("M list is empty")
    if any(b <= a for a, b in zip(Ms, Ms[1:])):
        raise ValidationError("M list must be strictly increasing")
    return Ms


def study_complete(p: float, q: float, Ms, grid=None, cfg: IntegratorConfig | None = None,
                   workers: int | None = None) -> ConvergenceStudy:
    params = BassParams(p, q)
    params.require_positive_p()
    Ms = _check_Ms(Ms)
    cfg = cfg or STUDY_CONFIG
    grid = check_grid(grid) if grid is not None else uniform_grid(comp.bass_horizon(params, HORIZON_TOL), GRID_POINTS)
    f_lim = comp.bass_formula(grid, params)
    fd = np.column_stack(_pmap(lambda M: solve_complete_reduced(M, params, grid, cfg).f_discrete, Ms, workers))
    diffs = np.max(f_lim[:, None] - fd, axis=0)
    fit, notes = _fit_if_positive(Ms, diffs, "log-log", cfg)
    return ConvergenceStudy("complete", params.to_dict(), Ms, diffs, fit, grid, f_lim, fd, notes=notes)


def circle_f_bound(M: int, params: BassParams, eps: float) -> float:
    """Bound on ``sup_t |f_1D - f_circle(M)|`` from the eps-norm estimate:
    ``e^eps * 2 q e^{-M eps} / ((p + q)(1 - theta(eps)))``."""
    return math.exp(eps) * bound_rhs("circle", M, params, eps)


def study_circle(p: float, q: float, Ms, grid=None, cfg: IntegratorConfig | None = None,
                 workers: int | None = None, floor: float = CIRCLE_FLOOR) -> ConvergenceStudy:
    params = BassParams(p, q)
    params.require_positive_p()
    Ms = _check_Ms(Ms)
    if Ms[0] < 3:
        raise ValidationError("circle needs M >= 3")
    cfg = cfg or STUDY_CONFIG
    floor = max(floor, noise_floor(cfg))
    grid = check_grid(grid) if grid is not None else uniform_grid(comp.circle_horizon(params, HORIZON_TOL), GRID_POINTS)
    f_lim = comp.circle_limit(grid, params)
    fd = np.column_stack(_pmap(lambda M: solve_circle_reduced(M, params, grid, cfg).f_discrete, Ms, workers))
    diffs = np.max(f_lim[:, None] - fd, axis=0)
    notes = []
    dropped = []
    if q > 0:
        keep = diffs >= floor
        if not np.all(keep):
            first_bad = int(np.argmin(keep))
            dropped = Ms[first_bad:]
            notes.append(f"differences fell below {floor:g}; dropped M >= {dropped[0]}")
            Ms, diffs, fd = Ms[:first_bad], diffs[:first_bad], fd[:, :first_bad]
    fit, more = _fit_if_positive(Ms, diffs, "semi-log", cfg)
    notes += more
    bounds = None
    if q > 0:
        eps = critical_eps(params) / 2
        bounds = np.array([circle_f_bound(M, params, eps) for M in Ms])
    return ConvergenceStudy("circle", params.to_dict(), Ms, diffs, fit, grid, f_lim, fd,
                            dropped=dropped, bounds=bounds, notes=notes)


def study_kgroup(spec: HeteroSpec, Ms, grid=None, cfg: IntegratorConfig | None = None,
                 budget: int = KGROUP_STATE_BUDGET, workers: int | None = None) -> ConvergenceStudy:
    Ms = _check_Ms(Ms)
    sizes = []
    for M in Ms:
        sizes.append(GroupSizes.from_fractions(spec.a, M))
    fits = [kgroup_state_count(s) <= budget for s in sizes]
    dropped = [M for M, ok in zip(Ms, fits) if not ok]
    notes = []
    if dropped:
        notes.append(f"state budget {budget} exceeded for M in {dropped}")
    Ms = [M for M, ok in zip(Ms, fits) if ok]
    sizes = [s for s, ok in zip(sizes, fits) if ok]
    if not Ms:
        raise ValidationError(f"no M within the state budget {budget}; dropped {dropped}")
    grid = check_grid(grid) if grid is not None else uniform_grid(comp.hetero_horizon(spec, HORIZON_TOL, cfg), GRID_POINTS)
    f_lim = comp.solve_hetero(spec, grid, cfg).f_het
    fd = np.column_stack(_pmap(
        lambda s: solve_kgroup_reduced(spec, s, grid, cfg, budget=budget, store_states=False).f_discrete,
        sizes, workers))
    diffs = np.max(f_lim[:, None] - fd, axis=0)
    fit, more = _fit_if_positive(Ms, diffs, "log-log", cfg)
    return ConvergenceStudy("kgroup", spec.to_dict(), Ms, diffs, fit, grid, f_lim, fd,
                            dropped=dropped, notes=notes + more)


@dataclass(frozen=True, eq=False)
class HeteroReport:
    """Heterogeneous vs homogenised adoption on a common grid.

    ``gap = f_hom - f_het``. ``y = (1 - f_het)(p_bar + q_bar f_het) - f_het'``
    is positive exactly when the heterogeneous curve is held below the
    homogeneous Bass ODE at that instant.
    """

    t: np.ndarray
    f_het: np.ndarray
    f_hom: np.ndarray
    y: np.ndarray
    within_group: np.ndarray
    hom_params: BassParams
    positively_monotone: bool
    groups_ordered: bool

    @property
    def gap(self) -> np.ndarray:
        return self.f_hom - self.f_het

    @property
    def het_below_hom(self) -> bool:
        return bool(np.all(self.gap[self.t > 0] > 0))

    @property
    def y_positive(self) -> bool:
        return bool(np.all(self.y[self.t > 0] > 0))

    def columns(self) -> dict:
        cols = {"t": self.t, "f_het": self.f_het, "f_hom": self.f_hom, "gap": self.gap, "y": self.y}
        for k in range(self.within_group.shape[1]):
            cols[f"f_tilde_{k + 1}"] = self.within_group[:, k]
        return cols


def _positively_monotone(p, q) -> bool:
    order = np.lexsort((q, p))
    return bool(np.all(np.diff(q[order]) >= 0))


def _compare(spec: HeteroSpec, grid, cfg, order_tol=1e-12) -> HeteroReport:
    hom = homogenize(spec)
    if grid is None:
        grid = uniform_grid(comp.hetero_horizon(spec, HORIZON_TOL, cfg), GRID_POINTS)
    grid = check_grid(grid)
    sol = comp.solve_hetero(spec, grid, cfg)
    F = sol.f_het
    dF = ((spec.a - sol.f) * (spec.p + sol.f @ spec.Q)).sum(axis=1)
    y = (1 - F) * (hom.p + hom.q * F) - dF
    f_hom = comp.bass_formula(grid, hom)
    wg = sol.within_group
    pos = grid > 0
    ordered = bool(np.all(np.diff(wg[pos], axis=1) >= -order_tol))
    return HeteroReport(grid, F, f_hom, y, wg, hom,
                        _positively_monotone(spec.p, spec.q_received), ordered)


def hetero_compare(p, q, a, grid=None, cfg: IntegratorConfig | None = None) -> HeteroReport:
    """Mildly heterogeneous model (group k influenced at q_k) vs its homogenisation."""
    p, q, a = (np.asarray(x, dtype=float) for x in (p, q, a))
    spec = HeteroSpec.mild(a, p, q)
    if homogenize(spec).p <= 0:
        raise ValidationError("average external rate must be > 0")
    return _compare(spec, grid, cfg)


@dataclass(frozen=True, eq=False)
class CounterexampleReport:
    compare: HeteroReport
    d1_het: float
    d2_het: float
    d1_hom: float
    d2_hom: float
    initial_end: float | None
    crossing: float | None

    @property
    def d2_ratio(self) -> float:
        return self.d2_het / self.d2_hom if self.d2_hom != 0 else math.nan

    def summary(self) -> dict:
        return {
            "f1_het_0": self.d1_het, "f2_het_0": self.d2_het,
            "f1_hom_0": self.d1_hom, "f2_hom_0": self.d2_hom,
            "d2_ratio": self.d2_ratio,
            "het_above_until": self.initial_end,
            "crossing_time": self.crossing,
        }


def hetero_counterexample(p: float, q: float, grid=None, cfg: IntegratorConfig | None = None) -> CounterexampleReport:
    """Two-group network whose adoption initially outpaces its homogenisation when q > p."""
    if not (p > 0 and q > 0):
        raise ValidationError("need p, q > 0")
    spec = comp.het_faster_spec(p, q)
    rep = _compare(spec, grid, cfg)
    d1h, d2h = comp.second_derivatives_at_zero("het_faster", p, q)
    d1o, d2o = comp.second_derivatives_at_zero("homogeneous", p, q)
    above = rep.f_het - rep.f_hom
    pos = np.nonzero(rep.t > 0)[0]
    initial_end = crossing = None
    if pos.size and above[pos[0]] > 0:
        below = pos[above[pos] <= 0]
        if below.size:
            j = below[0]
            initial_end = float(rep.t[j - 1])
            # linear interpolation of the sign change
            t0, t1, a0, a1 = rep.t[j - 1], rep.t[j], above[j - 1], above[j]
            crossing = float(t0 + (t1 - t0) * a0 / (a0 - a1))
        else:
            initial_end = float(rep.t[-1])
    return CounterexampleReport(rep, d1h, d2h, d1o, d2o, initial_end, crossing)


TOY_RULES = {"unit": lambda k: np.ones_like(k), "geometric": lambda k: 3.0 ** k}
TOY_ALIASES = {"1": "unit", "a1": "unit", "3^k": "geometric", "3k": "geometric"}
GEOMETRIC_MAX_M = 12
TOY_GEOMETRIC_CONFIG = IntegratorConfig(rtol=1e-13, atol=1e-20)


@dataclass(frozen=True, eq=False)
class ToyRun:
    """``u[:, k-1]`` solves ``u_k' = a(k)(u_{k+1} - u_k)``, ``u_{M+1} = 0``."""

    rule: str
    M: int
    t: np.ndarray
    u: np.ndarray

    def reference(self) -> np.ndarray:
        """Closed form ``u_{M-j} = P_j(t) e^{-t}`` (unit rule only)."""
        if self.rule != "unit":
            raise ValidationError("closed form exists only for the unit rule")
        j = self.M - np.arange(1, self.M + 1)  # u_k has j = M - k
        # P_j(t) e^{-t} is the Poisson(t) CDF at j = Q(j + 1, t)
        return gammaincc(j[None, :] + 1, self.t[:, None])

    def bound(self) -> np.ndarray:
        """``2 e^{-3^k t}`` (geometric rule)."""
        k = np.arange(1, self.M + 1, dtype=float)
        return 2.0 * np.exp(-(3.0 ** k)[None, :] * self.t[:, None])

    def top_exact(self) -> np.ndarray:
        a = TOY_RULES[self.rule](np.array([float(self.M)]))[0]
        return np.exp(-a * self.t)

    def columns(self) -> dict:
        cols = {"t": self.t}
        for k in range(1, self.M + 1):
            cols[f"u_{k}"] = self.u[:, k - 1]
        cols[f"u_{self.M}_exact"] = self.top_exact()
        return cols


def toy_embedding(rule: str, M: int, grid, cfg: IntegratorConfig | None = None) -> ToyRun:
    rule = TOY_ALIASES.get(rule, rule)
    if rule not in TOY_RULES:
        raise ValidationError(f"unknown toy rule {rule!r}; use 'unit' or 'geometric'")
    if M < 1:
        raise ValidationError("M must be >= 1")
    if rule == "geometric" and M > GEOMETRIC_MAX_M:
        raise ValidationError(f"geometric rule is limited to M <= {GEOMETRIC_MAX_M}")
    grid = check_grid(grid)
    k = np.arange(1, M + 1, dtype=float)
    a = TOY_RULES[rule](k)
    if cfg is None:
        # components of size e^{-3^k t} sit far below any useful atol, so the
        # absolute tolerance is cut until its noise is negligible against the bound
        cfg = TOY_GEOMETRIC_CONFIG if rule == "geometric" else IntegratorConfig()

    def rhs(t, u):
        du = -a * u
        du[:-1] += a[:-1] * u[1:]
        return du

    return ToyRun(rule, M, grid, integrate(rhs, np.ones(M), grid, cfg))


def bound_rhs(system: str, M: int, params: BassParams, eps: float) -> float:
    """``2 sup_n(|q - q_n^(M)| e^{-n eps}) / ((p + q)(1 - theta(eps)))``."""
    p, q = params.p, params.q
    n = np.arange(1, M + 1)
    if system == "complete":
        qn = complete_rates(M, q)
    elif system == "circle":
        qn = circle_rates(M, q)
    else:
        raise ValidationError(f"unknown system {system!r}")
    s = float(np.max(np.abs(q - qn) * np.exp(-n * eps)))
    return 2.0 * s / ((p + q) * (1.0 - theta(params, eps)))


def bound_rhs_coarse(M: int, params: BassParams, eps: float) -> float:
    """Complete-graph bound with ``sup_n`` replaced by ``q e^{-1} / (eps (M - 1))``."""
    p, q = params.p, params.q
    return 2.0 * q * math.exp(-1.0) / (eps * (M - 1)) / ((p + q) * (1.0 - theta(params, eps)))


@dataclass(frozen=True)
class BoundReport:
    system: str
    M: int
    p: float
    q: float
    eps: float
    lhs: float
    rhs: float
    rhs_coarse: float | None
    slack: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + self.slack


def verify_bound(system: str, M: int, p: float, q: float, eps: float, grid=None,
                 cfg: IntegratorConfig | None = None) -> BoundReport:
    params = BassParams(p, q)
    params.require_positive_p()
    if q <= 0:
        raise ValidationError("bound check requires q > 0")
    et = critical_eps(params)
    if not (0 < eps < et):
        raise ValidationError(f"eps must lie in (0, {et:.6g})")
    if M < 2:
        raise ValidationError("bound check requires M >= 2")
    if grid is None:
        horizon = comp.bass_horizon if system == "complete" else comp.circle_horizon
        grid = uniform_grid(horizon(params, 1e-6), GRID_POINTS)
    cfg = cfg or IntegratorConfig()
    lhs = embedded_diff_norm(system, M, params, eps, grid, cfg)
    rhs = bound_rhs(system, M, params, eps)
    coarse = bound_rhs_coarse(M, params, eps) if system == "complete" else None
    return BoundReport(system, M, p, q, eps, lhs, rhs, coarse, slack=10 * (cfg.atol + cfg.rtol))
