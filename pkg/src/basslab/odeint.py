"""Numerical machinery shared by every solver: adaptive RK integration on a
fixed output grid, grid sup-norms, least-squares rate fits and the
exponentially weighted sup-norm used by the convergence estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Literal, Mapping

import numpy as np
from scipy.integrate import DOP853, RK45

from .model import BassParams, ValidationError


class IntegrationError(RuntimeError):
    """Step budget exhausted, step size collapse, or a non-finite state."""


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    max_steps: int = 1_000_000
    method: Literal["DOP853", "RK45"] = "DOP853"
    max_step: float = math.inf

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValidationError("rtol and atol must be > 0")
        if self.max_steps < 1:
            raise ValidationError("max_steps must be >= 1")
        if not self.max_step > 0:
            raise ValidationError("max_step must be > 0")
        if self.method not in _METHODS:
            raise ValidationError(f"unknown method {self.method!r}")

    def halved(self) -> "IntegratorConfig":
        return replace(self, rtol=self.rtol / 2, atol=self.atol / 2)


_METHODS = {"DOP853": DOP853, "RK45": RK45}

DEFAULT_CONFIG = IntegratorConfig()


def check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValidationError("time grid must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(grid)):
        raise ValidationError("time grid must be finite")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("time grid must be strictly increasing")
    return grid


def uniform_grid(T: float, points: int = 400) -> np.ndarray:
    if T <= 0 or points < 2:
        raise ValidationError("need T > 0 and at least 2 grid points")
    return np.linspace(0.0, T, points)


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0,
    grid,
    cfg: IntegratorConfig | None = None,
    observe: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Integrate ``y' = rhs(t, y)`` from ``grid[0]`` and sample on ``grid``.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, y)`` returning an array shaped like ``y``.
    y0 : array_like
        State at ``grid[0]``.
    grid : array_like
        Strictly increasing output times.
    cfg : IntegratorConfig, optional
        Tolerances, step budget and RK pair.
    observe : callable, optional
        Maps a state to the quantity recorded at each grid time. Large systems
        pass a small functional here so that the full state is never stored
        for every grid point.

    Returns
    -------
    ndarray
        ``out[i] = observe(y(grid[i]))``, stacked along axis 0.
    """
    cfg = cfg or DEFAULT_CONFIG
    grid = check_grid(grid)
    y0 = np.array(y0, dtype=float).ravel()
    if not np.all(np.isfinite(y0)):
        raise IntegrationError("non-finite initial state")
    obs = observe if observe is not None else (lambda y: y)

    first = np.asarray(obs(y0), dtype=float)
    out = np.empty((grid.size,) + first.shape)
    out[0] = first
    if grid.size == 1:
        return out

    def fun(t, y):
        with np.errstate(over="ignore", invalid="ignore"):
            dy = rhs(t, y)
        if not np.all(np.isfinite(dy)):
            raise IntegrationError(f"non-finite derivative at t={t:g}")
        return dy

    solver = _METHODS[cfg.method](fun, grid[0], y0, grid[-1], rtol=cfg.rtol, atol=cfg.atol,
                                     max_step=cfg.max_step)
    i = 1
    steps = 0
    while i < grid.size:
        if solver.status != "running":
            raise IntegrationError(f"solver stopped at t={solver.t:g} before the grid end")
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"integration failed at t={solver.t:g}: {msg}")
        steps += 1
        if steps > cfg.max_steps:
            raise IntegrationError(f"step budget of {cfg.max_steps} exhausted at t={solver.t:g}")
        if not np.all(np.isfinite(solver.y)):
            raise IntegrationError(f"non-finite state at t={solver.t:g}")
        j = i
        while j < grid.size and grid[j] <= solver.t:
            j += 1
        if j > i:
            if j == grid.size and solver.t == grid[-1]:
                # last point: use the step end exactly instead of interpolating
                ts = grid[i:j - 1]
                states = list(solver.dense_output()(ts).T) if ts.size else []
                states.append(solver.y)
            else:
                states = solver.dense_output()(grid[i:j]).T
            for k, y in enumerate(states):
                out[i + k] = obs(np.asarray(y))
            i = j
    return out


def sup_diff(a, b, *, signed: bool = False, grid_a=None, grid_b=None) -> float:
    """Max over the grid of ``|a - b|``, or of ``a - b`` when ``signed``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if grid_a is not None and grid_b is not None:
        ga, gb = np.asarray(grid_a), np.asarray(grid_b)
        if ga.shape != gb.shape or not np.array_equal(ga, gb):
            raise ValidationError("series are sampled on different grids")
    if a.shape != b.shape:
        raise ValidationError(f"series length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.max(d) if signed else np.max(np.abs(d)))


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    rms_residual: float
    model: str

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.model == "log-log":
            return np.exp(self.intercept + self.slope * np.log(x))
        return np.exp(self.intercept + self.slope * x)

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "rms": self.rms_residual,
            "model": self.model,
        }


def fit_line(x, y, model: str = "log-log") -> FitResult:
    """Ordinary least squares of ``log y`` on ``log x`` (log-log) or on ``x`` (semi-log)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be 1-d sequences of equal length")
    if x.size < 2:
        raise ValidationError("need at least 2 points to fit a line")
    if np.any(y <= 0):
        raise ValidationError("y must be > 0 under a log transform")
    if model == "log-log":
        if np.any(x <= 0):
            raise ValidationError("x must be > 0 for a log-log fit")
        X = np.log(x)
    elif model == "semi-log":
        X = x
    else:
        raise ValidationError(f"unknown fit model {model!r}")
    Y = np.log(y)
    A = np.column_stack([X, np.ones_like(X)])
    (slope, intercept), *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - (slope * X + intercept)
    return FitResult(float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))), model)


@dataclass(frozen=True)
class EpsNormParams:
    """Weight ``eps`` together with the critical value and contraction factor
    of a homogeneous model: ``eps_tilde = ln(1 + p/q)``, ``theta = q e^eps / (p + q)``."""

    params: BassParams
    eps: float

    def __post_init__(self):
        self.params.require_positive_p()
        if self.params.q <= 0:
            raise ValidationError("eps-norm diagnostics require q > 0")
        if self.eps < 0:
            raise ValidationError("eps must be >= 0")

    @property
    def eps_tilde(self) -> float:
        return critical_eps(self.params)

    @property
    def theta(self) -> float:
        return theta(self.params, self.eps)

    @property
    def contracting(self) -> bool:
        return self.eps < self.eps_tilde


def critical_eps(params: BassParams) -> float:
    return math.log1p(params.p / params.q)


def theta(params: BassParams, eps: float) -> float:
    return params.q * math.exp(eps) / (params.p + params.q)


def _index_weights(v) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(v, Mapping):
        keys = list(v)
        vals = np.array([v[k] for k in keys], dtype=float)
        n = np.array([sum(k) if isinstance(k, tuple) else k for k in keys], dtype=float)
        return vals, n
    vals = np.asarray(v, dtype=float)
    if vals.ndim == 1:
        return vals, np.arange(1, vals.size + 1, dtype=float)
    # K-dimensional array indexed directly by the composition vector k
    return vals, np.indices(vals.shape).sum(axis=0).astype(float)


def eps_norm(v, eps: float, *, tail: float = 0.0) -> float:
    """``sup_n e^{-eps n} |v_n|`` over the represented indices.

    ``v`` is either a 1-d sequence holding ``v_1, v_2, ...``, a K-d array
    indexed by the composition vector ``k`` (weight ``n = sum k``), or a mapping
    from ``n`` or ``k``-tuples to values. ``tail`` is a bound on the weighted
    values of the indices not represented.
    """
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    vals, n = _index_weights(v)
    body = float(np.max(np.exp(-eps * n) * np.abs(vals))) if vals.size else 0.0
    return max(body, float(tail))


def eps_norm_sup(V, eps: float, *, tail: float = 0.0) -> float:
    """Time-sup of :func:`eps_norm`; axis 0 of ``V`` is time."""
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    _, n = _index_weights(V[0])
    w = np.exp(-eps * n)
    body = float(np.max(np.abs(V) * w)) if V.size else 0.0
    return max(body, float(tail))
