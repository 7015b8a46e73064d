"""Master equations for the probabilities that sets of nodes are all nonadopters.

``[S_A](t)`` is the probability that every node of ``A`` is still a nonadopter
at time ``t``. For a subset ``A`` it evolves as

    d[S_A]/dt = -(sum_{i in A} p_i + sum_{j not in A} c_j(A)) [S_A]
                + sum_{j not in A} c_j(A) [S_{A + j}],
    c_j(A) = sum_{i in A} q_ji / d_i,

with all values 1 at t = 0. Symmetric networks collapse this to a handful of
representatives: subset size for complete graphs, run length for circles and
group composition vectors for K-group populations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .compartmental import bass_formula, circle_limit, solve_hetero
from .model import BassParams, GroupSizes, HeteroSpec, NetworkInstance, Trajectory, ValidationError
from .odeint import IntegratorConfig, check_grid, critical_eps, eps_norm_sup, integrate

FULL_MASTER_MAX_M = 14
KGROUP_STATE_BUDGET = 2_000_000


@dataclass(frozen=True, eq=False)
class SubsetTable:
    """Solution of the full master system. Column ``s`` of ``values`` holds the
    subset whose bitmask is ``s`` (bit i set when node i belongs to it);
    column 0 is the empty set, fixed at 1."""

    t: np.ndarray
    M: int
    values: np.ndarray

    @staticmethod
    def key(subset) -> int:
        mask = 0
        for i in subset:
            mask |= 1 << int(i)
        return mask

    @staticmethod
    def members(mask: int) -> tuple[int, ...]:
        return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)

    def __getitem__(self, subset) -> np.ndarray:
        mask = self.key(sorted(set(subset)))
        if mask >= self.values.shape[1]:
            raise KeyError(subset)
        return self.values[:, mask]

    def subsets(self):
        for mask in range(1, 1 << self.M):
            yield self.members(mask)

    @property
    def f_discrete(self) -> np.ndarray:
        singles = self.values[:, [1 << j for j in range(self.M)]]
        return 1.0 - singles.mean(axis=1)

    def to_trajectory(self) -> Trajectory:
        series = {}
        for mask in range(1, 1 << self.M):
            name = "S_" + "_".join(str(i + 1) for i in self.members(mask))
            series[name] = self.values[:, mask]
        return Trajectory(self.t, series)


def full_master_operator(net: NetworkInstance) -> sp.csr_matrix:
    """Sparse generator of the full subset system, including the empty-set row."""
    M = net.M
    S = 1 << M
    masks = np.arange(S)
    member = (masks[:, None] >> np.arange(M)[None, :]) & 1
    W = net.influence_matrix()
    # C[s, j] = sum_{i in A_s} W[j, i]: push of outside node j on the members of A_s
    C = member @ W.T
    outside = member == 0
    C = np.where(outside, C, 0.0)
    decay = member @ net.p + C.sum(axis=1)

    rows, cols = np.nonzero(C)
    vals = C[rows, cols]
    up = rows | (1 << cols)
    A = sp.coo_matrix((vals, (rows, up)), shape=(S, S)).tocsr()
    A = A - sp.diags(decay)
    return A.tocsr()


def solve_full_master(net: NetworkInstance, grid, cfg: IntegratorConfig | None = None) -> SubsetTable:
    """Integrate the master equations of every node subset (oracle for small M)."""
    if net.M > FULL_MASTER_MAX_M:
        raise ValidationError(
            f"full master system has 2^{net.M} states; limit is M <= {FULL_MASTER_MAX_M}"
        )
    grid = check_grid(grid)
    A = full_master_operator(net)
    y0 = np.ones(A.shape[0])
    values = integrate(lambda t, y: A @ y, y0, grid, cfg)
    return SubsetTable(grid, net.M, values)


@dataclass(frozen=True, eq=False)
class ReducedSolution:
    """``S[:, n-1]`` is the probability that a representative set of ``n`` nodes
    (any set for the complete graph, a contiguous run for the circle) are all
    nonadopters."""

    t: np.ndarray
    S: np.ndarray

    @property
    def f_discrete(self) -> np.ndarray:
        return 1.0 - self.S[:, 0]

    def to_trajectory(self) -> Trajectory:
        return Trajectory(self.t, {f"S_{n + 1}": self.S[:, n] for n in range(self.S.shape[1])})


def _bidiagonal_rhs(diag: np.ndarray, upper: np.ndarray):
    def rhs(t, u):
        du = diag * u
        du[:-1] += upper * u[1:]
        return du

    return rhs


def complete_rates(M: int, q: float) -> np.ndarray:
    """Effective influence ``q_n = (M - n) q / (M - 1)`` for n = 1..M."""
    n = np.arange(1, M + 1)
    if M == 1:
        return np.zeros(1)
    return (M - n) * q / (M - 1)


def circle_rates(M: int, q: float) -> np.ndarray:
    qn = np.full(M, float(q))
    qn[-1] = 0.0
    return qn


def solve_complete_reduced(M: int, params: BassParams, grid, cfg: IntegratorConfig | None = None) -> ReducedSolution:
    """``d[S^n]/dt = -n(p + q_n)[S^n] + n q_n [S^{n+1}]`` with ``q_n = (M-n) q/(M-1)``."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    grid = check_grid(grid)
    n = np.arange(1, M + 1, dtype=float)
    qn = complete_rates(M, params.q)
    rhs = _bidiagonal_rhs(-n * (params.p + qn), (n * qn)[:-1])
    return ReducedSolution(grid, integrate(rhs, np.ones(M), grid, cfg))


def solve_circle_reduced(M: int, params: BassParams, grid, cfg: IntegratorConfig | None = None) -> ReducedSolution:
    """``d[S^n]/dt = -(np + q)[S^n] + q[S^{n+1}]`` for runs n < M; ``-Mp[S^M]`` for the whole circle."""
    if M < 3:
        raise ValidationError("circle needs M >= 3")
    grid = check_grid(grid)
    n = np.arange(1, M + 1, dtype=float)
    qn = circle_rates(M, params.q)
    rhs = _bidiagonal_rhs(-(n * params.p + qn), qn[:-1])
    return ReducedSolution(grid, integrate(rhs, np.ones(M), grid, cfg))


@dataclass(frozen=True, eq=False)
class KGroupSolution:
    """Reduced K-group solution. ``u`` (optional) has shape ``(len(t), M_1+1, ..., M_K+1)``
    and is indexed by the composition vector; ``singles[:, k]`` is ``u_{e_k}``."""

    t: np.ndarray
    sizes: GroupSizes
    singles: np.ndarray
    u: np.ndarray | None = None

    @property
    def f_discrete(self) -> np.ndarray:
        return 1.0 - self.singles @ self.sizes.fractions

    def __getitem__(self, k) -> np.ndarray:
        if self.u is None:
            raise KeyError("full state was not stored; rerun with store_states=True")
        return self.u[(slice(None),) + tuple(k)]

    def compositions(self):
        shape = tuple(m + 1 for m in self.sizes.sizes)
        for k in itertools.product(*(range(s) for s in shape)):
            if sum(k) >= 1:
                yield k

    def to_trajectory(self) -> Trajectory:
        if self.u is None:
            series = {"u_" + "_".join("1" if j == k else "0" for j in range(self.singles.shape[1])): self.singles[:, k]
                      for k in range(self.singles.shape[1])}
        else:
            series = {"u_" + "_".join(map(str, k)): self[k] for k in self.compositions()}
        return Trajectory(self.t, series)


class _ShiftOperator:
    """``L u = -lam * u + sum_m c_m * u(k + e_m)`` on a dense K-d array.

    Coefficients vanish wherever ``k + e_m`` leaves the array, so the shifts
    only touch the interior slices."""

    def __init__(self, lam: np.ndarray, coeffs: list[np.ndarray], active: np.ndarray | None = None):
        self.shape = lam.shape
        self.neg_lam = -lam
        self.K = lam.ndim
        self.slices = []
        for m, c in enumerate(coeffs):
            dst = [slice(None)] * self.K
            src = [slice(None)] * self.K
            dst[m] = slice(0, -1)
            src[m] = slice(1, None)
            dst, src = tuple(dst), tuple(src)
            self.slices.append((dst, src, np.ascontiguousarray(c[dst])))
        self.active = active
        self._tmp = np.empty(self.shape)

    def apply(self, u: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        out = np.multiply(self.neg_lam, u, out=out)
        for dst, src, c in self.slices:
            tmp = self._tmp[dst]
            np.multiply(c, u[src], out=tmp)
            out[dst] += tmp
        if self.active is not None:
            out[~self.active] = 0.0
        return out


def kgroup_state_count(sizes: GroupSizes) -> int:
    return int(np.prod([m + 1 for m in sizes.sizes], dtype=np.int64))


def kgroup_operator(spec: HeteroSpec, sizes: GroupSizes) -> _ShiftOperator:
    M = sizes.M
    Mk = np.array(sizes.sizes, dtype=float)
    shape = tuple(int(m) + 1 for m in sizes.sizes)
    ks = np.indices(shape, dtype=float)
    Qk = np.tensordot(spec.Q, ks, axes=1)
    denom = max(M - 1, 1)
    coeffs = [(Mk[m] - ks[m]) / denom * Qk[m] for m in range(spec.K)]
    lam = np.tensordot(spec.p, ks, axes=1) + sum(coeffs)
    return _ShiftOperator(lam, coeffs)


def solve_kgroup_reduced(
    spec: HeteroSpec,
    sizes: GroupSizes,
    grid,
    cfg: IntegratorConfig | None = None,
    *,
    budget: int = KGROUP_STATE_BUDGET,
    store_states: bool | None = None,
) -> KGroupSolution:
    """Integrate the composition-indexed system ``u_k``.

    ``u_k`` is the probability that a set holding ``k_j`` members of group j
    are all nonadopters. The empty composition is kept at 1. By default the
    full state history is stored only when it is small (< 2e7 numbers).
    """
    if len(sizes.sizes) != spec.K:
        raise ValidationError(f"{len(sizes.sizes)} group sizes for K={spec.K} groups")
    n_states = kgroup_state_count(sizes)
    if n_states > budget:
        raise ValidationError(f"K-group system needs {n_states} states, budget is {budget}")
    grid = check_grid(grid)
    op = kgroup_operator(spec, sizes)
    shape = op.shape
    singles_idx = [np.ravel_multi_index(tuple(1 if j == k else 0 for j in range(spec.K)), shape)
                   for k in range(spec.K)]
    if store_states is None:
        store_states = n_states * grid.size < 20_000_000

    def rhs(t, y):
        return op.apply(y.reshape(shape)).ravel()

    if store_states:
        U = integrate(rhs, np.ones(n_states), grid, cfg)
        return KGroupSolution(grid, sizes, U[:, singles_idx], U.reshape((grid.size,) + shape))
    singles = integrate(rhs, np.ones(n_states), grid, cfg, observe=lambda y: y[singles_idx])
    return KGroupSolution(grid, sizes, singles)


def solve_truncated_limit(
    system: str,
    params,
    n_max: int,
    grid,
    cfg: IntegratorConfig | None = None,
    closure: str = "analytic",
) -> Trajectory:
    """Infinite limit system cut at level ``n_max``.

    The first dropped component is replaced by its exact value
    (``closure="analytic"``) or by 0 (``closure="zero"``):

    * complete: ``[S^n] = (1 - f_Bass)^n``
    * circle:   ``[S^n] = e^{-(n-1)pt} (1 - f_1D)``
    * kgroup:   ``u_k = prod_j (1 - f_j/a_j)^{k_j}`` with ``f`` from the group ODEs.

    ``params`` is a :class:`BassParams` for complete/circle and a
    :class:`HeteroSpec` for kgroup.
    """
    if n_max < 1:
        raise ValidationError("truncation level must be >= 1")
    if closure not in ("analytic", "zero"):
        raise ValidationError(f"unknown closure {closure!r}")
    grid = check_grid(grid)
    if system in ("complete", "circle"):
        return _truncated_homogeneous(system, params, n_max, grid, cfg, closure)
    if system == "kgroup":
        return _truncated_kgroup(params, n_max, grid, cfg, closure)
    raise ValidationError(f"unknown system {system!r}")


def limit_values(system: str, params: BassParams, n: np.ndarray, t) -> np.ndarray:
    """Exact infinite-system components ``u_n^inf(t)``; result shape ``(len(t), len(n))``."""
    t = np.asarray(t, dtype=float)[:, None]
    n = np.asarray(n, dtype=float)[None, :]
    if system == "complete":
        return (1.0 - bass_formula(t, params)) ** n
    if system == "circle":
        return np.exp(-(n - 1) * params.p * t) * (1.0 - circle_limit(t, params))
    raise ValidationError(f"unknown system {system!r}")


def _truncated_homogeneous(system, params: BassParams, N, grid, cfg, closure):
    p, q = params.p, params.q
    n = np.arange(1, N + 1, dtype=float)
    if system == "complete":
        diag, up = -n * (p + q), n * q
    else:
        diag, up = -(n * p + q), np.full(N, q)
    if closure == "analytic":
        params.require_positive_p()
        top = lambda t: limit_values(system, params, [N + 1], [t])[0, 0]
    else:
        top = lambda t: 0.0

    def rhs(t, u):
        du = diag * u
        du[:-1] += up[:-1] * u[1:]
        du[-1] += up[-1] * top(t)
        return du

    U = integrate(rhs, np.ones(N), grid, cfg)
    return Trajectory(grid, {f"S_{k}": U[:, k - 1] for k in range(1, N + 1)})


def _truncated_kgroup(spec: HeteroSpec, N, grid, cfg, closure):
    K = spec.K
    shape = (N + 2,) * K
    ks = np.indices(shape, dtype=float)
    level = ks.sum(axis=0)
    active = (level >= 1) & (level <= N)
    boundary = level == N + 1
    Qk = np.tensordot(spec.Q, ks, axes=1)
    coeffs = [spec.a[m] * Qk[m] for m in range(K)]
    lam = np.tensordot(spec.p, ks, axes=1) + sum(coeffs)
    op = _ShiftOperator(lam, coeffs, active=active)
    kb = ks[:, boundary]
    n_u = int(np.prod(shape))
    a, p, QT = spec.a, spec.p, spec.Q.T

    def rhs(t, y):
        u = y[:n_u].reshape(shape)
        f = y[n_u:]
        if closure == "analytic":
            s = np.clip(1.0 - f / a, 0.0, None)
            u = u.copy()
            u[boundary] = np.prod(s[:, None] ** kb, axis=0)
        else:
            u = u.copy()
            u[boundary] = 0.0
        du = op.apply(u)
        df = (a - f) * (p + QT @ f)
        return np.concatenate([du.ravel(), df])

    y0 = np.concatenate([np.ones(n_u), np.zeros(K)])
    Y = integrate(rhs, y0, grid, cfg)
    U = Y[:, :n_u].reshape((grid.size,) + shape)
    series = {}
    for k in zip(*np.nonzero(active)):
        series["u_" + "_".join(map(str, k))] = U[(slice(None),) + tuple(k)]
    for j in range(K):
        series[f"f_{j + 1}"] = Y[:, n_u + j]
    return Trajectory(grid, series)


def embedded_diff_norm(system: str, M: int, params: BassParams, eps: float, grid,
                       cfg: IntegratorConfig | None = None) -> float:
    """``sup_t sup_n e^{-eps n} |u_n^(M)(t) - u_n^inf(t)|`` for complete or circle.

    Components ``n > M`` of the embedded system coincide with the limit system
    and contribute nothing; components ``n <= M`` use the exact reduced
    solution against the exact limit values.
    """
    params.require_positive_p()
    if params.q <= 0:
        raise ValidationError("eps-norm estimate requires q > 0")
    et = critical_eps(params)
    if not (0 < eps < et):
        raise ValidationError(f"eps must lie in (0, {et:.6g}), got {eps}")
    if system == "complete":
        sol = solve_complete_reduced(M, params, grid, cfg)
    elif system == "circle":
        sol = solve_circle_reduced(M, params, grid, cfg)
    else:
        raise ValidationError(f"unknown system {system!r}")
    exact = limit_values(system, params, np.arange(1, M + 1), sol.t)
    return eps_norm_sup(sol.S - exact, eps)
