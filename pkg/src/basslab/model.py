"""Parameter types and network construction for the discrete Bass model.

A network is a weighted directed graph. Adopter ``i`` pushes nonadopter ``j``
to adopt at rate ``q[i, j] / d[j]``, where ``d[j]`` is the indegree of ``j``;
every node also adopts spontaneously at its own external rate ``p[j]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

SUM_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when inputs violate a parameter or network invariant."""


@dataclass(frozen=True)
class BassParams:
    """External rate ``p`` and maximal internal rate ``q`` of a homogeneous model."""

    p: float
    q: float

    def __post_init__(self):
        if not (math.isfinite(self.p) and math.isfinite(self.q)):
            raise ValidationError("p and q must be finite")
        if self.p < 0:
            raise ValidationError(f"p must be >= 0, got {self.p}")
        if self.q < 0:
            raise ValidationError(f"q must be >= 0, got {self.q}")

    def require_positive_p(self) -> None:
        if self.p <= 0:
            raise ValidationError("this operation requires p > 0")

    def to_dict(self) -> dict:
        return {"p": self.p, "q": self.q}

    @classmethod
    def from_dict(cls, d: dict) -> "BassParams":
        return cls(p=float(d["p"]), q=float(d["q"]))


@dataclass(frozen=True, eq=False)
class HeteroSpec:
    """K homogeneous groups.

    ``Q[m, k]`` is the influence of a group-``m`` adopter on a group-``k``
    nonadopter.
    """

    a: np.ndarray
    p: np.ndarray
    Q: np.ndarray

    def __init__(self, a: Sequence[float], p: Sequence[float], Q: Sequence[Sequence[float]]):
        a = np.array(a, dtype=float)
        p = np.array(p, dtype=float)
        Q = np.array(Q, dtype=float)
        K = a.size
        if a.ndim != 1 or K == 0:
            raise ValidationError("a must be a non-empty 1-d sequence")
        if p.shape != (K,):
            raise ValidationError(f"p must have length K={K}")
        if Q.shape != (K, K):
            raise ValidationError(f"Q must be {K}x{K}, got {Q.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p)) and np.all(np.isfinite(Q))):
            raise ValidationError("all rates and fractions must be finite")
        if np.any(a <= 0):
            raise ValidationError("all group fractions a_k must be > 0")
        if abs(a.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"group fractions must sum to 1, got {a.sum()!r}")
        if np.any(p < 0):
            raise ValidationError("external rates p_k must be >= 0")
        if np.any(Q < 0):
            raise ValidationError("influence rates Q must be >= 0")
        for name, arr in (("a", a), ("p", p), ("Q", Q)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.a.size

    @property
    def q_received(self) -> np.ndarray:
        """Maximal influence on a group-k nonadopter, ``sum_m a_m Q[m, k]``."""
        return self.a @ self.Q

    def require_positive_p(self) -> None:
        if np.any(self.p <= 0):
            raise ValidationError("this operation requires min_k p_k > 0")

    def __eq__(self, other):
        if not isinstance(other, HeteroSpec):
            return NotImplemented
        return (
            np.array_equal(self.a, other.a)
            and np.array_equal(self.p, other.p)
            and np.array_equal(self.Q, other.Q)
        )

    def __hash__(self):
        return hash((self.a.tobytes(), self.p.tobytes(), self.Q.tobytes()))

    def __repr__(self):
        return f"HeteroSpec(a={self.a.tolist()}, p={self.p.tolist()}, Q={self.Q.tolist()})"

    @classmethod
    def mild(cls, a, p, q) -> "HeteroSpec":
        """Spec in which every adopter influences group k with the same rate q_k."""
        q = np.asarray(q, dtype=float)
        return cls(a, p, np.tile(q, (q.size, 1)))

    @classmethod
    def homogeneous(cls, params: BassParams) -> "HeteroSpec":
        return cls([1.0], [params.p], [[params.q]])

    def to_dict(self) -> dict:
        return {"K": self.K, "a": self.a.tolist(), "p": self.p.tolist(), "Q": self.Q.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HeteroSpec":
        spec = cls(d["a"], d["p"], d["Q"])
        if "K" in d and int(d["K"]) != spec.K:
            raise ValidationError(f"K={d['K']} does not match len(a)={spec.K}")
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "HeteroSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GroupSizes:
    M: int
    sizes: tuple[int, ...]

    def __post_init__(self):
        if sum(self.sizes) != self.M:
            raise ValidationError(f"group sizes {self.sizes} do not sum to M={self.M}")
        for k, m in enumerate(self.sizes):
            if m < 1:
                raise ValidationError(f"group {k} is empty (M_{k} = {m})")

    @property
    def fractions(self) -> np.ndarray:
        return np.array(self.sizes, dtype=float) / self.M

    @classmethod
    def from_fractions(cls, a: Sequence[float], M: int) -> "GroupSizes":
        """Floor rule: ``M_k = floor(a_k M)`` for k < K, last group takes the remainder."""
        a = np.asarray(a, dtype=float)
        # the small offset keeps e.g. 0.3 * 20 = 5.999... from flooring to 5
        head = [int(math.floor(x * M + 1e-9)) for x in a[:-1]]
        sizes = head + [M - sum(head)]
        for k, m in enumerate(sizes):
            if m < 1:
                raise ValidationError(
                    f"M={M} leaves group {k} empty (a_{k}={a[k]:g}); increase M"
                )
        return cls(M, tuple(sizes))


@dataclass(frozen=True, eq=False)
class NetworkInstance:
    """Finite weighted directed network.

    ``dense`` is set for complete and K-group networks: every ordered pair of
    distinct nodes is an edge with weight ``group_Q[group[src], group[dst]]``.
    Their edge arrays are generated on first access only, so simulators can
    work from the group matrix at large M.
    """

    M: int
    p: np.ndarray
    indegree: np.ndarray
    group: np.ndarray
    kind: str = "generic"
    group_Q: np.ndarray | None = None
    group_p: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    explicit_edges: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @cached_property
    def _edges(self):
        if self.explicit_edges is not None:
            return self.explicit_edges
        src, dst = _all_pairs(self.M)
        w = self.group_Q[self.group[src], self.group[dst]]
        _freeze(src, dst, w)
        return src, dst, w

    @property
    def src(self) -> np.ndarray:
        return self._edges[0]

    @property
    def dst(self) -> np.ndarray:
        return self._edges[1]

    @property
    def weight(self) -> np.ndarray:
        return self._edges[2]

    @property
    def dense(self) -> bool:
        return self.group_Q is not None

    @property
    def external_free(self) -> bool:
        """True when some node has p_j = 0."""
        return bool(np.any(self.p <= 0))

    @property
    def n_edges(self) -> int:
        if self.dense and self.explicit_edges is None:
            return self.M * (self.M - 1)
        return self.src.size

    def hazard_weights(self) -> np.ndarray:
        """Per-edge hazard ``q[i, j] / d[j]``."""
        d = self.indegree[self.dst]
        return np.where(d > 0, self.weight / np.maximum(d, 1), 0.0)

    def influence_matrix(self) -> np.ndarray:
        """Dense M x M matrix ``W[i, j] = q[i, j] / d[j]``."""
        if self.dense:
            if self.M == 1:
                return np.zeros((1, 1))
            W = self.group_Q[np.ix_(self.group, self.group)] / (self.M - 1)
            np.fill_diagonal(W, 0.0)
            return W
        W = np.zeros((self.M, self.M))
        np.add.at(W, (self.src, self.dst), self.hazard_weights())
        return W

    def max_influence(self) -> np.ndarray:
        """``q_j``: total influence on node j when all its peers have adopted."""
        out = np.zeros(self.M)
        np.add.at(out, self.dst, self.hazard_weights())
        return out

    def to_dict(self) -> dict:
        """Explicit edge-list form, readable by :func:`network_from_edges`."""
        return {
            "M": self.M,
            "p": self.p.tolist(),
            "edges": [[int(i), int(j), float(w)] for i, j, w in zip(self.src, self.dst, self.weight)],
        }


def _freeze(*arrays):
    for arr in arrays:
        arr.setflags(write=False)


def network_from_edges(M: int, p, edges) -> NetworkInstance:
    """Generic network from ``(i, j, q_ij)`` triples. Indegree counts listed edges."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    p = np.broadcast_to(np.asarray(p, dtype=float), (M,)).copy()
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("external rates must be finite and >= 0")
    edges = list(edges)
    src = np.array([int(e[0]) for e in edges], dtype=np.int64)
    dst = np.array([int(e[1]) for e in edges], dtype=np.int64)
    w = np.array([float(e[2]) for e in edges], dtype=float)
    if src.size:
        if src.min() < 0 or dst.min() < 0 or src.max() >= M or dst.max() >= M:
            raise ValidationError("edge endpoint out of range")
        if np.any(src == dst):
            raise ValidationError("self-loops are not allowed")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("edge weights must be finite and >= 0")
        pairs = set(zip(src.tolist(), dst.tolist()))
        if len(pairs) != src.size:
            raise ValidationError("duplicate edges")
    indeg = np.bincount(dst, minlength=M).astype(np.int64)
    group = np.zeros(M, dtype=np.int64)
    _freeze(p, src, dst, w, indeg, group)
    return NetworkInstance(M, p, indeg, group, explicit_edges=(src, dst, w))


def _all_pairs(M: int):
    i, j = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
    mask = i != j
    return i[mask], j[mask]


def make_complete(M: int, params: BassParams) -> NetworkInstance:
    if M < 1:
        raise ValidationError("complete network needs M >= 1")
    p = np.full(M, params.p)
    indeg = np.full(M, M - 1, dtype=np.int64)
    group = np.zeros(M, dtype=np.int64)
    gQ = np.array([[params.q]])
    gp = np.array([params.p])
    _freeze(p, indeg, group, gQ, gp)
    return NetworkInstance(
        M, p, indeg, group,
        kind="complete", group_Q=gQ, group_p=gp, params=params.to_dict(),
    )


def make_circle(M: int, params: BassParams) -> NetworkInstance:
    if M < 3:
        raise ValidationError("circle network needs M >= 3 (neighbours j-1, j+1 must differ)")
    j = np.arange(M)
    src = np.concatenate([(j - 1) % M, (j + 1) % M])
    dst = np.concatenate([j, j])
    w = np.full(src.size, params.q)
    p = np.full(M, params.p)
    indeg = np.full(M, 2, dtype=np.int64)
    group = np.zeros(M, dtype=np.int64)
    _freeze(p, src, dst, w, indeg, group)
    return NetworkInstance(
        M, p, indeg, group, kind="circle", params=params.to_dict(), explicit_edges=(src, dst, w)
    )


def make_kgroup(spec: HeteroSpec, M: int) -> tuple[NetworkInstance, GroupSizes]:
    sizes = GroupSizes.from_fractions(spec.a, M)
    group = np.repeat(np.arange(spec.K), sizes.sizes).astype(np.int64)
    p = spec.p[group].copy()
    indeg = np.full(M, M - 1, dtype=np.int64)
    gQ = spec.Q.copy()
    gp = spec.p.copy()
    _freeze(p, indeg, group, gQ, gp)
    net = NetworkInstance(
        M, p, indeg, group,
        kind="kgroup", group_Q=gQ, group_p=gp, params=spec.to_dict(),
    )
    return net, sizes


def homogenize(spec: HeteroSpec) -> BassParams:
    """Averaged rates ``p_bar = sum a_k p_k``, ``q_bar = sum_k a_k sum_m a_m Q[m, k]``."""
    p_bar = float(spec.a @ spec.p)
    q_bar = float(spec.a @ spec.Q @ spec.a)
    return BassParams(p_bar, q_bar)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time grid with named value series of the same length."""

    t: np.ndarray
    series: dict[str, np.ndarray]

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or np.any(np.diff(t) <= 0):
            raise ValidationError("trajectory grid must be 1-d and strictly increasing")
        series = {k: np.asarray(v, dtype=float) for k, v in self.series.items()}
        for name, v in series.items():
            if v.shape[:1] != t.shape:
                raise ValidationError(f"series {name!r} has length {v.shape[:1]}, grid has {t.size}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "series", series)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.series[name]

    def __contains__(self, name: str) -> bool:
        return name in self.series

    def names(self) -> list[str]:
        return list(self.series)
