"""Exact event-driven simulation of the discrete Bass model.

Each nonadopter ``j`` carries hazard ``h_j = p_j + sum_{adopters i} q_ij / d_j``.
The time to the next adoption is exponential with rate ``sum_j h_j`` and the
adopting node is drawn with probability proportional to ``h_j``. Replicates
are simulated in vectorised batches, but each replicate consumes only its own
random stream, so results do not depend on batch size or worker count.

Replicate ``r`` of a run with master seed ``s`` is driven by a PCG64
generator seeded with ``replicate_seed(s, r)``, a splitmix64 mix::

    replicate_seed(s, r) = splitmix64(splitmix64(s) XOR r)

Every adoption uses two uniforms from that stream: one for the waiting time
and one for the choice of node.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import NetworkInstance, ValidationError
from .odeint import check_grid

MASK64 = (1 << 64) - 1
CHUNK = 4096


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def replicate_seed(master_seed: int, r: int) -> int:
    return splitmix64(splitmix64(int(master_seed) & MASK64) ^ int(r))


def default_workers() -> int:
    env = os.environ.get("BASSLAB_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"BASSLAB_WORKERS must be an integer, got {env!r}")
        if n < 1:
            raise ValidationError("BASSLAB_WORKERS must be >= 1")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class AdoptionRecord:
    """Adoption time of every node (``inf`` if not adopted by ``T``)."""

    times: np.ndarray
    seed: int
    T: float

    def count(self, t) -> np.ndarray:
        """Number of adopters N(t)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.sum(self.times[None, :] <= t[:, None], axis=1)


class _Hazards:
    """Rows of the per-edge hazard matrix ``W[i, :] = q_i. / d_.``, looked up per adopter."""

    def __init__(self, net: NetworkInstance):
        self.net = net
        if net.dense:
            self.Qd = net.group_Q / max(net.M - 1, 1)
            self.group = net.group
            self.W = None
        else:
            self.W = net.influence_matrix()

    def rows(self, nodes: np.ndarray) -> np.ndarray:
        if self.W is not None:
            return self.W[nodes]
        return self.Qd[self.group[nodes]][:, self.group]


def _simulate_batch(net: NetworkInstance, seeds, T: float, hz: _Hazards) -> np.ndarray:
    M = net.M
    R = len(seeds)
    U = np.empty((R, 2 * M))
    for r, s in enumerate(seeds):
        U[r] = np.random.Generator(np.random.PCG64(s)).random(2 * M)

    times = np.full((R, M), np.inf)
    adopted = np.zeros((R, M), dtype=bool)
    h = np.broadcast_to(net.p, (R, M)).copy()
    t = np.zeros(R)
    live = np.ones(R, dtype=bool)
    for step in range(M):
        rows = np.nonzero(live)[0]
        if rows.size == 0:
            break
        hr = np.where(adopted[rows], 0.0, h[rows])
        total = hr.sum(axis=1)
        stuck = total <= 0
        with np.errstate(divide="ignore"):
            wait = -np.log1p(-U[rows, 2 * step]) / total
        t_new = t[rows] + wait
        finished = stuck | (t_new > T)
        live[rows[finished]] = False
        go = ~finished
        rows, hr, total, t_new = rows[go], hr[go], total[go], t_new[go]
        if rows.size == 0:
            break
        target = U[rows, 2 * step + 1] * total
        cum = np.cumsum(hr, axis=1)
        node = np.argmax(cum > target[:, None], axis=1)
        # rounding can leave target >= cum[-1]; fall back to the last node with positive hazard
        overshoot = cum[np.arange(rows.size), -1] <= target
        if np.any(overshoot):
            last_pos = M - 1 - np.argmax(hr[overshoot, ::-1] > 0, axis=1)
            node[overshoot] = last_pos
        adopted[rows, node] = True
        times[rows, node] = t_new
        t[rows] = t_new
        h[rows] += hz.rows(node)
    return times


def simulate_once(net: NetworkInstance, seed: int, T: float) -> AdoptionRecord:
    """One exact realisation up to horizon ``T``."""
    if not T > 0:
        raise ValidationError("horizon T must be > 0")
    times = _simulate_batch(net, [int(seed)], T, _Hazards(net))[0]
    return AdoptionRecord(times, int(seed), float(T))


@dataclass(frozen=True, eq=False)
class McSummary:
    t: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    R: int
    master_seed: int

    def write_csv(self, path) -> None:
        from .io import write_columns_csv

        write_columns_csv(path, {"t": self.t, "f_mean": self.mean, "f_se": self.se})

    def metadata(self) -> dict:
        return {"R": self.R, "master_seed": self.master_seed, "grid_points": int(self.t.size),
                "T": float(self.t[-1])}

    def write(self, csv_path) -> Path:
        """CSV plus a JSON sidecar (``<name>.meta.json``) recording seed and R."""
        csv_path = Path(csv_path)
        self.write_csv(csv_path)
        meta = csv_path.with_suffix(".meta.json")
        meta.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return meta


def _chunk_stats(net, grid, master_seed, start, stop, hz):
    seeds = [replicate_seed(master_seed, r) for r in range(start, stop)]
    times = _simulate_batch(net, seeds, float(grid[-1]), hz)
    n = stop - start
    G = grid.size
    idx = np.searchsorted(grid, times, side="left")  # adopted by grid[i] iff idx <= i
    flat = (np.arange(n)[:, None] * (G + 1) + idx).ravel()
    counts = np.bincount(flat, minlength=n * (G + 1)).reshape(n, G + 1)
    frac = np.cumsum(counts, axis=1)[:, :G] / net.M
    mean = frac.mean(axis=0)
    m2 = ((frac - mean) ** 2).sum(axis=0)
    return n, mean, m2


def monte_carlo(net: NetworkInstance, R: int, grid, master_seed: int, *,
                workers: int | None = None, chunk: int = CHUNK) -> McSummary:
    """Mean adopter fraction over ``R`` replicates with its standard error.

    Chunks are merged in replicate order (Chan et al. pairwise update), so the
    result is identical for any ``workers``.
    """
    if R < 1:
        raise ValidationError("R must be >= 1")
    grid = check_grid(grid)
    if grid[0] < 0:
        raise ValidationError("grid must start at t >= 0")
    hz = _Hazards(net)
    bounds = [(s, min(s + chunk, R)) for s in range(0, R, chunk)]
    workers = workers or default_workers()
    job = lambda b: _chunk_stats(net, grid, master_seed, b[0], b[1], hz)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]

    n, mean, m2 = parts[0]
    for nb, mb, m2b in parts[1:]:
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * (nb / tot)
        m2 = m2 + m2b + delta**2 * (n * nb / tot)
        n = tot
    var = m2 / (R - 1) if R > 1 else np.zeros_like(m2)
    se = np.sqrt(np.maximum(var, 0.0) / R)
    return McSummary(grid, mean, se, R, int(master_seed))
