import json

import numpy as np
import pytest

from basslab.master import solve_complete_reduced, solve_full_master
from basslab.model import BassParams, ValidationError, make_circle, make_complete, network_from_edges
from basslab.stochastic import (
    AdoptionRecord,
    default_workers,
    monte_carlo,
    replicate_seed,
    simulate_once,
    splitmix64,
)
from basslab.odeint import uniform_grid


def test_splitmix64_reference_values():
    # first outputs of the reference generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert replicate_seed(1, 0) != replicate_seed(1, 1)
    assert replicate_seed(1, 5) == replicate_seed(1, 5)


def test_simulate_once_is_deterministic():
    net = make_complete(10, BassParams(0.05, 0.4))
    a = simulate_once(net, 123, 50.0)
    b = simulate_once(net, 123, 50.0)
    assert np.array_equal(a.times, b.times)
    c = simulate_once(net, 124, 50.0)
    assert not np.array_equal(a.times, c.times)


def test_adoption_record_properties():
    net = make_complete(10, BassParams(0.05, 0.4))
    rec = simulate_once(net, 7, 30.0)
    finite = rec.times[np.isfinite(rec.times)]
    assert np.all((finite > 0) & (finite <= 30.0))
    counts = rec.count([0.0, 10.0, 30.0])
    assert counts[0] == 0
    assert np.all(np.diff(counts) >= 0)
    assert len(set(finite.tolist())) == finite.size


def test_no_external_no_adoption():
    net = network_from_edges(3, 0.0, [(0, 1, 1.0), (1, 2, 1.0)])
    rec = simulate_once(net, 1, 100.0)
    assert np.all(np.isinf(rec.times))


def test_isolated_nodes_are_exponential():
    # with no edges every node adopts at an Exp(p) time
    net = network_from_edges(1, 0.5, [])
    grid = np.array([0.0, 1.0, 2.0, 4.0])
    mc = monte_carlo(net, 40_000, grid, 11, workers=1)
    assert np.all(np.abs(mc.mean - (1 - np.exp(-0.5 * grid))) <= 4 * mc.se + 1e-15)


def test_single_node_exact_fraction_of_first_replicate():
    net = network_from_edges(1, 1.0, [])
    rec = simulate_once(net, replicate_seed(5, 0), 1e9)
    u = np.random.Generator(np.random.PCG64(replicate_seed(5, 0))).random(2)
    assert rec.times[0] == pytest.approx(-np.log1p(-u[0]))


def test_monte_carlo_matches_complete_master():
    prm = BassParams(0.05, 0.4)
    net = make_complete(6, prm)
    grid = uniform_grid(25.0, 26)
    mc = monte_carlo(net, 20_000, grid, 3, workers=1)
    ex = solve_complete_reduced(6, prm, grid).f_discrete
    assert np.all(np.abs(mc.mean - ex) <= 4 * mc.se + 1e-15)


def test_monte_carlo_matches_circle_master():
    prm = BassParams(0.1, 0.5)
    net = make_circle(5, prm)
    grid = uniform_grid(20.0, 21)
    mc = monte_carlo(net, 20_000, grid, 4, workers=1)
    ex = solve_full_master(net, grid).f_discrete
    assert np.all(np.abs(mc.mean - ex) <= 4 * mc.se + 1e-15)


def test_monte_carlo_independent_of_workers():
    net = make_complete(5, BassParams(0.1, 0.3))
    grid = uniform_grid(20.0, 11)
    one = monte_carlo(net, 3000, grid, 9, workers=1, chunk=500)
    many = monte_carlo(net, 3000, grid, 9, workers=4, chunk=500)
    assert np.array_equal(one.mean, many.mean)
    assert np.array_equal(one.se, many.se)


def test_monte_carlo_replicates_independent_of_batching():
    # the r-th replicate's trajectory does not depend on which batch it sits in
    net = make_complete(5, BassParams(0.1, 0.3))
    grid = uniform_grid(20.0, 11)
    a = monte_carlo(net, 1, grid, 9)
    rec = simulate_once(net, replicate_seed(9, 0), 20.0)
    assert np.allclose(a.mean, rec.count(grid) / 5)


def test_monte_carlo_validation():
    net = make_complete(3, BassParams(0.1, 0.3))
    with pytest.raises(ValidationError):
        monte_carlo(net, 0, uniform_grid(1.0, 3), 1)
    with pytest.raises(ValidationError):
        simulate_once(net, 1, 0.0)


def test_summary_csv_and_sidecar(tmp_path):
    net = make_complete(3, BassParams(0.1, 0.3))
    mc = monte_carlo(net, 100, uniform_grid(5.0, 6), 42)
    meta_path = mc.write(tmp_path / "mc.csv")
    header = (tmp_path / "mc.csv").read_text().splitlines()[0]
    assert header == "t,f_mean,f_se"
    meta = json.loads(meta_path.read_text())
    assert meta["master_seed"] == 42 and meta["R"] == 100


def test_worker_env_override(monkeypatch):
    monkeypatch.setenv("BASSLAB_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("BASSLAB_WORKERS", "zero")
    with pytest.raises(ValidationError):
        default_workers()
