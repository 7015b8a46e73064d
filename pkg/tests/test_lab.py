import json
import math

import numpy as np
import pytest

from basslab import compartmental as comp
from basslab import lab
from basslab.io import read_columns_csv
from basslab.model import BassParams, HeteroSpec, ValidationError
from basslab.odeint import critical_eps, uniform_grid


def test_study_complete_halving():
    s = lab.study_complete(0.02, 0.1, [16, 32, 64])
    assert np.all(s.diffs > 0)
    assert np.all(np.diff(s.diffs) < 0)
    ratios = s.diffs[1:] / s.diffs[:-1]
    assert np.allclose(ratios, 0.5, atol=0.05)


def test_study_complete_without_word_of_mouth():
    s = lab.study_complete(0.05, 0.0, [4, 8, 16])
    assert np.max(np.abs(s.diffs)) < 1e-10
    assert s.fit is None


def test_study_rejects_bad_M_lists():
    with pytest.raises(ValidationError):
        lab.study_complete(0.02, 0.1, [16, 8])
    with pytest.raises(ValidationError):
        lab.study_complete(0.02, 0.1, [])
    with pytest.raises(ValidationError):
        lab.study_circle(0.02, 0.1, [2, 3])


def test_study_circle_truncates_tiny_differences():
    s = lab.study_circle(0.02, 0.11, list(range(3, 31)))
    assert s.dropped and s.dropped[-1] == 30
    assert np.all(s.diffs >= lab.CIRCLE_FLOOR)
    assert np.all(np.diff(s.diffs) < 0)
    assert np.all(s.diffs <= s.bounds)


def test_study_circle_without_word_of_mouth():
    s = lab.study_circle(0.05, 0.0, [3, 4, 5])
    assert np.max(np.abs(s.diffs)) < 1e-10


def test_kgroup_single_group_reproduces_complete():
    prm = BassParams(0.02, 0.1)
    grid = uniform_grid(comp.bass_horizon(prm), 400)
    a = lab.study_complete(0.02, 0.1, [8, 16, 32], grid)
    b = lab.study_kgroup(HeteroSpec.homogeneous(prm), [8, 16, 32], grid)
    assert np.allclose(a.diffs, b.diffs, rtol=1e-6, atol=1e-9)
    assert b.fit.slope == pytest.approx(a.fit.slope, abs=1e-4)


def test_kgroup_budget_reports_attainable_range(fig3_spec):
    s = lab.study_kgroup(fig3_spec, [20, 40, 80], budget=20_000)
    assert s.Ms == [20, 40]
    assert s.dropped == [80]
    with pytest.raises(ValidationError):
        lab.study_kgroup(fig3_spec, [80], budget=10)


def test_study_grid_independence():
    coarse = lab.study_complete(0.02, 0.1, [8, 32])
    prm = BassParams(0.02, 0.1)
    fine = lab.study_complete(0.02, 0.1, [8, 32], uniform_grid(comp.bass_horizon(prm), 800))
    assert np.all(np.abs(fine.diffs - coarse.diffs) / coarse.diffs < 0.01)


def test_study_outputs(tmp_path):
    s = lab.study_complete(0.02, 0.1, [8, 16])
    paths = s.write(tmp_path, trajectories=True)
    names = sorted(p.name for p in paths)
    assert names == ["complete_M16.csv", "complete_M8.csv", "complete_convergence.csv", "complete_summary.json"]
    doc = json.loads((tmp_path / "complete_summary.json").read_text())
    assert doc["family"] == "complete"
    assert set(doc["fit"]) >= {"slope", "intercept", "rms"}
    assert doc["grid"]["points"] == 400
    cols = read_columns_csv(tmp_path / "complete_convergence.csv")
    assert cols["M"].tolist() == [8, 16]
    assert np.array_equal(cols["sup_diff"], s.diffs)


def test_hetero_compare_identical_groups():
    rep = lab.hetero_compare([0.03, 0.03], [0.3, 0.3], [0.4, 0.6])
    assert np.max(np.abs(rep.gap)) < 1e-9


def test_hetero_compare_positive_monotone():
    rep = lab.hetero_compare([0.01, 0.05, 0.2], [0.1, 0.3, 0.6], [0.2, 0.5, 0.3])
    assert rep.positively_monotone
    assert rep.het_below_hom
    assert rep.y_positive
    assert rep.groups_ordered


def test_hetero_compare_y_matches_mild_formula():
    p, q, a = np.array([0.01, 0.2]), np.array([0.1, 0.5]), np.array([0.5, 0.5])
    rep = lab.hetero_compare(p, q, a)
    f = rep.within_group * a
    F = f.sum(axis=1)
    y = f @ p - rep.hom_params.p * F + F * (f @ q - rep.hom_params.q * F)
    assert np.allclose(rep.y, y, atol=1e-12)


def test_hetero_compare_requires_external_rate():
    with pytest.raises(ValidationError):
        lab.hetero_compare([0.0, 0.0], [0.1, 0.2], [0.5, 0.5])


@pytest.mark.parametrize("ratio", [1.0, 10.0])
def test_negative_example_with_p_at_least_q(ratio):
    q = 0.05
    p, qs, a = comp.negative_mild_rates(ratio * q, q)
    rep = lab.hetero_compare(p, qs, a)
    assert rep.het_below_hom
    assert not rep.positively_monotone


def test_counterexample():
    rep = lab.hetero_counterexample(0.02, 0.1)
    assert rep.initial_end is not None and rep.initial_end > 0
    assert rep.crossing is not None and rep.crossing > rep.initial_end
    assert rep.d2_ratio == pytest.approx(2.0, rel=0.05)
    t = rep.compare.t
    late = t > rep.crossing
    assert np.all(rep.compare.f_het[late] <= rep.compare.f_hom[late])
    with pytest.raises(ValidationError):
        lab.hetero_counterexample(0.0, 0.1)


def test_counterexample_equal_rates_reports_derivatives():
    rep = lab.hetero_counterexample(0.1, 0.1)
    assert abs(rep.d2_het) < 1e-6 and abs(rep.d2_hom) < 1e-6
    assert "f2_het_0" in rep.summary()


def test_toy_unit_closed_form():
    run = lab.toy_embedding("unit", 6, uniform_grid(8.0, 81))
    assert np.max(np.abs(run.u - run.reference())) < 1e-7
    t = run.t
    assert np.allclose(run.u[:, 4], (1 + t) * np.exp(-t), atol=1e-9)
    assert np.all(run.u[0] == 1.0)


def test_toy_unit_monotone_in_M():
    grid = np.array([0.0, 1.0])
    vals = [lab.toy_embedding("unit", M, grid).u[-1, 0] for M in (2, 4, 8, 16)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(1.0, abs=1e-12)


def test_toy_geometric_bound():
    run = lab.toy_embedding("3^k", 6, uniform_grid(1.0, 201))
    assert np.all(run.u <= run.bound() + 1e-9)
    assert run.u[-1, 0] <= 2 * math.exp(-3)
    assert np.max(np.abs(run.u[:, -1] - np.exp(-729 * run.t))) < 1e-9
    with pytest.raises(ValidationError):
        run.reference()


def test_toy_validation():
    with pytest.raises(ValidationError):
        lab.toy_embedding("geometric", 13, uniform_grid(1.0, 3))
    with pytest.raises(ValidationError):
        lab.toy_embedding("quadratic", 3, uniform_grid(1.0, 3))
    with pytest.raises(ValidationError):
        lab.toy_embedding("unit", 0, uniform_grid(1.0, 3))


def test_verify_bound_examples():
    prm = BassParams(0.02, 0.1)
    et = critical_eps(prm)
    rep = lab.verify_bound("complete", 32, 0.02, 0.1, et / 2)
    assert rep.holds
    assert rep.rhs <= rep.rhs_coarse
    prm = BassParams(0.02, 0.11)
    et = critical_eps(prm)
    rep = lab.verify_bound("circle", 8, 0.02, 0.11, et / 2)
    th = 0.11 * math.exp(et / 2) / 0.13
    assert rep.rhs == pytest.approx(2 * 0.11 / (0.13 * (1 - th)) * math.exp(-8 * et / 2))
    assert rep.holds


def test_verify_bound_domain():
    et = critical_eps(BassParams(0.02, 0.1))
    for eps in (0.0, et, 1.5 * et):
        with pytest.raises(ValidationError):
            lab.verify_bound("complete", 8, 0.02, 0.1, eps)
    with pytest.raises(ValidationError):
        lab.verify_bound("torus", 8, 0.02, 0.1, et / 2)
