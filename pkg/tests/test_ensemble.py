"""Unit tests for weighted ensembles, moment bases, and resampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from mmaccel import (FeneModel, MomentBasis, WeightedEnsemble, degeneracy,
                     effective_sample_size, kde_density, restrict,
                     scott_bandwidth, stratified_resample, stress,
                     weighted_average)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        WeightedEnsemble(np.array([1.0, 2.0]), np.array([0.5]))
    with pytest.raises(ValueError):
        WeightedEnsemble(np.array([1.0, 2.0]), np.array([-0.1, 1.1]))
    with pytest.raises(ValueError):
        WeightedEnsemble(np.array([1.0, 2.0]), np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        WeightedEnsemble(np.empty(0), np.empty(0))


def test_csv_round_trip():
    e = WeightedEnsemble(np.array([0.1, -2.5, 3.75]), np.array([0.2, 0.3, 0.5]))
    back = WeightedEnsemble.from_csv(e.to_csv())
    assert np.array_equal(back.positions, e.positions)
    assert np.array_equal(back.weights, e.weights)


def test_fene_even_basis_rows():
    basis = MomentBasis.fene_even(3, 2.0)
    x = np.array([1.0, -2.0 * 0.5])
    R = basis.evaluate(x)
    np.testing.assert_allclose(R[0], 1.0)
    np.testing.assert_allclose(R[1], (x / 2.0) ** 2)
    np.testing.assert_allclose(R[3], (x / 2.0) ** 6)


def test_monomial_basis_rows():
    basis = MomentBasis.scaled_monomials(3, 2.0)
    x = np.array([1.0, -1.0])
    R = basis.evaluate(x)
    np.testing.assert_allclose(R[1], x / 2.0)
    np.testing.assert_allclose(R[3], (x / 2.0) ** 3)


def test_custom_basis():
    basis = MomentBasis.from_functions([np.sin, np.cos], 3.0)
    x = np.array([0.5])
    R = basis.evaluate(x)
    assert R.shape == (3, 1)
    assert R[1, 0] == pytest.approx(np.sin(0.5))


@pytest.mark.parametrize("factory", [MomentBasis.fene_even,
                                     MomentBasis.scaled_monomials])
def test_l2n_gram_matches_quadrature(factory):
    basis = factory(3, 1.7)
    H = basis.l2n_gram()
    for k in range(4):
        for l in range(4):
            val, _ = quad(lambda x: basis.evaluate(np.array([x]))[k, 0]
                          * basis.evaluate(np.array([x]))[l, 0],
                          -1.7, 1.7)
            assert H[k, l] == pytest.approx(val, abs=1e-12)


def test_restrict_manual():
    e = WeightedEnsemble(np.array([1.0, -2.0]), np.array([0.25, 0.75]))
    basis = MomentBasis.scaled_monomials(2, 1.0)
    m = restrict(e, basis)
    assert m[0] == pytest.approx(0.25 * 1.0 + 0.75 * (-2.0))
    assert m[1] == pytest.approx(0.25 * 1.0 + 0.75 * 4.0)


def test_stress_manual():
    model = FeneModel(49.0, 2.0, lambda t: 0.0)
    e = WeightedEnsemble(np.array([1.0, -3.0]), np.array([0.5, 0.5]))
    xf = 49.0 * np.array([1.0, 9.0]) / (49.0 - np.array([1.0, 9.0]))
    assert stress(e, model) == pytest.approx((xf.mean() - 1.0) / 2.0)


def test_degeneracy_bounds():
    J = 8
    uniform = np.full(J, 1.0 / J)
    point = np.zeros(J)
    point[0] = 1.0
    assert degeneracy(uniform, "KLD") == pytest.approx(0.0, abs=1e-15)
    assert degeneracy(uniform, "L2D") == pytest.approx(0.0, abs=1e-15)
    assert degeneracy(point, "KLD") == pytest.approx(np.log(J))
    # ((J-1)^2 + (J-1)) / J = J - 1 for a point mass.
    assert degeneracy(point, "L2D") == pytest.approx(J - 1)


def test_stratified_resample_identity_on_uniform():
    rng = np.random.default_rng(0)
    e = WeightedEnsemble.uniform(rng.normal(size=64))
    out = stratified_resample(e, rng.random(64))
    assert np.array_equal(out.positions, e.positions)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=2, max_size=12),
       st.integers(min_value=0, max_value=2**31))
def test_stratified_resample_branching_numbers(raw, seed):
    w = np.asarray(raw)
    w = w / w.sum()
    J = w.size
    e = WeightedEnsemble(np.arange(J, dtype=float), w)
    out = stratified_resample(e, np.random.default_rng(seed).random(J))
    counts = np.bincount(out.positions.astype(int), minlength=J)
    assert counts.sum() == J
    # Stratification keeps each branching number within 2 of its expectation.
    assert np.all(np.abs(counts - J * w) < 2.0)


def test_effective_sample_size():
    assert effective_sample_size(np.full(10, 0.1)) == pytest.approx(10.0)
    w = np.zeros(10)
    w[0] = 1.0
    assert effective_sample_size(w) == pytest.approx(1.0)


def test_weighted_average_rejects_non_finite():
    e = WeightedEnsemble.uniform(np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        weighted_average(e, lambda x: 1.0 / x)


def test_kde_integrates_to_one():
    rng = np.random.default_rng(1)
    e = WeightedEnsemble.uniform(rng.normal(size=500))
    grid = np.linspace(-8, 8, 2001)
    dens = kde_density(e, None, grid)
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)
    assert scott_bandwidth(e) > 0
