"""Unit tests for the matching operators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmaccel import (KLD, L2D, L2N, MatchConfig, MomentBasis, SolverFailureError,
                     WeightedEnsemble, kld_reweight, l2d_reweight, l2n_average,
                     l2n_multipliers, match, restrict)


@pytest.fixture
def prior():
    rng = np.random.default_rng(7)
    return WeightedEnsemble.uniform(rng.uniform(-0.9, 0.9, size=400))


@pytest.fixture
def basis():
    return MomentBasis.scaled_monomials(2, 1.0)


@pytest.mark.parametrize("op", [KLD, L2D, L2N])
def test_projection_property(op, prior, basis):
    out = match(restrict(prior, basis), prior, basis, MatchConfig(operator_kind=op))
    assert out.converged
    assert out.iterations == 0
    assert np.max(np.abs(out.multipliers)) < 1e-12
    assert np.max(np.abs(out.new_weights - prior.weights)) < 1e-12


def test_kld_reweight_formula(prior, basis):
    lam = np.array([0.1, -0.2, 0.3])
    w = kld_reweight(lam, prior, basis)
    R = basis.evaluate(prior.positions)
    np.testing.assert_allclose(w, prior.weights * np.exp(lam @ R), rtol=1e-14)


def test_kld_reweight_overflow(prior, basis):
    with pytest.raises(SolverFailureError):
        kld_reweight(np.array([900.0, 0.0, 0.0]), prior, basis)


def test_l2d_reweight_clamps(prior, basis):
    lam = np.array([-2.0, 0.0, 0.0])  # s = -1 everywhere -> all clamped to zero
    assert np.all(l2d_reweight(lam, prior, basis) == 0.0)


def test_infeasible_target_is_failure_not_exception(prior, basis):
    # First moment of 1.5 is unreachable for particles inside (-1, 1).
    target = np.array([1.5, 0.9])
    for op in (KLD, L2D):
        out = match(target, prior, basis, MatchConfig(operator_kind=op))
        assert not out.converged
        assert out.failure_reason is not None
        assert out.iterations <= 5


def test_failure_reports_gradient_history(prior, basis):
    out = match(np.array([1.5, 0.9]), prior, basis, MatchConfig(operator_kind=KLD))
    assert len(out.gradient_norms) >= 1
    assert out.final_gradient_norm >= 0


def test_l2n_constraints_hold(prior, basis):
    target = restrict(prior, basis) + np.array([0.05, -0.02])
    lam = l2n_multipliers(target, prior, basis)
    H = basis.l2n_gram()
    shift = H @ lam
    assert shift[0] == pytest.approx(0.0, abs=1e-12)  # mass unchanged
    np.testing.assert_allclose(restrict(prior, basis) + shift[1:], target,
                               atol=1e-12)


def test_l2n_average_reproduces_constrained_moment(prior, basis):
    target = restrict(prior, basis) + np.array([0.05, -0.02])
    lam = l2n_multipliers(target, prior, basis)
    # Averaging the first moment function against the matched density must
    # return the constrained value.
    val = l2n_average(lam, prior, basis, lambda x: x / basis.gamma)
    assert val == pytest.approx(target[0], abs=1e-10)


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(operator_kind="bogus")
    with pytest.raises(ValueError):
        MatchConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        MatchConfig(max_iterations=0)


def test_reweighted_restores_normalization(prior, basis):
    target = restrict(prior, basis) * 1.02
    out = match(target, prior, basis, MatchConfig(operator_kind=KLD))
    assert out.converged
    matched = out.reweighted(prior)
    assert abs(matched.weights.sum() - 1.0) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31), st.sampled_from([KLD, L2D]))
def test_feasible_targets_converge_and_satisfy_constraints(seed, op):
    rng = np.random.default_rng(seed)
    prior = WeightedEnsemble.uniform(rng.uniform(-0.95, 0.95, size=300))
    basis = MomentBasis.scaled_monomials(3, 1.0)
    # A Dirichlet reweighting of the prior's own atoms is always feasible.
    w_feasible = rng.dirichlet(np.full(300, 5.0))
    target = 0.5 * restrict(prior, basis) \
        + 0.5 * basis.evaluate(prior.positions)[1:] @ w_feasible
    out = match(target, prior, basis,
                MatchConfig(operator_kind=op, max_iterations=30))
    assert out.converged
    matched = out.reweighted(prior)
    np.testing.assert_allclose(restrict(matched, basis), target, atol=1e-8)
