"""Matching operators: reweight a prior ensemble so its moments hit a target.

Three strategies are provided.  KLD and L2D minimize an f-divergence to the
prior over the moment constraints and are solved by Newton-Raphson on the
concave Lagrangian dual; L2N projects the prior density onto the constraint
hyperplane in L2, which reduces to a single symmetric linear solve.

Non-convergence is a first-class result (MatchOutcome.converged is False),
not an exception: the macroscopic step controller consumes it to shrink the
extrapolation step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .ensemble import MomentBasis, WeightedEnsemble, restrict, weighted_average

log = logging.getLogger(__name__)

L2N = "L2N"
KLD = "KLD"
L2D = "L2D"

# Fail loudly on near-singular dual Hessians instead of regularizing silently.
MAX_CONDITION = 1e12


class SolverFailureError(RuntimeError):
    """Singular or hopelessly ill-conditioned linear system in a matching solve."""


@dataclass(frozen=True)
class MatchConfig:
    operator_kind: str = KLD
    tolerance: float = 1e-9
    max_iterations: int = 5
    hessian_jitter: float = 0.0  # optional diagonal regularization, off by default

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.operator_kind not in (L2N, KLD, L2D):
            raise ValueError(f"unknown matching operator {self.operator_kind!r}")


@dataclass
class MatchOutcome:
    multipliers: np.ndarray
    new_weights: np.ndarray | None
    iterations: int
    converged: bool
    final_gradient_norm: float
    failure_reason: str | None = None
    gradient_norms: list = field(default_factory=list)

    def reweighted(self, prior: WeightedEnsemble) -> WeightedEnsemble:
        if self.new_weights is None:
            raise ValueError("no ensemble weights available for this operator")
        w = self.new_weights
        total = float(np.sum(w))
        if abs(total - 1.0) > 1e-12:
            # The mass constraint is met to solver tolerance only; restore the
            # ensemble normalization invariant without touching weights that
            # already satisfy it (keeps no-op matches bitwise transparent).
            w = w / total
        return prior.with_weights(w)


def kld_reweight(multipliers, prior: WeightedEnsemble, basis: MomentBasis) -> np.ndarray:
    """Exponential tilt w_j exp(sum_l lambda_l R_l(X_j)); not renormalized."""
    R = basis.evaluate(prior.positions)
    with np.errstate(over="raise"):
        try:
            tilt = np.exp(np.asarray(multipliers, dtype=float) @ R)
        except FloatingPointError as exc:
            raise SolverFailureError("overflow in exponential reweighting") from exc
    return prior.weights * tilt


def l2d_reweight(multipliers, prior: WeightedEnsemble, basis: MomentBasis) -> np.ndarray:
    """Clamped affine tilt w_j max(0, sum_l lambda_l R_l(X_j) + 1)."""
    R = basis.evaluate(prior.positions)
    s = np.asarray(multipliers, dtype=float) @ R + 1.0
    return prior.weights * np.maximum(0.0, s)


def _solve_step(H: np.ndarray, rhs: np.ndarray, jitter: float):
    """Solve H x = rhs with a condition guard; returns (x, reason-or-None)."""
    if jitter > 0.0:
        H = H + jitter * np.eye(H.shape[0])
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        return None, "ill_conditioned_hessian"
    return np.linalg.solve(H, rhs), None


def _failure(lam, weights, it, gnorm, reason, norms) -> MatchOutcome:
    log.info("matching_failure reason=%s iterations=%d grad_norm=%.3e", reason, it, gnorm)
    return MatchOutcome(lam, weights, it, False, gnorm, failure_reason=reason,
                        gradient_norms=norms)


def newton_solve_kld(target, prior: WeightedEnsemble, basis: MomentBasis,
                     config: MatchConfig) -> MatchOutcome:
    """Newton-Raphson on the KLD dual, started at lambda = 0 (the prior itself).

    Gradient: m~ - sum_j R(X_j) w_j(lambda); Hessian: -sum_j R R^T w_j(lambda).
    """
    R = basis.evaluate(prior.positions)
    w0 = prior.weights
    m_ext = np.concatenate(([1.0], np.asarray(target, dtype=float)))
    lam = np.zeros(basis.L + 1)
    norms = []
    w = w0.copy()
    for it in range(config.max_iterations + 1):
        with np.errstate(over="ignore"):
            w = w0 * np.exp(lam @ R)
        if not np.all(np.isfinite(w)):
            return _failure(lam, None, it, np.inf, "overflow", norms)
        grad = m_ext - R @ w
        gnorm = float(np.max(np.abs(grad)))
        norms.append(gnorm)
        log.debug("solver=KLD iter=%d grad_norm=%.3e", it, gnorm)
        if gnorm < config.tolerance:
            return MatchOutcome(lam, w, it, True, gnorm, gradient_norms=norms)
        if it == config.max_iterations:
            break
        H = -(R * w) @ R.T
        step, reason = _solve_step(H, grad, config.hessian_jitter)
        if reason is not None:
            return _failure(lam, w, it, gnorm, reason, norms)
        lam = lam - step
    return _failure(lam, w, config.max_iterations, norms[-1], "max_iterations", norms)


def newton_solve_l2d(target, prior: WeightedEnsemble, basis: MomentBasis,
                     config: MatchConfig) -> MatchOutcome:
    """Simplified Newton iteration for the L2D dual.

    With weights w_j(lambda) = w_j max(0, lambda.R + 1) the dual gradient is
    affine in lambda on the active set, so a full Newton step lands at
    lambda_new = -H(lambda_old)^{-1} (m~ - m^(lambda_old)) where m^ collects
    the prior moments restricted to the active particles.
    """
    R = basis.evaluate(prior.positions)
    w0 = prior.weights
    m_ext = np.concatenate(([1.0], np.asarray(target, dtype=float)))
    lam = np.zeros(basis.L + 1)
    norms = []
    w = w0.copy()
    for it in range(config.max_iterations + 1):
        s = lam @ R + 1.0
        w = w0 * np.maximum(0.0, s)
        grad = m_ext - R @ w
        gnorm = float(np.max(np.abs(grad)))
        norms.append(gnorm)
        log.debug("solver=L2D iter=%d grad_norm=%.3e", it, gnorm)
        if gnorm < config.tolerance:
            return MatchOutcome(lam, w, it, True, gnorm, gradient_norms=norms)
        if it == config.max_iterations:
            break
        active = w0 * (s > 0.0)
        H = -(R * active) @ R.T
        m_hat = R @ active
        step, reason = _solve_step(H, m_ext - m_hat, config.hessian_jitter)
        if reason is not None:
            return _failure(lam, w, it, gnorm, reason, norms)
        lam = -step
    return _failure(lam, w, config.max_iterations, norms[-1], "max_iterations", norms)


def l2n_multipliers(target, prior: WeightedEnsemble, basis: MomentBasis) -> np.ndarray:
    """Multipliers of the L2 projection: solve H lambda = (0, m - m(prior)).

    H is the Gram matrix of the moment functions on (-gamma, gamma); for the
    built-in bases it is evaluated in closed form.
    """
    prior_moments = restrict(prior, basis)
    rhs = np.concatenate(([0.0], np.asarray(target, dtype=float) - prior_moments))
    H = basis.l2n_gram()
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SolverFailureError(f"L2N Gram matrix condition {cond:.3e} exceeds limit")
    return np.linalg.solve(H, rhs)


def l2n_average(multipliers, prior: WeightedEnsemble, basis: MomentBasis, g) -> float:
    """Average of g under the matched signed density.

    sum_l lambda_l integral(g R_l) over (-gamma, gamma) by quadrature, plus the
    importance-sampled prior average.
    """
    lam = np.asarray(multipliers, dtype=float)
    gamma = basis.gamma
    total = 0.0
    for l in range(basis.L + 1):
        def integrand(x, l=l):
            xa = np.atleast_1d(np.asarray(x, dtype=float))
            return float(np.asarray(g(xa)) @ basis.evaluate(xa)[l])
        val, _ = quad(integrand, -gamma, gamma, limit=200)
        total += lam[l] * val
    return total + weighted_average(prior, g)


def match(target, prior: WeightedEnsemble, basis: MomentBasis,
          config: MatchConfig) -> MatchOutcome:
    """Dispatch to the configured operator.

    For L2N the outcome carries the multipliers of the signed matched density;
    averages against it go through `l2n_average`.  The ensemble weights are
    the prior's (exact when the target equals the prior's moments, by the
    projection property).
    """
    if config.operator_kind == KLD:
        return newton_solve_kld(target, prior, basis, config)
    if config.operator_kind == L2D:
        return newton_solve_l2d(target, prior, basis, config)
    lam = l2n_multipliers(target, prior, basis)
    gap = float(np.max(np.abs(np.asarray(target) - restrict(prior, basis)))) if basis.L else 0.0
    return MatchOutcome(lam, prior.weights.copy(), 0, True, 0.0,
                        gradient_norms=[gap])
