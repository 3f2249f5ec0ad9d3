"""SDE model contracts, the FENE dumbbell model, and the accept-reject
Euler-Maruyama propagator.

Positions are arrays of shape (J,) for one-dimensional models and (J, d)
otherwise. Models are immutable after construction and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import RandomStreams


class DomainViolationError(ValueError):
    """A position lies outside the model's admissible domain."""


class StagnationError(RuntimeError):
    """Accept-reject redraws exhausted; the micro step is too large for this state."""


def _sq_norm(x: np.ndarray) -> np.ndarray:
    if x.ndim == 1:
        return x * x
    return np.sum(x * x, axis=-1)


def fene_force(x, b_param: float):
    """FENE spring force b/(b - |x|^2) * x, defined on the open ball |x|^2 < b.

    Derives from the FENE potential U(r) = -(b/4) ln(1 - r^2/b).
    """
    x = np.asarray(x, dtype=float)
    sq = _sq_norm(x)
    if np.any(sq >= b_param):
        raise DomainViolationError("position outside the open FENE ball of radius sqrt(b)")
    coef = b_param / (b_param - sq)
    if x.ndim <= 1:
        return coef * x
    return coef[:, None] * x


@dataclass(frozen=True)
class SdeModel:
    """Drift/dispersion contract for d-dimensional Ito SDEs on a domain G.

    `dispersion_apply(t, x, xi)` returns b(t, x) xi for a block of standard
    normals xi, avoiding explicit d x m matrices in the hot loop.
    """

    dimension: int
    noise_dimension: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    dispersion_apply: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    admissible: Callable[[np.ndarray], np.ndarray]
    truncation_radius: Callable[[float], float]

    def noise_shape(self, n_particles: int):
        if self.noise_dimension == 1 and self.dimension == 1:
            return (n_particles,)
        return (n_particles, self.noise_dimension)


@dataclass(frozen=True)
class FeneModel:
    """FENE dumbbell in a velocity-gradient flow kappa(t).

    dX = (kappa(t) X - F(X)/(2 Wi)) dt + (1/sqrt(Wi)) dW on the ball |x| < sqrt(b).
    """

    b_param: float
    weissenberg: float
    kappa: Callable[[float], float]
    dimension: int = 1

    def __post_init__(self):
        if self.b_param <= 0:
            raise ValueError("b_param must be positive")
        if self.weissenberg <= 0:
            raise ValueError("weissenberg must be positive")

    @property
    def gamma(self) -> float:
        return float(np.sqrt(self.b_param))

    def drift(self, t, x):
        kx = self.kappa(t) * x if self.dimension == 1 else np.asarray(self.kappa(t)) @ x.T
        if self.dimension != 1:
            kx = kx.T
        return kx - fene_force(x, self.b_param) / (2.0 * self.weissenberg)

    def dispersion_apply(self, t, x, xi):
        return xi / np.sqrt(self.weissenberg)

    def admissible(self, x):
        return _sq_norm(np.asarray(x, dtype=float)) < self.b_param

    def truncation_radius(self, dt: float) -> float:
        # Accept-reject cutoff alpha * sqrt(b) with alpha = 1 - sqrt(dt).
        alpha = 1.0 - np.sqrt(dt)
        if alpha <= 0.0:
            raise ValueError("dt too large: truncation cutoff collapses")
        return alpha * self.gamma

    def as_sde(self) -> SdeModel:
        return SdeModel(
            dimension=self.dimension,
            noise_dimension=self.dimension,
            drift=self.drift,
            dispersion_apply=self.dispersion_apply,
            admissible=self.admissible,
            truncation_radius=self.truncation_radius,
        )

    def equilibrium_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Sample the zero-flow invariant density, proportional to (1 - x^2/b)^(b/2).

        Valid for d = 1; uses the Beta(b/2 + 1, b/2 + 1) representation.
        """
        if self.dimension != 1:
            raise NotImplementedError("equilibrium sampling implemented for d = 1 only")
        beta = rng.beta(self.b_param / 2.0 + 1.0, self.b_param / 2.0 + 1.0, size=n)
        return self.gamma * (2.0 * beta - 1.0)


def ornstein_uhlenbeck() -> SdeModel:
    """dX = -X dt + dW on the whole real line (no truncation)."""
    return SdeModel(
        dimension=1,
        noise_dimension=1,
        drift=lambda t, x: -x,
        dispersion_apply=lambda t, x, xi: xi,
        admissible=lambda x: np.ones(np.shape(x)[0] if np.ndim(x) else (), dtype=bool),
        truncation_radius=lambda dt: np.inf,
    )


def em_candidate_step(x, t, dt, xi, model: SdeModel):
    """One explicit Euler-Maruyama candidate: x + a(t,x) dt + b(t,x) sqrt(dt) xi.

    The candidate may be inadmissible; acceptance is the caller's concern.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return x + model.drift(t, x) * dt + model.dispersion_apply(t, x, xi) * np.sqrt(dt)


def accept_reject_step(
    x: np.ndarray,
    t: float,
    dt: float,
    streams: RandomStreams,
    step_index: int,
    model: SdeModel,
    max_redraws: int = 1000,
) -> np.ndarray:
    """Advance every particle by one micro step, redrawing rejected increments.

    A candidate is accepted when its norm stays within model.truncation_radius(dt).
    Redraw round r of particle j consumes the variates keyed (step_index, r, j),
    so results do not depend on which other particles were rejected.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    cutoff = model.truncation_radius(dt)
    xi = streams.normals(step_index, 0, model.noise_shape(n))
    out = em_candidate_step(x, t, dt, xi, model)
    if not np.isfinite(cutoff):
        return out
    pending = _sq_norm(out) > cutoff * cutoff
    round_ = 0
    while np.any(pending):
        round_ += 1
        if round_ > max_redraws:
            raise StagnationError(
                f"{int(np.count_nonzero(pending))} particles still rejected after "
                f"{max_redraws} redraws at dt={dt}"
            )
        xi = streams.normals(step_index, round_, model.noise_shape(n))
        idx = np.nonzero(pending)[0]
        cand = em_candidate_step(x[idx], t, dt, xi[idx], model)
        ok = _sq_norm(cand) <= cutoff * cutoff
        out[idx[ok]] = cand[ok]
        pending[idx[ok]] = False
    return out
