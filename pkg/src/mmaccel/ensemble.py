"""Weighted particle ensembles and their macroscopic reductions.

An ensemble is J particle positions with normalized non-negative weights;
the macroscopic state is the vector of weighted moments under a chosen
moment basis (R_0 identically one encodes mass and is never stored in the
moment vector).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import DomainViolationError, FeneModel, fene_force

_WEIGHT_TOL = 1e-12


@dataclass
class WeightedEnsemble:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.positions.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")
        if self.weights.shape != (self.positions.shape[0],):
            raise ValueError("weights must be a vector matching the particle count")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must sum to 1 within 1e-12")

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def uniform(cls, positions) -> "WeightedEnsemble":
        positions = np.asarray(positions, dtype=float)
        n = positions.shape[0]
        return cls(positions, np.full(n, 1.0 / n))

    def with_weights(self, weights) -> "WeightedEnsemble":
        return WeightedEnsemble(self.positions, weights)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.positions.ndim == 1:
            writer.writerow(["x", "weight"])
            for x, w in zip(self.positions, self.weights):
                writer.writerow([repr(float(x)), repr(float(w))])
        else:
            d = self.positions.shape[1]
            writer.writerow([f"x{i}" for i in range(d)] + ["weight"])
            for row, w in zip(self.positions, self.weights):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "WeightedEnsemble":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        data = np.array([[float(v) for v in row] for row in body])
        if len(header) == 2:
            return cls(data[:, 0], data[:, 1])
        return cls(data[:, :-1], data[:, -1])


class MomentBasis:
    """Ordered moment functions R_0 = 1, R_1, ..., R_L on (-gamma, gamma).

    `evaluate` returns the (L+1, J) design matrix including the constant row.
    `l2n_gram` is the (L+1)x(L+1) matrix of pairwise integrals over the
    interval, closed-form for the built-in families and by quadrature for
    custom functions.
    """

    def __init__(self, L: int, gamma: float, kind: str = "fene-even",
                 functions: Sequence[Callable[[np.ndarray], np.ndarray]] | None = None):
        if L < 0:
            raise ValueError("L must be non-negative")
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.L = int(L)
        self.gamma = float(gamma)
        self.kind = kind
        self._functions = functions
        if kind == "custom" and functions is None:
            raise ValueError("custom basis requires explicit functions")

    @classmethod
    def fene_even(cls, L: int, gamma: float) -> "MomentBasis":
        """R_l(x) = (x/gamma)^(2l), the normalized even raw moments."""
        return cls(L, gamma, kind="fene-even")

    @classmethod
    def scaled_monomials(cls, L: int, gamma: float) -> "MomentBasis":
        """R_l(x) = (x/gamma)^l, the full algebraic hierarchy."""
        return cls(L, gamma, kind="monomial")

    @classmethod
    def from_functions(cls, functions, gamma: float) -> "MomentBasis":
        """Custom R_1..R_L (R_0 = 1 implied); each maps positions to values."""
        return cls(len(functions), gamma, kind="custom", functions=list(functions))

    def evaluate(self, positions: np.ndarray) -> np.ndarray:
        x = np.asarray(positions, dtype=float)
        if x.ndim != 1:
            raise ValueError("moment bases are one-dimensional")
        out = np.empty((self.L + 1, x.shape[0]))
        out[0] = 1.0
        if self.kind == "fene-even":
            y = (x / self.gamma) ** 2
            acc = np.ones_like(y)
            for l in range(1, self.L + 1):
                acc = acc * y
                out[l] = acc
        elif self.kind == "monomial":
            y = x / self.gamma
            acc = np.ones_like(y)
            for l in range(1, self.L + 1):
                acc = acc * y
                out[l] = acc
        else:
            for l, fn in enumerate(self._functions, start=1):
                out[l] = fn(x)
        return out

    def l2n_gram(self) -> np.ndarray:
        g = self.gamma
        n = self.L + 1
        H = np.empty((n, n))
        if self.kind == "fene-even":
            for k in range(n):
                for l in range(n):
                    H[k, l] = 2.0 * g / (2 * k + 2 * l + 1)
        elif self.kind == "monomial":
            for k in range(n):
                for l in range(n):
                    H[k, l] = g * (1.0 + (-1.0) ** (k + l)) / (k + l + 1)
        else:
            from scipy.integrate import quad

            fns = [lambda x: np.ones_like(np.asarray(x, dtype=float))] + list(self._functions)
            for k in range(n):
                for l in range(k, n):
                    val, _ = quad(lambda x: fns[k](x) * fns[l](x), -g, g, limit=200)
                    H[k, l] = H[l, k] = val
        return H


def restrict(ensemble: WeightedEnsemble, basis: MomentBasis) -> np.ndarray:
    """Weighted moment vector (m_1, ..., m_L); the mass moment is omitted."""
    if basis.L == 0:
        return np.empty(0)
    R = basis.evaluate(ensemble.positions)
    return R[1:] @ ensemble.weights


def weighted_average(ensemble: WeightedEnsemble, g) -> float:
    values = np.asarray(g(ensemble.positions), dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("observable is not finite on all particles")
    return float(values @ ensemble.weights)


def stress(ensemble: WeightedEnsemble, model: FeneModel) -> float:
    """Polymer stress (E[x F(x)] - 1) / Wi for the one-dimensional FENE model."""
    x = ensemble.positions
    if np.any(x * x >= model.b_param):
        raise DomainViolationError("particle on or outside the FENE ball")
    xf = x * fene_force(x, model.b_param)
    return (float(xf @ ensemble.weights) - 1.0) / model.weissenberg


def degeneracy(weights: np.ndarray, kind: str = "KLD") -> float:
    """Divergence of the weights from uniform; 0 iff uniform.

    KLD: sum w ln(J w) in [0, ln J], zero weights contribute nothing.
    L2D: (1/J) sum (J w - 1)^2 in [0, (J-1)^2/J].
    """
    w = np.asarray(weights, dtype=float)
    J = w.shape[0]
    if kind == "KLD":
        pos = w > 0
        return float(np.sum(w[pos] * np.log(J * w[pos])))
    if kind == "L2D":
        return float(np.sum((J * w - 1.0) ** 2) / J)
    raise ValueError(f"unknown degeneracy kind {kind!r}")


def stratified_resample(ensemble: WeightedEnsemble, uniforms) -> WeightedEnsemble:
    """Resample to uniform weights with stratified branching numbers.

    u_k = ((k-1) + u~_k)/J with u~_k ~ U[0,1); particle j is copied once for
    every u_k landing in its half-open cumulative-weight bin [c_{j-1}, c_j).
    The branching numbers sum to J exactly and satisfy E[n_j] = J w_j.
    `uniforms` is either a block of J draws or a generator to take them from.
    """
    J = ensemble.size
    if isinstance(uniforms, np.random.Generator):
        uniforms = uniforms.random(J)
    u = np.asarray(uniforms, dtype=float)
    if u.shape != (J,):
        raise ValueError("need exactly J uniforms")
    points = (np.arange(J) + u) / J
    cum = np.cumsum(ensemble.weights)
    cum[-1] = 1.0  # guard roundoff at the top bin
    idx = np.searchsorted(cum, points, side="right")
    idx = np.minimum(idx, J - 1)
    return WeightedEnsemble.uniform(ensemble.positions[idx])


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def scott_bandwidth(ensemble: WeightedEnsemble) -> float:
    """Scott's rule using the weighted standard deviation and effective sample size."""
    x, w = ensemble.positions, ensemble.weights
    mean = float(x @ w)
    var = float(((x - mean) ** 2) @ w)
    ess = effective_sample_size(w)
    return float(np.sqrt(var) * ess ** (-0.2))


def kde_density(ensemble: WeightedEnsemble, bandwidth: float | None, grid: np.ndarray) -> np.ndarray:
    """Weighted Gaussian kernel density estimate evaluated on `grid`."""
    h = scott_bandwidth(ensemble) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    grid = np.asarray(grid, dtype=float)
    z = (grid[:, None] - ensemble.positions[None, :]) / h
    kernel = np.exp(-0.5 * z * z) / (h * np.sqrt(2.0 * np.pi))
    return kernel @ ensemble.weights
