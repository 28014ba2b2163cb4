"""Univariate quadrature rules, Cartesian grids, and TT expectations.

Weights are probability-normalized (they sum to one), so an expectation over
the grid is a plain weighted sum and E[1] = 1 regardless of the interval.
Nodes and weights come from the symmetric tridiagonal (Golub-Welsch) eigenvalue
problem of the orthogonal-polynomial recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .ttcore import TtShapeError, TtVector


@dataclass(frozen=True)
class UnivariateRule:
    nodes: np.ndarray
    weights: np.ndarray
    density_kind: str  # "uniform" or "gaussian"
    params: tuple  # (a, b) or (mean, variance)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly ascending")

    @property
    def n(self) -> int:
        return self.nodes.size


@dataclass(frozen=True)
class TensorGrid:
    rules: tuple

    def __post_init__(self):
        rules = tuple(self.rules)
        if not rules:
            raise ValueError("a tensor grid needs at least one rule")
        object.__setattr__(self, "rules", rules)

    @property
    def ndim(self) -> int:
        return len(self.rules)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(r.n for r in self.rules)

    def nodes(self, k: int) -> np.ndarray:
        return self.rules[k].nodes

    def weights(self, k: int) -> np.ndarray:
        return self.rules[k].weights

    def points_from_indices(self, indices) -> np.ndarray:
        """Map integer index tuples (B, d) to coordinate tuples (B, d)."""
        indices = np.asarray(indices, dtype=np.int64)
        cols = [self.rules[k].nodes[indices[:, k]] for k in range(self.ndim)]
        return np.stack(cols, axis=1)

    def dense_weights(self) -> np.ndarray:
        """Full tensor of weights (test scale only)."""
        w = self.rules[0].weights
        for rule in self.rules[1:]:
            w = np.multiply.outer(w, rule.weights)
        return w


def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0) -> UnivariateRule:
    """Gauss-Legendre rule for the uniform density on (a, b).

    Exact for polynomials of degree <= 2n-1; weights sum to one.
    """
    if n < 1:
        raise ValueError("need at least one node")
    if not (a < b):
        raise ValueError(f"invalid interval ({a}, {b})")
    if n == 1:
        nodes = np.array([0.0])
        weights = np.array([1.0])
    else:
        k = np.arange(1, n, dtype=np.float64)
        off = k / np.sqrt(4.0 * k**2 - 1.0)
        nodes, vecs = eigh_tridiagonal(np.zeros(n), off)
        weights = vecs[0] ** 2  # normalized so integral of the density is 1
        weights /= weights.sum()
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return UnivariateRule(mid + half * nodes, weights, "uniform", (float(a), float(b)))


def gauss_hermite(n: int, mean: float = 0.0, variance: float = 1.0) -> UnivariateRule:
    """Gauss-Hermite rule for the N(mean, variance) density, weights summing to one."""
    if n < 1:
        raise ValueError("need at least one node")
    if variance <= 0:
        raise ValueError("variance must be positive")
    if n == 1:
        nodes = np.array([0.0])
        weights = np.array([1.0])
    else:
        off = np.sqrt(np.arange(1, n, dtype=np.float64))
        nodes, vecs = eigh_tridiagonal(np.zeros(n), off)
        weights = vecs[0] ** 2
        weights /= weights.sum()
    return UnivariateRule(
        mean + np.sqrt(variance) * nodes, weights, "gaussian", (float(mean), float(variance))
    )


def uniform_grid(d: int, n: int, a: float = -np.sqrt(3.0), b: float = np.sqrt(3.0)) -> TensorGrid:
    """d-fold Gauss-Legendre grid; the default interval has unit variance."""
    rule = gauss_legendre(n, a, b)
    return TensorGrid((rule,) * d)


def _check_grid(f: TtVector, grid: TensorGrid):
    if f.mode_sizes != grid.shape:
        raise TtShapeError(f"TT modes {f.mode_sizes} do not match grid {grid.shape}")


def expectation(f: TtVector, grid: TensorGrid, mode_weights: dict | None = None) -> float:
    """E[f] = sum_i F(i) w_{i_1} ... w_{i_d}, contracted one core at a time.

    ``mode_weights`` optionally overrides the weight vector of selected modes,
    which turns the result into mixed moments such as E[f * xi^(k)].
    """
    _check_grid(f, grid)
    r = np.ones(1)
    for k, core in enumerate(f.cores):
        w = grid.weights(k) if mode_weights is None or k not in mode_weights else mode_weights[k]
        r = r @ np.einsum("anb,n->ab", core, w)
    return float(r[0])


def weighted_expectation(f: TtVector, g: TtVector, grid: TensorGrid) -> float:
    """E[f * g] without materializing the Hadamard product."""
    _check_grid(f, grid)
    _check_grid(g, grid)
    r = np.ones((1, 1))
    for k, (fc, gc) in enumerate(zip(f.cores, g.cores)):
        r = np.einsum("ac,anb,cnd,n->bd", r, fc, gc, grid.weights(k))
    return float(r[0, 0])


def partial_weighted_expectation(f: TtVector, g: TtVector, grid: TensorGrid) -> np.ndarray:
    """E_xi[f * g] where g carries one trailing non-random mode.

    ``f`` lives on the d-dim grid; ``g`` has d+1 modes whose last mode indexes
    vector components (e.g. control degrees of freedom).  Returns the vector of
    componentwise expectations over the first d modes.
    """
    if g.ndim != f.ndim + 1:
        raise TtShapeError("g must have exactly one extra trailing mode")
    if g.mode_sizes[:-1] != f.mode_sizes:
        raise TtShapeError("leading modes of g must match f")
    _check_grid(f, grid)
    r = np.ones((1, 1))
    for k in range(f.ndim):
        r = np.einsum("ac,anb,cnd,n->bd", r, f.cores[k], g.cores[k], grid.weights(k))
    # r: (1, r_last); contract with the component mode of g's final core
    return np.einsum("ac,cmb->m", r, g.cores[-1])
