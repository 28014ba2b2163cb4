"""Smooth plus-function surrogate, smoothed CVaR, and exact sample-based CVaR.

The plus function (x)_+ is replaced by g_eps(x) = eps * log(1 + exp(x/eps)),
which is C-infinity, sandwiches (x)_+ from above within eps*log(2), and has
the logistic function as derivative.  All evaluations are overflow-safe for
any x/eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cross import CrossConfig, cross_over_tt
from .quadrature import TensorGrid, expectation
from .ttcore import TtVector


@dataclass(frozen=True)
class SmoothingParams:
    epsilon: float
    beta: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0, 1)")

    @property
    def tail_weight(self) -> float:
        return 1.0 / (1.0 - self.beta)


def g_eps(x, eps: float):
    """eps * log(1 + exp(x/eps)), stable for arbitrarily large |x|/eps."""
    x = np.asarray(x, dtype=np.float64)
    z = x / eps
    # for z >= 0: x + eps*log1p(exp(-z)); for z < 0: eps*log1p(exp(z))
    out = np.where(z >= 0, x + eps * np.log1p(np.exp(-np.abs(z))),
                   eps * np.log1p(np.exp(-np.abs(z))))
    return out if out.ndim else float(out)


def g_eps_prime(x, eps: float):
    """Logistic sigmoid of x/eps, in (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    z = x / eps
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def g_eps_second(x, eps: float):
    """(1/eps) * (exp(x/2eps) + exp(-x/2eps))^-2; positive, even, peak 1/(4 eps)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.abs(x) / eps
    e = np.exp(-z)
    out = e / (eps * (1.0 + e) ** 2)
    return out if out.ndim else float(out)


def smoothed_cvar(
    values: TtVector,
    t: float,
    params: SmoothingParams,
    grid: TensorGrid,
    cross_cfg: CrossConfig | None = None,
) -> float:
    """t + E[g_eps(values - t)] / (1 - beta) with the composition re-crossed.

    ``values`` is a TT surrogate of the random cost on the grid; the smoothed
    integrand is itself cross-interpolated from surrogate evaluations, so no
    fresh model solves happen here.
    """
    cfg = cross_cfg or CrossConfig(rel_tolerance=1e-8, max_sweeps=16, initial_rank=4)
    res = cross_over_tt(values, lambda v: g_eps(v - t, params.epsilon), cfg)
    return t + params.tail_weight * expectation(res.tt, grid)


def exact_cvar_sorted(samples, beta: float) -> tuple[float, float]:
    """Empirical (VaR, CVaR) of a sample set by sorting; the brute-force oracle.

    VaR is the smallest sample s with P[X <= s] >= beta; CVaR evaluates the
    Rockafellar-Uryasev objective t + mean((X - t)_+)/(1-beta) at t = VaR.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must lie in (0, 1)")
    need = int(np.ceil(1.0 / (1.0 - beta)))
    if x.size < need:
        raise ValueError(f"need at least {need} samples for beta={beta}, got {x.size}")
    var = x[int(np.ceil(beta * x.size)) - 1]
    cvar = var + np.mean(np.maximum(x - var, 0.0)) / (1.0 - beta)
    return float(var), float(cvar)


def exact_cvar_discrete(values, weights, beta: float) -> tuple[float, float]:
    """(VaR, CVaR) of a finite law with given probabilities (quadrature oracle)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    order = np.argsort(values)
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    # fp slack so that a cumulative weight landing exactly on beta counts
    var = v[min(int(np.searchsorted(cum, beta - 1e-12, side="left")), v.size - 1)]
    cvar = var + np.sum(w * np.maximum(v - var, 0.0)) / (1.0 - beta)
    return float(var), float(cvar)
