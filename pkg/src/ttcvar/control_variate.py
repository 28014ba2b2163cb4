"""Monte Carlo control-variate correction for the smoothed-TT CVaR estimate.

The smoothed surrogate g_eps(j~(xi) - t) is biased by both the smoothing and
the TT approximation.  Subtracting it from the exact tail loss (j(xi)-t)_+
inside a Monte Carlo average removes the bias while the surrogate soaks up
almost all of the variance:

    R = t + E_N[g~]/(1-b) + mean_l [ (j(xi_l)-t)_+ - g~(j~(xi_l)-t) ] / (1-b).

Samples are split into batches; the spread of the batch means estimates the
statistical error of the correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quadrature import TensorGrid, expectation
from .smoothing import g_eps, g_eps_prime
from .ttcore import TtVector


@dataclass(frozen=True)
class McCorrectionConfig:
    m_samples: int = 1024
    batches: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.batches < 2 or self.m_samples < self.batches:
            raise ValueError("need m_samples >= batches >= 2")
        if self.m_samples % self.batches:
            raise ValueError("m_samples must be divisible by batches")


@dataclass
class CorrectionStats:
    value: float
    std_estimate: float  # full-M CLT estimate: std(batch means)/sqrt(batches)
    std_batches: float  # raw spread of the batch means
    batch_means: np.ndarray = field(default=None)


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


def lagrange_basis_at(nodes: np.ndarray, bary: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of all Lagrange basis polynomials at points x, shape (B, n)."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-14)
    diff = np.where(exact, 1.0, diff)
    terms = bary[None, :] / diff
    out = terms / np.sum(terms, axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if np.any(hit):
        out[hit] = 0.0
        rows, cols = np.nonzero(exact)
        out[rows, cols] = 1.0
    return out


def tt_eval_points(f: TtVector, grid: TensorGrid, points: np.ndarray) -> np.ndarray:
    """Evaluate the TT interpolant at off-grid points by barycentric Lagrange."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    b = points.shape[0]
    vals = np.ones((b, 1, 1))
    for k, core in enumerate(f.cores):
        nodes = grid.nodes(k)
        bary = barycentric_weights(nodes)
        basis = lagrange_basis_at(nodes, bary, points[:, k])  # (B, n)
        slab = np.einsum("bn,rns->brs", basis, core)
        vals = np.matmul(vals, slab)
    return vals[:, 0, 0]


def sample_from_grid_density(grid: TensorGrid, rng, size: int) -> np.ndarray:
    """iid draws from the product density behind the grid (inverse CDF per mode)."""
    out = np.empty((size, grid.ndim))
    for k, rule in enumerate(grid.rules):
        u = rng.random(size)
        if rule.density_kind == "uniform":
            a, b = rule.params
            out[:, k] = a + (b - a) * u
        elif rule.density_kind == "gaussian":
            from scipy.special import ndtri

            mean, var = rule.params
            out[:, k] = mean + np.sqrt(var) * ndtri(u)
        else:
            raise ValueError(f"unknown density {rule.density_kind!r}")
    return out


def _batch_stats(per_sample: np.ndarray, batches: int) -> CorrectionStats:
    chunks = per_sample.reshape(batches, -1)
    means = chunks.mean(axis=1)
    std_b = float(np.std(means, ddof=1))
    return CorrectionStats(
        value=float(per_sample.mean()),
        std_estimate=std_b / np.sqrt(batches),
        std_batches=std_b,
        batch_means=means,
    )


def corrected_cvar(
    surrogate_j: TtVector,
    exact_j,
    t: float,
    params,
    grid: TensorGrid,
    cfg: McCorrectionConfig,
    smooth_tail_tt: TtVector | None = None,
    sampler=None,
) -> tuple[float, CorrectionStats]:
    """Unbiased CVaR estimate: smoothed TT term plus the MC correction.

    ``exact_j`` maps sample points (B, d) to exact costs; ``sampler`` overrides
    the default inverse-CDF draws from the grid density (tests use the discrete
    quadrature law itself).  ``smooth_tail_tt`` may pass a precomputed TT of
    g_eps(j~ - t); otherwise the smoothed term is integrated from pointwise
    surrogate evaluations through the same quadrature.
    """
    rng = np.random.default_rng(cfg.seed)
    tw = 1.0 / (1.0 - params.beta)

    if smooth_tail_tt is not None:
        smooth_term = expectation(smooth_tail_tt, grid)
    else:
        from .cross import CrossConfig, cross_over_tt

        res = cross_over_tt(
            surrogate_j,
            lambda v: g_eps(v - t, params.epsilon),
            CrossConfig(rel_tolerance=1e-9, seed=cfg.seed),
        )
        smooth_term = expectation(res.tt, grid)

    draw = sampler or (lambda r, n: sample_from_grid_density(grid, r, n))
    pts = np.asarray(draw(rng, cfg.m_samples), dtype=np.float64)
    exact_vals = np.asarray(exact_j(pts), dtype=np.float64).reshape(-1)
    surr_vals = tt_eval_points(surrogate_j, grid, pts)
    per_sample = np.maximum(exact_vals - t, 0.0) - g_eps(surr_vals - t, params.epsilon)
    stats = _batch_stats(per_sample, cfg.batches)
    value = t + tw * (smooth_term + stats.value)
    return float(value), stats


def corrected_gradient(
    surrogate_pack,
    exact_j,
    exact_grad,
    state,
    params,
    grid: TensorGrid,
    cfg: McCorrectionConfig,
    base_grad_u: np.ndarray,
    base_grad_t: float,
    sampler=None,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Add the indicator-vs-sigmoid Monte Carlo correction to both gradients.

    The u correction averages theta(j - t) grad_j - g'(j~ - t) grad_j~ over the
    samples; the t correction mirrors it with scalars.  The Hessian is left
    uncorrected (Gauss-Newton treatment).  Returns (grad_u, grad_t, points).
    """
    rng = np.random.default_rng(cfg.seed)
    tw = 1.0 / (1.0 - params.beta)
    draw = sampler or (lambda r, n: sample_from_grid_density(grid, r, n))
    pts = np.asarray(draw(rng, cfg.m_samples), dtype=np.float64)

    exact_vals = np.asarray(exact_j(pts), dtype=np.float64).reshape(-1)
    exact_grads = np.asarray(exact_grad(pts), dtype=np.float64)
    indicator = (exact_vals - state.t >= 0.0).astype(np.float64)

    surr_vals = tt_eval_points(surrogate_pack.tt_j, grid, pts)
    gp_surr = g_eps_prime(surr_vals - state.t, params.epsilon)
    # surrogate control gradient: evaluate the (d+1)-mode TT at the sample xi
    # for every control component at once
    gradj_tt = surrogate_pack.tt_gradj
    b = pts.shape[0]
    vals = np.ones((b, 1, 1))
    for k in range(grid.ndim):
        nodes = grid.nodes(k)
        bary = barycentric_weights(nodes)
        basis = lagrange_basis_at(nodes, bary, pts[:, k])
        slab = np.einsum("bn,rns->brs", basis, gradj_tt.cores[k])
        vals = np.matmul(vals, slab)
    surr_grads = np.einsum("bxr,rc->bc", vals, gradj_tt.cores[-1][:, :, 0])

    corr_u = indicator[:, None] * exact_grads - gp_surr[:, None] * surr_grads
    corr_t = indicator - gp_surr
    grad_u = base_grad_u + tw * corr_u.mean(axis=0)
    grad_t = base_grad_t - tw * corr_t.mean()
    return grad_u, float(grad_t), pts


def make_gradient_corrector(model, grid: TensorGrid, config):
    """Bind a per-iteration corrector usable inside the reduced Newton loop.

    The sample seed advances with the iterate's t so each outer iteration uses
    a fresh deterministic draw while the line search within an iteration stays
    consistent.
    """
    cfg: McCorrectionConfig = config.mc_correction
    params_beta = config.beta

    def correct(pack, state, grad_u, grad_t):
        from .smoothing import SmoothingParams

        params = SmoothingParams(epsilon=state.eps, beta=params_beta)
        seed = cfg.seed + state.iteration
        local = McCorrectionConfig(cfg.m_samples, cfg.batches, seed)
        gu, gt, _ = corrected_gradient(
            pack,
            lambda p: model.j(state.u, p),
            lambda p: model.grad_u_j(state.u, p),
            state,
            params,
            grid,
            local,
            grad_u,
            grad_t,
        )
        return gu, gt

    return correct
