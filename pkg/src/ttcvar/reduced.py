"""Reduced-space Newton optimizer for smoothed CVaR over TT surrogates.

Per iteration the driver cross-interpolates the cost j(u_m; xi) and its
control gradient on the collocation grid, composes the smoothed tail weights
g' and g'' from the cached cost surrogate (no extra model solves), assembles
the (u, t) gradient and curvature blocks by TT quadrature, and takes a damped
Newton step.  The smoothing width shrinks geometrically after every accepted
step, and a two-condition line search keeps the iterate inside the region
where the smoothed quantile curvature is bounded away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cross import CrossConfig, cross_interpolate_indexed, cross_over_tt
from .quadrature import (
    TensorGrid,
    expectation,
    partial_weighted_expectation,
    weighted_expectation,
)
from .smoothing import g_eps, g_eps_prime, g_eps_second
from .ttcore import TtVector


class ReducedModel:
    """Control problem with the state eliminated: j(u; xi) and its derivatives.

    Batched evaluations receive xi as an array of points (B, d) and must be
    deterministic in (u, xi).  The default penalty is 1/2 ||u||^2 and the
    default admissible set is unconstrained.
    """

    control_dim: int = 0

    def j(self, u, points):
        raise NotImplementedError

    def grad_u_j(self, u, points):
        raise NotImplementedError

    def hess_action(self, u, xi_bar, v):
        raise NotImplementedError

    def penalty(self, u):
        return 0.5 * float(np.dot(u, u))

    def penalty_grad(self, u):
        return np.asarray(u, dtype=np.float64)

    def penalty_hess_action(self, v):
        return np.asarray(v, dtype=np.float64)

    def project(self, u):
        return np.asarray(u, dtype=np.float64)


class DegenerateTailError(RuntimeError):
    """E[g'] vanished; increase epsilon or re-center t before retrying."""


@dataclass
class OptimizerConfig:
    alpha: float = 0.0
    beta: float = 0.5
    theta: float = 0.05  # curvature guard fraction, robust in [1e-2, 1e-1]
    mu_eps: float = 0.5
    max_iters: int = 30
    tolerance: float = 1e-4
    cross: CrossConfig = field(default_factory=lambda: CrossConfig(rel_tolerance=1e-6))
    hessian_mode: str = "fixed_point"  # "full" assembles the dense (u,t) system
    mc_correction: object | None = None  # McCorrectionConfig, applied to gradients
    cg_tol: float = 1e-8
    cg_maxiter: int = 500
    min_step: float = 2.0**-20
    eps_floor: float = 0.0  # stop shrinking eps here (benchmark sweeps fix the width)

    def __post_init__(self):
        if not (0.0 < self.theta < 0.25):
            raise ValueError("theta must lie in (0, 1/4)")
        if not (0.0 < self.mu_eps < 1.0):
            raise ValueError("mu_eps must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.hessian_mode not in ("full", "fixed_point"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")


@dataclass
class OptimizerState:
    u: np.ndarray
    t: float
    eps: float
    iteration: int = 0
    log: list = field(default_factory=list)


@dataclass
class SurrogatePack:
    """TT surrogates current for one iterate (u, t, eps)."""

    tt_j: TtVector
    tt_gradj: TtVector  # d+1 modes, trailing mode indexes control components
    tt_gp: TtVector
    tt_gpp: TtVector
    rank_j: int
    rank_gradj: int
    rank_g2: int


@dataclass
class OptimizeResult:
    u: np.ndarray
    t: float
    cvar: float
    converged: bool
    stalled: bool
    iterations: int
    log: list
    state: OptimizerState


def _sub_cross_config(cfg: CrossConfig, seed_shift: int) -> CrossConfig:
    return replace(cfg, seed=cfg.seed + seed_shift)


def build_surrogates(
    model: ReducedModel,
    u: np.ndarray,
    t: float,
    eps: float,
    grid: TensorGrid,
    cross_cfg: CrossConfig,
    with_gradient: bool = True,
) -> SurrogatePack:
    """Cross the model cost and gradient at u, then the smoothed weights g', g''.

    The control gradient is stored as one TT with the control index appended
    as an extra trailing mode; g' and g'' are crossed over the cached cost
    surrogate and therefore cost no model solves.
    """

    def j_oracle(indices):
        return model.j(u, grid.points_from_indices(indices))

    res_j = cross_interpolate_indexed(j_oracle, grid.shape, cross_cfg)
    tt_j = res_j.tt

    tt_gradj = None
    rank_gradj = 0
    if with_gradient:
        nu = model.control_dim

        def grad_oracle(indices):
            xi_idx, comp = indices[:, :-1], indices[:, -1]
            uniq, inverse = np.unique(xi_idx, axis=0, return_inverse=True)
            grads = model.grad_u_j(u, grid.points_from_indices(uniq))
            return grads[inverse, comp]

        res_g = cross_interpolate_indexed(
            grad_oracle, grid.shape + (nu,), _sub_cross_config(cross_cfg, 1)
        )
        tt_gradj = res_g.tt
        rank_gradj = max(tt_gradj.ranks)

    gp = cross_over_tt(
        tt_j, lambda v: g_eps_prime(v - t, eps), _sub_cross_config(cross_cfg, 2)
    ).tt
    gpp = cross_over_tt(
        tt_j, lambda v: g_eps_second(v - t, eps), _sub_cross_config(cross_cfg, 3)
    ).tt
    return SurrogatePack(
        tt_j, tt_gradj, gp, gpp, max(tt_j.ranks), rank_gradj, max(gpp.ranks)
    )


def assemble_gradient(pack: SurrogatePack, state, model, config, grid):
    """(grad_u, grad_t) of the sampled smoothed objective at the current iterate."""
    tw = 1.0 / (1.0 - config.beta)
    grad_u = tw * partial_weighted_expectation(pack.tt_gp, pack.tt_gradj, grid)
    grad_u += config.alpha * model.penalty_grad(state.u)
    grad_t = 1.0 - tw * expectation(pack.tt_gp, grid)
    return grad_u, float(grad_t)


def assemble_t_blocks(pack: SurrogatePack, config, grid):
    """Curvature blocks touching t: H_ut (vector) and H_tt (scalar)."""
    tw = 1.0 / (1.0 - config.beta)
    h_ut = -tw * partial_weighted_expectation(pack.tt_gpp, pack.tt_gradj, grid)
    h_tt = tw * expectation(pack.tt_gpp, grid)
    return h_ut, float(h_tt)


def compute_xi_bar(pack: SurrogatePack, grid: TensorGrid) -> np.ndarray:
    """Tail-weighted mean of xi: E[g' xi] / E[g'], componentwise."""
    denom = expectation(pack.tt_gp, grid)
    if not np.isfinite(denom) or denom < 1e-300:
        raise DegenerateTailError(
            "E[g'] vanished; increase epsilon or reset t to E[j] before retrying"
        )
    out = np.empty(grid.ndim)
    for k in range(grid.ndim):
        num = expectation(
            pack.tt_gp, grid, mode_weights={k: grid.weights(k) * grid.nodes(k)}
        )
        out[k] = num / denom
    return out


def _outer_weighted_expectation(gpp: TtVector, gradj: TtVector, grid: TensorGrid):
    """E[g'' grad_j grad_j^T] as a dense (nu, nu) matrix (small controls only)."""
    r = np.ones((1, 1, 1))
    for k in range(grid.ndim):
        r = np.einsum(
            "gab,gnh,anc,bnd,n->hcd",
            r,
            gpp.cores[k],
            gradj.cores[k],
            gradj.cores[k],
            grid.weights(k),
        )
    last = gradj.cores[-1][:, :, 0]  # (r_d, nu)
    return np.einsum("gab,am,bn->mn", r, last, last)


def newton_step(pack, state, gradient, blocks, model, config, grid):
    """Solve for the Newton direction (delta_u, delta_t).

    "full" mode assembles the dense (nu+1) system with the exact rank-structured
    expectation E[g'' grad_j grad_j^T]; "fixed_point" mode runs matrix-free
    conjugate directions on the fixed-point Hessian (rank-1 tail term at xi_bar,
    scalar-weighted model Hessian action, penalty curvature, and the t blocks).
    Falls back to steepest descent when the inner solve hits nonpositive
    curvature, reporting the fallback in the returned diagnostics dict.
    """
    grad_u, grad_t = gradient
    h_ut, h_tt = blocks
    tw = 1.0 / (1.0 - config.beta)
    nu = grad_u.size
    e_gp = expectation(pack.tt_gp, grid)
    e_gpp = expectation(pack.tt_gpp, grid)
    xi_bar = compute_xi_bar(pack, grid)
    diag = {"fallback": False, "xi_bar": xi_bar}

    if config.hessian_mode == "full":
        a_uu = tw * _outer_weighted_expectation(pack.tt_gpp, pack.tt_gradj, grid)
        h_model = np.column_stack(
            [model.hess_action(state.u, xi_bar, e) for e in np.eye(nu)]
        )
        a_uu += tw * e_gp * h_model
        if config.alpha:
            a_uu += config.alpha * np.column_stack(
                [model.penalty_hess_action(e) for e in np.eye(nu)]
            )
        h = np.zeros((nu + 1, nu + 1))
        h[:nu, :nu] = a_uu
        h[:nu, nu] = h_ut
        h[nu, :nu] = h_ut
        h[nu, nu] = h_tt
        rhs = -np.concatenate([grad_u, [grad_t]])
        try:
            delta = np.linalg.solve(h, rhs)
        except np.linalg.LinAlgError:
            diag["fallback"] = True
            delta = rhs
        return delta[:nu], float(delta[nu]), diag

    gbar = model.grad_u_j(state.u, xi_bar[None, :])[0]
    c_rank1 = tw * e_gpp
    c_hess = tw * e_gp

    if h_tt <= 0.0 or not np.isfinite(h_tt):
        # degenerate quantile curvature: move u only (the guard will recover t)
        diag["degenerate_tt"] = True
        h_tt_safe = None
    else:
        h_tt_safe = h_tt

    def apply_schur(vu):
        # t eliminated analytically: S = A_uu - h_ut h_ut^T / h_tt, which keeps
        # the near-cancellation of the two rank-1 tail terms exact
        out = c_rank1 * np.dot(gbar, vu) * gbar
        out += c_hess * model.hess_action(state.u, xi_bar, vu)
        if config.alpha:
            out += config.alpha * model.penalty_hess_action(vu)
        if h_tt_safe is not None:
            out -= h_ut * (np.dot(h_ut, vu) / h_tt_safe)
        return out

    if h_tt_safe is not None:
        rhs_u = -grad_u + h_ut * (grad_t / h_tt_safe)
    else:
        rhs_u = -grad_u
    du, ok = _conjugate_directions(apply_schur, rhs_u, config.cg_tol, config.cg_maxiter)
    if not ok:
        diag["fallback"] = True
        scale = max(abs(c_hess), 1e-300)
        du = rhs_u / scale
    if h_tt_safe is not None:
        dt = (-grad_t - np.dot(h_ut, du)) / h_tt_safe
    else:
        dt = 0.0
    return du, float(dt), diag


def _conjugate_directions(apply_h, rhs, tol, maxiter):
    """Truncated CG: stops at nonpositive curvature, keeping the progress so far."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.dot(r, r)
    bnorm = np.sqrt(rs)
    if bnorm == 0.0:
        return x, True
    made_progress = False
    for _ in range(maxiter):
        hp = apply_h(p)
        curv = np.dot(p, hp)
        if not np.isfinite(curv) or curv <= 1e-300 * np.dot(p, p):
            # truncated-Newton convention: the partial iterate is still a
            # descent direction once at least one step was taken
            return x, made_progress
        step = rs / curv
        x += step * p
        r -= step * hp
        made_progress = True
        rs_new = np.dot(r, r)
        if np.sqrt(rs_new) <= tol * bnorm:
            return x, True
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, made_progress


def _gradient_norm(grad_u, grad_t, u_scale=1.0):
    """Norm of the stacked gradient with the control block scaled to O(1) units.

    grad_t is dimensionless by construction while the control gradient carries
    mesh and objective units; dividing by the run's initial control-gradient
    magnitude makes the monotonicity test meaningful for both components.
    """
    return float(np.sqrt(np.dot(grad_u, grad_u) / u_scale**2 + grad_t**2))


def line_search(
    state, direction, model, config, grid, ref_norm, u_scale=1.0, mc_sampler=None
):
    """Largest h in {1, 1/2, ...} passing the monotone-gradient and curvature tests.

    Every trial refreshes the surrogates at (u + h du, t + h dt) with the
    current eps.  Returns (h, trial_pack, trial_gradient) or None on stall.
    """
    du, dt = direction
    guard = config.theta / state.eps
    h = 1.0
    while h >= config.min_step:
        u_try = state.u + h * du
        t_try = state.t + h * dt
        pack = build_surrogates(model, u_try, t_try, state.eps, grid, config.cross)
        trial_state = OptimizerState(u_try, t_try, state.eps, state.iteration)
        grad_u, grad_t = assemble_gradient(pack, trial_state, model, config, grid)
        if mc_sampler is not None:
            grad_u, grad_t = mc_sampler(pack, trial_state, grad_u, grad_t)
        norm = _gradient_norm(grad_u, grad_t, u_scale)
        curvature = expectation(pack.tt_gpp, grid)
        if norm <= ref_norm * (1.0 + 1e-12) and curvature > guard:
            return h, pack, (grad_u, grad_t)
        h *= 0.5
    return None


def cvar_estimate(pack: SurrogatePack, state, config, grid) -> float:
    """Smoothed CVaR at the current iterate, from the cached cost surrogate."""
    res = cross_over_tt(
        pack.tt_j,
        lambda v: g_eps(v - state.t, state.eps),
        _sub_cross_config(config.cross, 4),
    )
    return state.t + expectation(res.tt, grid) / (1.0 - config.beta)


def ttrisk_optimize(
    model: ReducedModel,
    grid: TensorGrid,
    config: OptimizerConfig,
    u0: np.ndarray | None = None,
) -> OptimizeResult:
    """Damped-Newton minimization of the smoothed CVaR objective.

    Starts from u_0 (zeros by default) with t_0 = eps_0 = E[j(u_0; xi)] and
    shrinks eps by mu_eps after every accepted step.  Stops when both gradient
    components fall below the tolerance, a stall leaves no admissible step, or
    the iteration budget runs out.
    """
    nu = model.control_dim
    u = model.project(np.zeros(nu) if u0 is None else np.asarray(u0, dtype=np.float64))

    pack0 = build_surrogates(model, u, 0.0, 1.0, grid, config.cross, with_gradient=False)
    mean_j = expectation(pack0.tt_j, grid)
    var_j = max(weighted_expectation(pack0.tt_j, pack0.tt_j, grid) - mean_j**2, 0.0)
    t0 = mean_j
    eps0 = mean_j if mean_j > 0 else max(1e-2 * np.sqrt(var_j), 1e-8)
    state = OptimizerState(u=u, t=float(t0), eps=float(eps0))

    mc_sampler = None
    if config.mc_correction is not None:
        from .control_variate import make_gradient_corrector

        mc_sampler = make_gradient_corrector(model, grid, config)

    pack = build_surrogates(model, state.u, state.t, state.eps, grid, config.cross)
    grad_u, grad_t = assemble_gradient(pack, state, model, config, grid)
    if mc_sampler is not None:
        grad_u, grad_t = mc_sampler(pack, state, grad_u, grad_t)

    # freeze the control-gradient unit for the line-search norm
    u_scale = float(np.linalg.norm(grad_u))
    if not np.isfinite(u_scale) or u_scale < 1e-300:
        u_scale = 1.0

    converged = False
    stalled = False
    while state.iteration < config.max_iters:
        gu_norm = float(np.linalg.norm(grad_u))
        gt_norm = abs(grad_t)
        if gu_norm <= config.tolerance and gt_norm <= config.tolerance:
            converged = True
            break

        blocks = assemble_t_blocks(pack, config, grid)
        try:
            du, dt, diag = newton_step(
                pack, state, (grad_u, grad_t), blocks, model, config, grid
            )
        except DegenerateTailError:
            # recover the initialization recipe: re-center t at E[j]
            state.t = expectation(pack.tt_j, grid)
            pack = build_surrogates(model, state.u, state.t, state.eps, grid, config.cross)
            grad_u, grad_t = assemble_gradient(pack, state, model, config, grid)
            state.iteration += 1
            continue

        # project the incremented control, then search along the feasible increment
        du = model.project(state.u + du) - state.u
        found = line_search(
            state,
            (du, dt),
            model,
            config,
            grid,
            _gradient_norm(grad_u, grad_t, u_scale),
            u_scale,
            mc_sampler,
        )
        if found is None:
            stalled = True
            break
        h, pack, (grad_u, grad_t) = found
        state.u = state.u + h * du
        state.t = state.t + h * dt
        state.iteration += 1

        state.log.append(
            {
                "iter": state.iteration,
                "eps": state.eps,
                "grad_u_norm": float(np.linalg.norm(grad_u)),
                "grad_t_norm": abs(grad_t),
                "rank_j": pack.rank_j,
                "rank_gradj": pack.rank_gradj,
                "rank_g2": pack.rank_g2,
                "pde_solves": int(getattr(model, "solve_count", 0)),
                "step_h": h,
                "t": state.t,
                "cvar_est": cvar_estimate(pack, state, config, grid),
            }
        )

        state.eps = max(config.mu_eps * state.eps, config.eps_floor)
        # t and eps moved: refresh the smoothed weights from the cached cost
        pack = SurrogatePack(
            pack.tt_j,
            pack.tt_gradj,
            cross_over_tt(
                pack.tt_j,
                lambda v: g_eps_prime(v - state.t, state.eps),
                _sub_cross_config(config.cross, 2),
            ).tt,
            cross_over_tt(
                pack.tt_j,
                lambda v: g_eps_second(v - state.t, state.eps),
                _sub_cross_config(config.cross, 3),
            ).tt,
            pack.rank_j,
            pack.rank_gradj,
            pack.rank_g2,
        )
        pack.rank_g2 = max(pack.tt_gpp.ranks)
        grad_u, grad_t = assemble_gradient(pack, state, model, config, grid)
        if mc_sampler is not None:
            grad_u, grad_t = mc_sampler(pack, state, grad_u, grad_t)

    if not converged and not stalled:
        gu_norm = float(np.linalg.norm(grad_u))
        converged = gu_norm <= config.tolerance and abs(grad_t) <= config.tolerance

    cvar = cvar_estimate(pack, state, config, grid)
    return OptimizeResult(
        u=state.u,
        t=state.t,
        cvar=float(cvar),
        converged=converged,
        stalled=stalled,
        iterations=state.iteration,
        log=state.log,
        state=state,
    )


LOG_COLUMNS = [
    "iter",
    "eps",
    "grad_u_norm",
    "grad_t_norm",
    "rank_j",
    "rank_gradj",
    "rank_g2",
    "pde_solves",
    "step_h",
    "t",
    "cvar_est",
]


def log_to_csv(log) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for rec in log:
        lines.append(",".join(str(rec[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"
