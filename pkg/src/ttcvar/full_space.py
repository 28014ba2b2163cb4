"""Full-space (Lagrangian) Gauss-Newton solver for smoothed CVaR control.

All collocation states y_j and adjoints p_j are kept as unknowns together with
the quantile shift t; the control is eliminated analytically through the
quadratic penalty.  Every y/p-row of the KKT system and right-hand side is
pre-divided by its quadrature weight w_j, which keeps the condition number
independent of the weight spread.  The resulting nonsymmetric system

    [ Hyy   A*    Hyt ] [dy]   [ Fy ]
    [ A    -Bc(x)W  0 ] [dp] = [ Fp ]
    [ Hytw* 0     Htt ] [dt]   [ Ft ]

is solved by right-preconditioned GMRES with a permuted block-triangular
preconditioner built around a matching Schur-complement approximation
S~ = (A* + eta S^yy) A^-1 (A + Bc(x)W/eta).

Storage is dense per collocation node (desk scale); the operator actions are
written against block interfaces so a compressed backend can replace them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .quadrature import TensorGrid
from .smoothing import g_eps, g_eps_prime, g_eps_second


class FullSpaceModel:
    """Constraint c(y, u, xi) = c_hat(y, xi) + B u with quadratic control cost.

    Implementations provide the state-space linearization A = d c_hat / dy at
    each collocation point, the objective and its y-derivatives, the control
    coupling B, and the (lumped) control mass.  The built-in solver stores
    states densely, one row per collocation node.
    """

    state_dim: int = 0
    control_dim: int = 0

    def residual(self, y, xi):
        raise NotImplementedError

    def lin_op(self, xi):
        raise NotImplementedError

    def b_coupling(self):
        """B such that c = c_hat + B u."""
        raise NotImplementedError

    def mass_u_diag(self):
        raise NotImplementedError

    def objective(self, y, xi):
        raise NotImplementedError

    def obj_grad_y(self, y, xi):
        raise NotImplementedError

    def obj_hess_y(self, y, xi):
        raise NotImplementedError

    def project(self, u):
        return np.asarray(u, dtype=np.float64)

    def project_prime_diag(self, u):
        """Semi-smooth derivative of the projector (box: active-set indicator)."""
        return np.ones(self.control_dim)


@dataclass
class KrylovConfig:
    tol: float = 1e-8
    restart: int = 50
    maxiter: int = 500


@dataclass
class FullSpaceConfig:
    alpha: float = 1e-6
    beta: float = 0.5
    theta: float = 0.05
    mu_eps: float = 0.5
    max_iters: int = 30
    tolerance: float = 1e-7
    eps_floor: float = 0.0
    krylov: KrylovConfig = field(default_factory=KrylovConfig)
    min_step: float = 2.0**-20
    power_iters: int = 10
    mc_samples: np.ndarray | None = None  # optional correction sample points


@dataclass
class KktBlocks:
    """Weight-rescaled Gauss-Newton blocks, dense per collocation node."""

    a_mats: np.ndarray  # (N, ny, ny)
    a_lu: list  # LU factors of each A_j
    hyy: np.ndarray  # (N, ny, ny)
    hyt: np.ndarray  # (N, ny)
    hytw: np.ndarray  # (N, ny) = w_j * hyt_j
    h_tt: float
    bcal: np.ndarray  # (ny, ny) control Schur kernel B Proj' (alpha Mu)^-1 B*
    weights: np.ndarray  # (N,)
    eta: float = 0.0

    @property
    def n_nodes(self):
        return self.a_mats.shape[0]

    @property
    def state_dim(self):
        return self.a_mats.shape[1]

    def pack(self, dy, dp, dt):
        return np.concatenate([dy.ravel(), dp.ravel(), [dt]])

    def unpack(self, v):
        n, ny = self.n_nodes, self.state_dim
        return (
            v[: n * ny].reshape(n, ny),
            v[n * ny : 2 * n * ny].reshape(n, ny),
            float(v[-1]),
        )

    def apply(self, v):
        """Matrix-vector product of the rescaled KKT operator."""
        dy, dp, dt = self.unpack(v)
        s = self.weights @ dp  # (ny,), the rank-1 W action
        row_y = (
            np.einsum("jab,jb->ja", self.hyy, dy)
            + np.einsum("jba,jb->ja", self.a_mats, dp)
            + self.hyt * dt
        )
        row_p = np.einsum("jab,jb->ja", self.a_mats, dy) - self.bcal @ s
        row_t = float(np.einsum("ja,ja->", self.hytw, dy)) + self.h_tt * dt
        return self.pack(row_y, row_p, row_t)


def eliminate_control(p_states, model: FullSpaceModel, alpha: float, weights):
    """Recover u = Proj((alpha M_u)^-1 (-B)* sum_i w_i p_i) and the Schur kernel.

    Returns (u, bcal) where bcal = B Proj' (alpha M_u)^-1 B* enters the (p,p)
    Gauss-Newton block.  Requires alpha > 0.
    """
    if alpha <= 0:
        raise ValueError("control elimination requires a positive penalty weight")
    b = model.b_coupling()  # (ny, nu)
    mu = np.asarray(model.mass_u_diag(), dtype=np.float64)
    agg = weights @ p_states  # (ny,)
    v = -(b.T @ agg) / (alpha * mu)
    u = model.project(v)
    proj_prime = model.project_prime_diag(v)
    bcal = (b * (proj_prime / (alpha * mu))[None, :]) @ b.T
    return u, bcal


def assemble_kkt(y_states, p_states, t, u, model, grid_points, weights, config):
    """Rescaled blocks and Newton right-hand side at the current iterate.

    rhs is the negated (weight-rescaled) Lagrangian gradient, so the Newton
    system reads blocks.apply(delta) = rhs.  Monte Carlo correction terms are
    folded into the y-rows and the t-row when config.mc_samples is set.
    """
    n, ny = y_states.shape
    tw = 1.0 / (1.0 - config.beta)
    eps = config.eps
    a_mats = np.empty((n, ny, ny))
    hyy = np.empty((n, ny, ny))
    hyt = np.empty((n, ny))
    rhs_y = np.empty((n, ny))
    rhs_p = np.empty((n, ny))
    h_tt = 0.0
    sum_gp = 0.0
    bu = model.b_coupling() @ u

    for j in range(n):
        xi = grid_points[j]
        a = model.lin_op(xi)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-invertible linearization at node {j}, xi={xi}")
        y = y_states[j]
        cost = model.objective(y, xi)
        q = model.obj_grad_y(y, xi)
        gp = g_eps_prime(cost - t, eps)
        gpp = g_eps_second(cost - t, eps)
        a_mats[j] = a
        hyy[j] = tw * (gpp * np.outer(q, q) + gp * model.obj_hess_y(y, xi))
        hyt[j] = -tw * gpp * q
        h_tt += weights[j] * gpp
        sum_gp += weights[j] * gp
        rhs_y[j] = -(tw * gp * q + a.T @ p_states[j])
        rhs_p[j] = -(model.residual(y, xi) + bu)

    rhs_t = -(1.0 - tw * sum_gp)

    if config.mc_samples is not None:
        corr_y, corr_t = _mc_correction_terms(
            y_states, t, model, grid_points, weights, config
        )
        rhs_y -= tw * corr_y
        rhs_t += tw * corr_t

    h_tt *= tw
    blocks = KktBlocks(
        a_mats=a_mats,
        a_lu=[lu_factor(a_mats[j]) for j in range(n)],
        hyy=hyy,
        hyt=hyt,
        hytw=hyt * weights[:, None],
        h_tt=float(h_tt),
        bcal=config.bcal,
        weights=np.asarray(weights, dtype=np.float64),
    )
    rhs = blocks.pack(rhs_y, rhs_p, rhs_t)
    return blocks, rhs


def _mc_correction_terms(y_states, t, model, grid_points, weights, config):
    """Indicator-vs-sigmoid corrections: per-node y-term (scaled by 1/w_j) and t-term."""
    from .control_variate import barycentric_weights, lagrange_basis_at

    samples = np.atleast_2d(config.mc_samples)
    m = samples.shape[0]
    grid: TensorGrid = config.grid
    n, ny = y_states.shape
    basis_cols = []
    for k in range(grid.ndim):
        nodes = grid.nodes(k)
        bw = barycentric_weights(nodes)
        basis_cols.append(lagrange_basis_at(nodes, bw, samples[:, k]))  # (m, nk)
    # multivariate Lagrange values L_j(xi_l) for all nodes j, shape (m, N)
    lvals = basis_cols[0]
    for col in basis_cols[1:]:
        lvals = np.einsum("ma,mb->mab", lvals, col).reshape(m, -1)
    corr_y = np.zeros((n, ny))
    corr_t = 0.0
    for ell in range(m):
        y_interp = lvals[ell] @ y_states  # (ny,)
        cost = model.objective(y_interp, samples[ell])
        e_prime = float(cost - t >= 0.0) - g_eps_prime(cost - t, config.eps)
        q = model.obj_grad_y(y_interp, samples[ell])
        corr_y += np.outer(lvals[ell], q) * (e_prime / m)
        corr_t += e_prime / m
    corr_y /= weights[:, None]
    return corr_y, corr_t


class SchurPreconditioner:
    """Permuted block-triangular right preconditioner with the matching S~.

    Applying the inverse solves, in order: the scalar t block, the matched
    Schur factor S~ = (A* + eta S^yy) A^-1 (A + Bc (x) W / eta), and a final
    block solve with A.  S^yy absorbs the rank-1 t-coupling when H_tt > 0.
    """

    def __init__(self, blocks: KktBlocks, power_iters: int = 10, seed: int = 0):
        self.b = blocks
        n, ny = blocks.n_nodes, blocks.state_dim
        self.has_t = blocks.h_tt > 1e-300
        rng = np.random.default_rng(seed)

        norm_bw = self._power_norm_bw(rng, power_iters)
        norm_syy = self._power_norm_syy(rng, power_iters)
        if norm_bw <= 1e-300:
            self.eta = 0.0
        else:
            self.eta = float(np.sqrt(norm_bw / max(norm_syy, 1e-300)))
        blocks.eta = self.eta

        # per-node LU of K_j = A_j^T + eta * Hyy_j
        self.k_lu = [
            lu_factor(blocks.a_mats[j].T + self.eta * blocks.hyy[j]) for j in range(n)
        ]
        if self.eta > 0.0:
            # Sherman-Morrison data for the global rank-1 part of eta*S^yy
            self.sm_u = np.stack(
                [lu_solve(self.k_lu[j], blocks.hyt[j]) for j in range(n)]
            )  # K^-1 hyt
            if self.has_t:
                denom = 1.0 - (self.eta / blocks.h_tt) * float(
                    np.einsum("ja,ja->", blocks.hytw, self.sm_u)
                )
                self.sm_denom = denom if abs(denom) > 1e-300 else None
            else:
                self.sm_denom = None
        else:
            self.sm_denom = None

        # data for (A + Bc (x) W / eta): G = sum_j w_j A_j^-1 acting on Bc
        if self.eta > 0.0 and np.any(blocks.bcal):
            g = np.zeros((ny, ny))
            for j in range(n):
                g += blocks.weights[j] * lu_solve(blocks.a_lu[j], np.eye(ny))
            self.cap_lu = lu_factor(np.eye(ny) + (1.0 / self.eta) * (g @ blocks.bcal))
            self.have_bw = True
        else:
            self.have_bw = False

    def _power_norm_bw(self, rng, iters):
        b = self.b
        v = rng.standard_normal(b.n_nodes * b.state_dim)
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(iters):
            dp = v.reshape(b.n_nodes, b.state_dim)
            out = np.tile(b.bcal @ (b.weights @ dp), (b.n_nodes, 1)).ravel()
            est = np.linalg.norm(out)
            if est <= 1e-300:
                return 0.0
            v = out / est
        return est

    def _apply_syy(self, dy):
        b = self.b
        out = np.einsum("jab,jb->ja", b.hyy, dy)
        if self.has_t:
            out -= b.hyt * (np.einsum("ja,ja->", b.hytw, dy) / b.h_tt)
        return out

    def _power_norm_syy(self, rng, iters):
        b = self.b
        v = rng.standard_normal((b.n_nodes, b.state_dim))
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(iters):
            out = self._apply_syy(v)
            est = np.linalg.norm(out)
            if est <= 1e-300:
                return 0.0
            v = out / est
        return est

    # -- factor solves ------------------------------------------------------

    def _solve_k(self, r):
        """(A* + eta S^yy)^-1 via per-node LU plus Sherman-Morrison."""
        b = self.b
        x = np.stack([lu_solve(self.k_lu[j], r[j]) for j in range(b.n_nodes)])
        if self.sm_denom is not None:
            scal = (self.eta / b.h_tt) * float(np.einsum("ja,ja->", b.hytw, x))
            x += self.sm_u * (scal / self.sm_denom)
        return x

    def _solve_a_plus_bw(self, r):
        """(A + Bc (x) W / eta)^-1 through the dense ny x ny capacitance system."""
        b = self.b
        base = np.stack([lu_solve(b.a_lu[j], r[j]) for j in range(b.n_nodes)])
        if not self.have_bw:
            return base
        s = lu_solve(self.cap_lu, b.weights @ base)
        corr = lu_solve_batch(b.a_lu, (1.0 / self.eta) * (b.bcal @ s), b.n_nodes)
        return base - corr

    def _solve_schur(self, r):
        v = self._solve_k(r)
        if self.eta == 0.0:
            return v
        w = np.einsum("jab,jb->ja", self.b.a_mats, v)
        return self._solve_a_plus_bw(w)

    def solve(self, r):
        """P^-1 r for the permuted block-triangular preconditioner."""
        b = self.b
        ry, rp, rt = b.unpack(r)
        zt = rt / b.h_tt if self.has_t else rt
        zp = self._solve_schur(ry - b.hyt * zt)
        s = b.weights @ zp
        zy = np.stack(
            [lu_solve(b.a_lu[j], rp[j] + b.bcal @ s) for j in range(b.n_nodes)]
        )
        return b.pack(zy, zp, zt)


def lu_solve_batch(lu_list, vec, n):
    """Solve every per-node system against one shared right-hand side vector."""
    return np.stack([lu_solve(lu_list[j], vec) for j in range(n)])


def schur_preconditioner(blocks: KktBlocks, power_iters: int = 10, seed: int = 0):
    return SchurPreconditioner(blocks, power_iters, seed)


@dataclass
class GnSolveInfo:
    iterations: int
    residual: float
    converged: bool


def gn_solve(blocks: KktBlocks, rhs, precond, krylov: KrylovConfig):
    """Right-preconditioned GMRES on the rescaled KKT system."""
    from scipy.sparse.linalg import LinearOperator, gmres

    nsys = rhs.size
    counter = {"it": 0}

    def op(v):
        return blocks.apply(precond.solve(v) if precond is not None else v)

    def cb(_):
        counter["it"] += 1

    lin = LinearOperator((nsys, nsys), matvec=op)
    z, code = gmres(
        lin,
        rhs,
        rtol=krylov.tol,
        atol=0.0,
        restart=krylov.restart,
        maxiter=krylov.maxiter,
        callback=cb,
        callback_type="pr_norm",
    )
    x = precond.solve(z) if precond is not None else z
    res = float(np.linalg.norm(blocks.apply(x) - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return x, GnSolveInfo(counter["it"], res, code == 0)


@dataclass
class FullSpaceResult:
    u: np.ndarray
    t: float
    cvar: float
    converged: bool
    stalled: bool
    iterations: int
    log: list
    y_states: np.ndarray
    p_states: np.ndarray


class _AssemblyView:
    """Internal bag passed into assemble_kkt (keeps its signature stable)."""

    def __init__(self, beta, eps, bcal, grid=None, mc_samples=None):
        self.beta = beta
        self.eps = eps
        self.bcal = bcal
        self.grid = grid
        self.mc_samples = mc_samples


def _lagrangian_grad_norms(y_states, p_states, t, u, model, pts, w, beta, eps):
    """Weight-rescaled Lagrangian gradient blocks (gy, gp, gt)."""
    tw = 1.0 / (1.0 - beta)
    n, ny = y_states.shape
    gy = np.empty((n, ny))
    gp = np.empty((n, ny))
    sum_gp = 0.0
    bu = model.b_coupling() @ u
    for j in range(n):
        xi = pts[j]
        y = y_states[j]
        cost = model.objective(y, xi)
        gpj = g_eps_prime(cost - t, eps)
        gy[j] = tw * gpj * model.obj_grad_y(y, xi) + model.lin_op(xi).T @ p_states[j]
        gp[j] = model.residual(y, xi) + bu
        sum_gp += w[j] * gpj
    gt = 1.0 - tw * sum_gp
    return gy, gp, float(gt)


def full_space_optimize(
    model: FullSpaceModel,
    grid: TensorGrid,
    config: FullSpaceConfig,
    seed: int = 0,
) -> FullSpaceResult:
    """Gauss-Newton iteration on (y, p, t) with eliminated control.

    The initial states come from forward solves at u = 0 with zero adjoints;
    t_0 = eps_0 = E_N[J(y_j)].  Each iteration assembles the rescaled KKT
    system, solves it by preconditioned GMRES, and damps the update by the
    monotone-gradient plus curvature-guard line search.
    """
    pts, w = _enumerate_grid(grid)
    n = pts.shape[0]
    ny = model.state_dim
    u = model.project(np.zeros(model.control_dim))
    bu = model.b_coupling() @ u
    y_states = np.empty((n, ny))
    for j in range(n):
        a = model.lin_op(pts[j])
        y_states[j] = np.linalg.solve(a, -bu)
    p_states = np.zeros((n, ny))

    costs = np.array([model.objective(y_states[j], pts[j]) for j in range(n)])
    t = float(w @ costs)
    eps = t if t > 0 else max(1e-2 * float(np.sqrt(np.var(costs))), 1e-8)

    gy, gp, gt = _lagrangian_grad_norms(
        y_states, p_states, t, u, model, pts, w, config.beta, eps
    )
    s_yp = max(float(np.linalg.norm(gy)), 1e-300)

    def scaled_norm(gy, gp, gt):
        return float(
            np.sqrt((np.linalg.norm(gy) ** 2 + np.linalg.norm(gp) ** 2) / s_yp**2 + gt**2)
        )

    log = []
    converged = False
    stalled = False
    it = 0
    while it < config.max_iters:
        raw = max(np.linalg.norm(gy), np.linalg.norm(gp))
        if raw <= config.tolerance and abs(gt) <= config.tolerance:
            converged = True
            break

        u, bcal = eliminate_control(p_states, model, config.alpha, w)
        view = _AssemblyView(config.beta, eps, bcal, grid, config.mc_samples)
        blocks, rhs = assemble_kkt(y_states, p_states, t, u, model, pts, w, view)
        precond = schur_preconditioner(blocks, config.power_iters, seed)
        delta, info = gn_solve(blocks, rhs, precond, config.krylov)
        dy, dp, dt = blocks.unpack(delta)

        ref = scaled_norm(gy, gp, gt)
        h = 1.0
        accepted = None
        while h >= config.min_step:
            y_try = y_states + h * dy
            p_try = p_states + h * dp
            t_try = t + h * dt
            u_try, _ = eliminate_control(p_try, model, config.alpha, w)
            gy2, gp2, gt2 = _lagrangian_grad_norms(
                y_try, p_try, t_try, u_try, model, pts, w, config.beta, eps
            )
            curv = sum(
                w[j]
                * g_eps_second(model.objective(y_try[j], pts[j]) - t_try, eps)
                for j in range(n)
            )
            if scaled_norm(gy2, gp2, gt2) <= ref * (1 + 1e-12) and curv > config.theta / eps:
                accepted = (y_try, p_try, t_try, u_try, gy2, gp2, gt2, h)
                break
            h *= 0.5
        if accepted is None:
            stalled = True
            break
        y_states, p_states, t, u, gy, gp, gt, h = accepted
        it += 1
        costs = np.array([model.objective(y_states[j], pts[j]) for j in range(n)])
        cvar = t + float(w @ g_eps(costs - t, eps)) / (1.0 - config.beta)
        log.append(
            {
                "iter": it,
                "eps": eps,
                "grad_u_norm": float(np.linalg.norm(gy)),
                "grad_t_norm": abs(gt),
                "rank_j": 0,
                "rank_gradj": 0,
                "rank_g2": 0,
                "pde_solves": n * (it + 1),
                "step_h": h,
                "t": t,
                "cvar_est": cvar,
                "krylov_iters": info.iterations,
                "eta": blocks.eta,
            }
        )
        eps = max(config.mu_eps * eps, config.eps_floor)
        gy, gp, gt = _lagrangian_grad_norms(
            y_states, p_states, t, u, model, pts, w, config.beta, eps
        )

    if not converged and not stalled:
        raw = max(np.linalg.norm(gy), np.linalg.norm(gp))
        converged = raw <= config.tolerance and abs(gt) <= config.tolerance

    costs = np.array([model.objective(y_states[j], pts[j]) for j in range(n)])
    cvar = t + float(w @ g_eps(costs - t, eps)) / (1.0 - config.beta)
    return FullSpaceResult(
        u=u,
        t=t,
        cvar=float(cvar),
        converged=converged,
        stalled=stalled,
        iterations=it,
        log=log,
        y_states=y_states,
        p_states=p_states,
    )


def _enumerate_grid(grid: TensorGrid):
    """All collocation points (N, d) and their product weights (N,)."""
    shape = grid.shape
    idx = np.indices(shape).reshape(len(shape), -1).T
    pts = grid.points_from_indices(idx)
    w = grid.dense_weights().reshape(-1)
    return pts, w


FULL_LOG_COLUMNS = [
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
    "krylov_iters",
    "eta",
]
