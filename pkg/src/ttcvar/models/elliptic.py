"""1D elliptic control benchmark with a Karhunen-Loeve random diffusion field.

The state solves -(kappa(x, xi) y')' = B u on (0, 1) with homogeneous
Dirichlet ends, discretized by piecewise linear finite elements on a uniform
grid of n_y points; the coefficient and the control live at cell midpoints.
The control acts on the subdomain (0.25, 0.75) through the identity insertion
operator.  The tracking objective is

    j(u; xi) = 1/2 || y(u; xi) - y_d ||_{L2}^2,      y_d(x) = x (1 - x),

whose gradient comes from one adjoint solve.  Random inputs are the d leading
KL modes of a squared-exponential covariance, with each xi^(k) uniform on
(-sqrt(3), sqrt(3)) so it has unit variance.
"""

from __future__ import annotations

import numpy as np

from ..quadrature import TensorGrid, gauss_legendre
from ..reduced import ReducedModel


class KlExpansion:
    """Discrete KL modes of C(x,x') = sigma^2 exp(-(x-x')^2 / (2 l^2)) at midpoints."""

    def __init__(self, eigenvalues, eigenfunctions, mean_value, points):
        self.eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        self.eigenfunctions = np.asarray(eigenfunctions, dtype=np.float64)  # (m, d)
        self.mean_value = float(mean_value)
        self.points = np.asarray(points, dtype=np.float64)
        if np.any(np.diff(self.eigenvalues) > 1e-12):
            raise ValueError("eigenvalues must be nonincreasing")

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    def coefficient(self, xi) -> np.ndarray:
        """kappa(x, xi) for a batch of xi, shape (B, d) -> (B, m)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        amp = self.eigenfunctions * np.sqrt(self.eigenvalues)  # (m, d)
        return self.mean_value + xi @ amp.T


def kl_build(
    n_points: int,
    d: int,
    corr_length: float = 0.25,
    variance: float = 1.0,
    mean_value: float = 10.0,
) -> KlExpansion:
    """Leading d eigenpairs of the covariance operator on the midpoint grid.

    Eigenfunctions are L2-normalized (sum phi_i^2 h = 1), so with unit-variance
    xi the pointwise variance of kappa is sum_k lambda_k phi_k(x)^2.
    """
    if d > n_points:
        raise ValueError("cannot request more KL modes than grid points")
    h = 1.0 / n_points
    x = (np.arange(n_points) + 0.5) * h
    cov = variance * np.exp(-((x[:, None] - x[None, :]) ** 2) / (2.0 * corr_length**2))
    # discrete integral operator: eigenpairs of h * C
    vals, vecs = np.linalg.eigh(h * cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[min(d, vals.size) - 1] < -1e-12:
        raise ValueError("covariance matrix is not numerically positive semidefinite")
    vals = np.maximum(vals[:d], 0.0)
    vecs = vecs[:, :d] / np.sqrt(h)  # L2 normalization
    return KlExpansion(vals, vecs, mean_value, x)


def thomas_batch(lower, diag, upper, rhs):
    """Solve a batch of tridiagonal systems, all arrays shaped (B, n) / (B, n-1).

    Plain Thomas elimination vectorized over the batch axis; the matrices must
    not require pivoting (true for the SPD FEM systems used here).
    """
    diag = np.array(diag, dtype=np.float64, copy=True)
    rhs = np.array(rhs, dtype=np.float64, copy=True)
    n = diag.shape[-1]
    for i in range(1, n):
        w = lower[..., i - 1] / diag[..., i - 1]
        diag[..., i] -= w * upper[..., i - 1]
        rhs[..., i] -= w * rhs[..., i - 1]
    out = np.empty_like(rhs)
    out[..., -1] = rhs[..., -1] / diag[..., -1]
    for i in range(n - 2, -1, -1):
        out[..., i] = (rhs[..., i] - upper[..., i] * out[..., i + 1]) / diag[..., i]
    return out


class Elliptic1dModel(ReducedModel):
    def __init__(
        self,
        n_y: int = 65,
        d: int = 5,
        corr_length: float = 0.25,
        variance: float = 1.0,
        mean_value: float = 10.0,
        alpha: float = 1e-6,
        control_interval: tuple = (0.25, 0.75),
    ):
        self.n_y = int(n_y)
        self.h = 1.0 / (self.n_y - 1)
        self.d = int(d)
        self.alpha = float(alpha)
        self.n_mid = self.n_y - 1
        self.n_int = self.n_y - 2  # interior Dirichlet nodes
        self.kl = kl_build(self.n_mid, self.d, corr_length, variance, mean_value)

        # control degrees of freedom: midpoints strictly inside the subdomain
        mids = self.kl.points
        lo, hi = control_interval
        self.control_cells = np.nonzero((mids > lo) & (mids < hi))[0]
        self.control_dim = self.control_cells.size

        # load map midpoint-cell values -> interior node loads: f_i = h/2 (c_{i} + c_{i+1})
        m, ni = self.n_mid, self.n_int
        load = np.zeros((ni, m))
        for i in range(ni):
            load[i, i] = 0.5 * self.h
            load[i, i + 1] = 0.5 * self.h
        self.load_full = load
        self.b_matrix = load[:, self.control_cells]  # (n_int, n_controls)

        # interior P1 mass matrix (tridiagonal)
        self.mass_diag = np.full(ni, 2.0 * self.h / 3.0)
        self.mass_off = np.full(ni - 1, self.h / 6.0)

        x_int = np.linspace(0.0, 1.0, self.n_y)[1:-1]
        self.y_target = x_int * (1.0 - x_int)

        # lumped control mass (uniform cells)
        self.mass_u_diag = np.full(self.control_dim, self.h)

        self.bounds = None  # optional (lower, upper) box
        self.solve_count = 0

        # guard: kappa must stay uniformly positive over the xi-box corners
        corner = np.sqrt(3.0) * np.ones(self.d)
        lo_k = (
            self.kl.mean_value
            - np.abs(self.kl.eigenfunctions * np.sqrt(self.kl.eigenvalues)) @ corner
        )
        if np.min(lo_k) <= 0:
            raise ValueError("KL coefficient can lose positivity on this grid")

    # -- assembly -----------------------------------------------------------

    def tridiag(self, xi_batch):
        """Stiffness bands for a batch of xi: (B, n_int) diag and (B, n_int-1) off."""
        kappa = self.kl.coefficient(xi_batch)  # (B, m)
        if np.any(kappa <= 0):
            bad = np.atleast_2d(xi_batch)[np.any(kappa <= 0, axis=1)][0]
            raise ValueError(f"nonpositive diffusion coefficient at xi={bad}")
        diag = (kappa[:, :-1] + kappa[:, 1:]) / self.h
        off = -kappa[:, 1:-1] / self.h
        return diag, off

    def mass_apply(self, y):
        out = self.mass_diag * y
        out[..., :-1] += self.mass_off * y[..., 1:]
        out[..., 1:] += self.mass_off * y[..., :-1]
        return out

    def solve(self, u, xi_batch):
        """Forward states y(u; xi) for a batch, shape (B, n_int)."""
        diag, off = self.tridiag(xi_batch)
        rhs = np.broadcast_to(self.b_matrix @ u, (diag.shape[0], self.n_int))
        self.solve_count += diag.shape[0]
        return thomas_batch(off, diag, off, rhs)

    # -- ReducedModel interface ----------------------------------------------

    def j(self, u, points):
        y = self.solve(u, points)
        r = y - self.y_target
        return 0.5 * np.einsum("bi,bi->b", r, self.mass_apply(r))

    def grad_u_j(self, u, points):
        diag, off = self.tridiag(points)
        b = diag.shape[0]
        rhs = np.broadcast_to(self.b_matrix @ u, (b, self.n_int))
        y = thomas_batch(off, diag, off, rhs)
        p = thomas_batch(off, diag, off, self.mass_apply(y - self.y_target))
        self.solve_count += 2 * b
        return p @ self.b_matrix

    def hess_action(self, u, xi_bar, v):
        diag, off = self.tridiag(np.atleast_2d(xi_bar))
        w = thomas_batch(off, diag, off, (self.b_matrix @ v)[None, :])
        q = thomas_batch(off, diag, off, self.mass_apply(w))
        self.solve_count += 2
        return (q @ self.b_matrix)[0]

    def penalty(self, u):
        return 0.5 * float(u @ (self.mass_u_diag * u))

    def penalty_grad(self, u):
        return self.mass_u_diag * u

    def penalty_hess_action(self, v):
        return self.mass_u_diag * v

    def project(self, u):
        if self.bounds is None:
            return np.asarray(u, dtype=np.float64)
        lo, hi = self.bounds
        return np.clip(u, lo, hi)

    # -- conveniences ---------------------------------------------------------

    def grid(self, n_xi: int) -> TensorGrid:
        rule = gauss_legendre(n_xi, -np.sqrt(3.0), np.sqrt(3.0))
        return TensorGrid((rule,) * self.d)

    def dense_matrix(self, xi):
        """Dense stiffness matrix at one xi (for oracles and the full-space path)."""
        diag, off = self.tridiag(np.atleast_2d(xi))
        a = np.diag(diag[0])
        a += np.diag(off[0], 1) + np.diag(off[0], -1)
        return a

    def mass_matrix(self):
        m = np.diag(self.mass_diag)
        m += np.diag(self.mass_off, 1) + np.diag(self.mass_off, -1)
        return m


class EllipticFullSpace:
    """Full-space view of the same benchmark: c(y, u, xi) = A(xi) y - B u."""

    def __init__(self, reduced: Elliptic1dModel):
        self.m = reduced
        self.state_dim = reduced.n_int
        self.control_dim = reduced.control_dim
        self._mass = reduced.mass_matrix()
        self._b = -reduced.b_matrix  # c = c_hat + B u with c_hat = A y

    def residual(self, y, xi):
        return self.m.dense_matrix(xi) @ y

    def lin_op(self, xi):
        return self.m.dense_matrix(xi)

    def b_coupling(self):
        return self._b

    def mass_u_diag(self):
        return self.m.mass_u_diag

    def objective(self, y, xi):
        r = y - self.m.y_target
        return 0.5 * float(r @ self._mass @ r)

    def obj_grad_y(self, y, xi):
        return self._mass @ (y - self.m.y_target)

    def obj_hess_y(self, y, xi):
        return self._mass

    def project(self, u):
        return self.m.project(u)

    def project_prime_diag(self, u):
        if self.m.bounds is None:
            return np.ones(self.control_dim)
        lo, hi = self.m.bounds
        return ((u > lo) & (u < hi)).astype(np.float64)
