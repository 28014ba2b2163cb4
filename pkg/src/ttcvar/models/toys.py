"""Small analytic control problems used as optimizer oracles in tests."""

from __future__ import annotations

import numpy as np

from ..reduced import ReducedModel


class QuadraticToyModel(ReducedModel):
    """j(u; xi) = 1/2 (u-a)' Q (u-a) + c0 + g'xi + (s'xi)(c'u).

    Convex and quadratic in u with analytic minimizer; the s/c coupling makes
    the control gradient xi-dependent, g adds pure noise, and both default to
    zero for a deterministic problem.
    """

    def __init__(self, q, a, c0=0.0, g=None, s=None, c=None, bounds=None):
        self.q = np.asarray(q, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        self.control_dim = self.a.size
        self.c0 = float(c0)
        self.g = g
        self.s = s
        self.c = c
        self.bounds = bounds
        self.solve_count = 0

    def j(self, u, points):
        points = np.atleast_2d(points)
        r = u - self.a
        base = 0.5 * float(r @ self.q @ r) + self.c0
        out = np.full(points.shape[0], base)
        if self.g is not None:
            out = out + points @ self.g
        if self.s is not None:
            out = out + (points @ self.s) * float(self.c @ u)
        self.solve_count += points.shape[0]
        return out

    def grad_u_j(self, u, points):
        points = np.atleast_2d(points)
        base = self.q @ (u - self.a)
        out = np.tile(base, (points.shape[0], 1))
        if self.s is not None:
            out = out + np.outer(points @ self.s, self.c)
        self.solve_count += points.shape[0]
        return out

    def hess_action(self, u, xi_bar, v):
        return self.q @ v

    def penalty(self, u):
        return 0.5 * float(np.dot(u, u))

    def penalty_grad(self, u):
        return np.asarray(u, dtype=np.float64)

    def penalty_hess_action(self, v):
        return np.asarray(v, dtype=np.float64)

    def project(self, u):
        if self.bounds is None:
            return np.asarray(u, dtype=np.float64)
        lo, hi = self.bounds
        return np.clip(u, lo, hi)

    def minimizer(self, alpha=0.0):
        """Unconstrained argmin of E-type objective at g''-inactive regime."""
        # minimize 1/2 (u-a)'Q(u-a) + alpha/2 u'u  (coupling terms average to zero
        # under symmetric rules)
        return np.linalg.solve(self.q + alpha * np.eye(self.control_dim), self.q @ self.a)
