"""Tensor-train vectors and operators: construction, algebra, rounding, ALS solves.

A d-way array ``F`` is stored as a chain of 3-way cores ``G[k]`` of shape
``(r[k], n[k], r[k+1])`` with boundary ranks ``r[0] == r[d] == 1``, so that

    F[i_1, ..., i_d] = G[0][:, i_1, :] @ G[1][:, i_2, :] @ ... @ G[d-1][:, i_d, :].

Linear operators use 4-way cores ``(R[k], n[k], m[k], R[k+1])``.  All cores are
float64.  Values are immutable by convention: every operation returns a new
object and never mutates its inputs.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

# Refuse to materialize dense tensors larger than this (elements).
DENSE_ELEMENT_CAP = 2**22

_TTV_MAGIC = b"TTV1\x00\x00\x00\x00"


class TtShapeError(ValueError):
    """Mode sizes or ranks of the operands do not match."""


class DenseOverflowError(ValueError):
    """A dense materialization would exceed DENSE_ELEMENT_CAP elements."""


@dataclass(frozen=True)
class TruncationPolicy:
    """Relative truncation tolerance and a hard rank cap for TT compressions."""

    rel_tolerance: float = 1e-12
    max_rank: int = 512

    def __post_init__(self):
        if not (0.0 < self.rel_tolerance < 1.0):
            raise ValueError(f"rel_tolerance must be in (0, 1), got {self.rel_tolerance}")
        if self.max_rank < 1:
            raise ValueError(f"max_rank must be >= 1, got {self.max_rank}")


class TtVector:
    """Immutable tensor-train representation of a d-way array."""

    __slots__ = ("cores",)

    def __init__(self, cores):
        cores = [np.ascontiguousarray(c, dtype=np.float64) for c in cores]
        if not cores:
            raise TtShapeError("a TT vector needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise TtShapeError(f"core {k} must be 3-way, got shape {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise TtShapeError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[2] != cores[k + 1].shape[0]:
                raise TtShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{cores[k].shape[2]} != {cores[k + 1].shape[0]}"
                )
        object.__setattr__(self, "cores", tuple(cores))

    def __setattr__(self, name, value):
        raise AttributeError("TtVector is immutable")

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    def __repr__(self):
        return f"TtVector(modes={self.mode_sizes}, ranks={self.ranks})"


class TtOperator:
    """Immutable tensor-train representation of a linear operator."""

    __slots__ = ("cores",)

    def __init__(self, cores):
        cores = [np.ascontiguousarray(c, dtype=np.float64) for c in cores]
        if not cores:
            raise TtShapeError("a TT operator needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 4:
                raise TtShapeError(f"operator core {k} must be 4-way, got shape {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[3] != 1:
            raise TtShapeError("boundary operator ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[3] != cores[k + 1].shape[0]:
                raise TtShapeError(f"operator rank mismatch at bond {k + 1}")
        object.__setattr__(self, "cores", tuple(cores))

    def __setattr__(self, name, value):
        raise AttributeError("TtOperator is immutable")

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def row_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def col_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[3] for c in self.cores)

    def transpose(self) -> "TtOperator":
        return TtOperator([c.transpose(0, 2, 1, 3) for c in self.cores])

    def __repr__(self):
        return (
            f"TtOperator(rows={self.row_sizes}, cols={self.col_sizes}, ranks={self.ranks})"
        )


@dataclass
class RoundingInfo:
    """Diagnostics from tt_round: achieved relative error and whether the cap bound."""

    achieved_rel_error: float = 0.0
    rank_capped: bool = False


# ---------------------------------------------------------------------------
# construction / reconstruction


def _check_cap(mode_sizes):
    total = int(np.prod([int(n) for n in mode_sizes], dtype=np.int64))
    if total > DENSE_ELEMENT_CAP:
        raise DenseOverflowError(
            f"dense tensor with {total} elements exceeds cap {DENSE_ELEMENT_CAP}"
        )
    return total


def _rank_from_singvals(s, budget, max_rank):
    """Smallest rank whose discarded tail has Frobenius mass <= budget."""
    if s.size == 0:
        return 1
    tail = np.cumsum(s[::-1] ** 2)[::-1]  # tail[r] = sum_{i>=r} s_i^2
    below = np.nonzero(tail <= budget**2)[0]
    keep = int(below[0]) if below.size else s.size
    return max(1, min(keep, max_rank))


def tt_from_dense(tensor, policy: TruncationPolicy = TruncationPolicy()) -> TtVector:
    """TT-SVD of a small dense array.

    Guarantees ||F - tt|| <= rel_tolerance * ||F|| in the Frobenius norm by
    giving each of the d-1 truncated SVDs a tail budget of tol*||F||/sqrt(d-1).
    Intended for test-scale oracles only; raises DenseOverflowError above the cap.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim == 0:
        tensor = tensor.reshape(1)
    _check_cap(tensor.shape)
    n = tensor.shape
    d = tensor.ndim
    if d == 1:
        return TtVector([tensor.reshape(1, n[0], 1)])

    norm = np.linalg.norm(tensor)
    if norm == 0.0:
        return tt_zeros(n)

    budget = policy.rel_tolerance * norm / np.sqrt(d - 1)
    cores = []
    r_prev = 1
    rest = tensor.reshape(n[0], -1)
    for k in range(d - 1):
        rest = rest.reshape(r_prev * n[k], -1)
        u, s, vt = np.linalg.svd(rest, full_matrices=False)
        r = _rank_from_singvals(s, budget, policy.max_rank)
        cores.append(u[:, :r].reshape(r_prev, n[k], r))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(rest.reshape(r_prev, n[-1], 1))
    return TtVector(cores)


def tt_to_dense(x: TtVector) -> np.ndarray:
    """Materialize a TT vector as a dense array (test scale only)."""
    _check_cap(x.mode_sizes)
    out = x.cores[0].reshape(x.mode_sizes[0], -1)  # (n_1, r_1)
    for core in x.cores[1:]:
        r, n, r2 = core.shape
        out = out @ core.reshape(r, n * r2)
        out = out.reshape(-1, r2)
    return out.reshape(x.mode_sizes)


def op_to_dense(a: TtOperator) -> np.ndarray:
    """Materialize a TT operator as a dense matrix (prod(rows) x prod(cols))."""
    nrow = _check_cap(a.row_sizes)
    ncol = _check_cap(a.col_sizes)
    if nrow * ncol > DENSE_ELEMENT_CAP:
        raise DenseOverflowError("dense operator exceeds element cap")
    out = np.ones((1, 1, 1))  # (rows, cols, rank)
    for core in a.cores:
        r, n, m, r2 = core.shape
        out = np.einsum("abr,rnms->anbms", out, core).reshape(
            out.shape[0] * n, out.shape[1] * m, r2
        )
    return out[:, :, 0]


def tt_zeros(mode_sizes) -> TtVector:
    return TtVector([np.zeros((1, n, 1)) for n in mode_sizes])


def tt_ones(mode_sizes) -> TtVector:
    return TtVector([np.ones((1, n, 1)) for n in mode_sizes])


def tt_rank_one(factors) -> TtVector:
    """TT of the separable tensor a_1 (x) a_2 (x) ... (x) a_d."""
    return TtVector([np.asarray(f, dtype=np.float64).reshape(1, -1, 1) for f in factors])


def tt_random(mode_sizes, ranks, rng) -> TtVector:
    """Gaussian random TT with the given interior ranks (scalar or sequence)."""
    d = len(mode_sizes)
    if np.isscalar(ranks):
        ranks = [1] + [int(ranks)] * (d - 1) + [1]
    ranks = list(ranks)
    cores = [
        rng.standard_normal((ranks[k], mode_sizes[k], ranks[k + 1])) for k in range(d)
    ]
    return TtVector(cores)


def op_identity(mode_sizes) -> TtOperator:
    return TtOperator([np.eye(n).reshape(1, n, n, 1) for n in mode_sizes])


def op_from_dense(
    mat: np.ndarray, row_sizes, col_sizes, policy: TruncationPolicy = TruncationPolicy()
) -> TtOperator:
    """TT-SVD of a dense matrix interpreted as an operator (test scale only)."""
    row_sizes = tuple(int(n) for n in row_sizes)
    col_sizes = tuple(int(n) for n in col_sizes)
    d = len(row_sizes)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (int(np.prod(row_sizes)), int(np.prod(col_sizes))):
        raise TtShapeError("matrix shape does not factor into the given mode sizes")
    tensor = mat.reshape(row_sizes + col_sizes)
    perm = [i for k in range(d) for i in (k, d + k)]
    tensor = tensor.transpose(perm).reshape([r * c for r, c in zip(row_sizes, col_sizes)])
    vec = tt_from_dense(tensor, policy)
    cores = [
        c.reshape(c.shape[0], row_sizes[k], col_sizes[k], c.shape[2])
        for k, c in enumerate(vec.cores)
    ]
    return TtOperator(cores)


def op_random(row_sizes, col_sizes, ranks, rng) -> TtOperator:
    d = len(row_sizes)
    if np.isscalar(ranks):
        ranks = [1] + [int(ranks)] * (d - 1) + [1]
    cores = [
        rng.standard_normal((ranks[k], row_sizes[k], col_sizes[k], ranks[k + 1]))
        for k in range(d)
    ]
    return TtOperator(cores)


# ---------------------------------------------------------------------------
# algebra


def _require_same_modes(x: TtVector, y: TtVector):
    if x.mode_sizes != y.mode_sizes:
        raise TtShapeError(f"mode sizes differ: {x.mode_sizes} vs {y.mode_sizes}")


def tt_add(x: TtVector, y: TtVector) -> TtVector:
    """Exact pointwise sum; interior ranks add (block-diagonal cores)."""
    _require_same_modes(x, y)
    d = x.ndim
    if d == 1:
        return TtVector([x.cores[0] + y.cores[0]])
    cores = []
    for k in range(d):
        xc, yc = x.cores[k], y.cores[k]
        rx1, n, rx2 = xc.shape
        ry1, _, ry2 = yc.shape
        if k == 0:
            c = np.concatenate([xc, yc], axis=2)
        elif k == d - 1:
            c = np.concatenate([xc, yc], axis=0)
        else:
            c = np.zeros((rx1 + ry1, n, rx2 + ry2))
            c[:rx1, :, :rx2] = xc
            c[rx1:, :, rx2:] = yc
        cores.append(c)
    return TtVector(cores)


def tt_scale(x: TtVector, alpha: float) -> TtVector:
    cores = list(x.cores)
    cores[0] = cores[0] * float(alpha)
    return TtVector(cores)


def tt_hadamard(x: TtVector, y: TtVector) -> TtVector:
    """Elementwise product; interior ranks multiply."""
    _require_same_modes(x, y)
    cores = []
    for xc, yc in zip(x.cores, y.cores):
        rx1, n, rx2 = xc.shape
        ry1, _, ry2 = yc.shape
        c = np.einsum("anb,cnd->acnbd", xc, yc).reshape(rx1 * ry1, n, rx2 * ry2)
        cores.append(c)
    return TtVector(cores)


def tt_dot(x: TtVector, y: TtVector) -> float:
    """Dense inner product sum_i F(i) G(i), contracted two cores at a time."""
    _require_same_modes(x, y)
    r = np.ones((1, 1))
    for xc, yc in zip(x.cores, y.cores):
        # r[a, c] carries the contraction of all previous modes
        r = np.einsum("ac,anb,cnd->bd", r, xc, yc)
    return float(r[0, 0])


def tt_norm(x: TtVector) -> float:
    return float(np.sqrt(max(tt_dot(x, x), 0.0)))


def tt_apply(a: TtOperator, x: TtVector) -> TtVector:
    """Operator application; output ranks are products R_k * r_k."""
    if a.col_sizes != x.mode_sizes:
        raise TtShapeError(
            f"operator column sizes {a.col_sizes} do not match vector modes {x.mode_sizes}"
        )
    cores = []
    for ac, xc in zip(a.cores, x.cores):
        R1, n, m, R2 = ac.shape
        r1, _, r2 = xc.shape
        c = np.einsum("RnmS,amb->RanSb", ac, xc).reshape(R1 * r1, n, R2 * r2)
        cores.append(c)
    return TtVector(cores)


def tt_eval_indexed(x: TtVector, indices) -> np.ndarray:
    """Evaluate the TT at a batch of integer index tuples, shape (B, d) -> (B,)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim == 1:
        indices = indices[None, :]
    if indices.shape[1] != x.ndim:
        raise TtShapeError(f"expected {x.ndim} indices per point, got {indices.shape[1]}")
    vals = x.cores[0][:, indices[:, 0], :].transpose(1, 0, 2)  # (B, 1, r1)
    for k in range(1, x.ndim):
        slab = x.cores[k][:, indices[:, k], :].transpose(1, 0, 2)  # (B, r_k, r_{k+1})
        vals = np.matmul(vals, slab)
    return vals[:, 0, 0]


# ---------------------------------------------------------------------------
# rounding


def tt_round(
    x: TtVector, policy: TruncationPolicy = TruncationPolicy()
) -> tuple[TtVector, RoundingInfo]:
    """Quasi-optimal TT recompression.

    Right-to-left QR orthogonalization followed by a left-to-right truncated-SVD
    sweep; each bond gets a tail budget of tol*||x||/sqrt(d-1) so the total
    relative error stays below ``policy.rel_tolerance``.  The max_rank cap binds
    silently; the achieved error estimate is reported in RoundingInfo.
    """
    d = x.ndim
    cores = [c.copy() for c in x.cores]
    if d == 1:
        return TtVector(cores), RoundingInfo()

    # right-to-left orthogonalization (LQ): leaves cores[0] holding the norm
    for k in range(d - 1, 0, -1):
        r1, n, r2 = cores[k].shape
        mat = cores[k].reshape(r1, n * r2)
        q, rfac = np.linalg.qr(mat.T)  # mat = rfac.T @ q.T
        rnew = q.shape[1]
        cores[k] = q.T.reshape(rnew, n, r2)
        cores[k - 1] = np.einsum("anb,bc->anc", cores[k - 1], rfac.T)

    norm = np.linalg.norm(cores[0])
    if norm == 0.0:
        return tt_zeros(x.mode_sizes), RoundingInfo()
    budget = policy.rel_tolerance * norm / np.sqrt(d - 1)

    capped = False
    err_sq = 0.0
    for k in range(d - 1):
        r1, n, r2 = cores[k].shape
        mat = cores[k].reshape(r1 * n, r2)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = _rank_from_singvals(s, budget, policy.max_rank)
        if r < s.size and s[r:].size and np.sum(s[r:] ** 2) > budget**2:
            capped = True
        err_sq += float(np.sum(s[r:] ** 2))
        cores[k] = u[:, :r].reshape(r1, n, r)
        carry = s[:r, None] * vt[:r]
        cores[k + 1] = np.einsum("ab,bnc->anc", carry, cores[k + 1])
    info = RoundingInfo(
        achieved_rel_error=float(np.sqrt(err_sq) / norm), rank_capped=capped
    )
    return TtVector(cores), info


def tt_round_value(x: TtVector, policy: TruncationPolicy = TruncationPolicy()) -> TtVector:
    """tt_round discarding the diagnostics."""
    return tt_round(x, policy)[0]


# ---------------------------------------------------------------------------
# ALS linear solver


@dataclass
class AlsInfo:
    """Per-sweep relative residuals and flags from als_solve."""

    residuals: list = field(default_factory=list)
    converged: bool = False
    regularized: bool = False


def _als_project_operator(phi_left, a_core, phi_right, core):
    """Apply the local operator <frame, A frame> to a trial core."""
    # phi_left: (rx, RA, rx), a_core: (RA, n, m, RB), phi_right: (rx2, RB, rx2)
    w = np.einsum("xay,ynb->xanb", phi_left, core)
    w = np.einsum("anmb,xamc->xnbc", a_core, w)
    w = np.einsum("xncb,zbc->xnz", w, phi_right)
    return w


def als_solve(
    a: TtOperator,
    b: TtVector,
    x0: TtVector,
    sweeps: int = 10,
    policy: TruncationPolicy = TruncationPolicy(),
    dense_local_cap: int = 4096,
    rel_residual_tol: float = 1e-10,
) -> tuple[TtVector, AlsInfo]:
    """Alternating least squares for A x = b with A symmetric positive definite.

    One sweep is a left-to-right pass over the cores; each local system
    A_k f^(k) = b_k is assembled through the orthogonal frame of the remaining
    cores and solved densely up to ``dense_local_cap`` unknowns (conjugate
    gradients above that).  Ranks of the iterate stay those of ``x0``.
    """
    if a.col_sizes != b.mode_sizes or x0.mode_sizes != b.mode_sizes:
        raise TtShapeError("operator, right-hand side and initial guess shapes differ")
    d = b.ndim
    info = AlsInfo()
    bnorm = tt_norm(b)
    if bnorm == 0.0:
        info.converged = True
        info.residuals.append(0.0)
        return tt_zeros(b.mode_sizes), info

    cores = [c.copy() for c in x0.cores]

    # right-orthogonalize the iterate so frames are orthonormal
    for k in range(d - 1, 0, -1):
        r1, n, r2 = cores[k].shape
        q, rfac = np.linalg.qr(cores[k].reshape(r1, n * r2).T)
        cores[k] = q.T.reshape(-1, n, r2)
        cores[k - 1] = np.einsum("anb,bc->anc", cores[k - 1], rfac.T)

    # environment tensors for <frame, A frame> and <frame, b>
    phiA_left = [np.ones((1, 1, 1))] + [None] * d
    phib_left = [np.ones((1, 1))] + [None] * d
    phiA_right = [None] * d + [np.ones((1, 1, 1))]
    phib_right = [None] * d + [np.ones((1, 1))]
    for k in range(d - 1, 0, -1):
        xc, ac, bc = cores[k], a.cores[k], b.cores[k]
        phiA_right[k] = np.einsum(
            "xnz,anmb,ymw,zbw->xay", xc, ac, xc, phiA_right[k + 1]
        )
        phib_right[k] = np.einsum("xnz,ynw,zw->xy", xc, bc, phib_right[k + 1])

    def local_solve(k):
        rx1, n, rx2 = cores[k].shape
        size = rx1 * n * rx2
        rhs = np.einsum(
            "xy,ynb,zb->xnz", phib_left[k], b.cores[k], phib_right[k + 1]
        ).reshape(size)
        if size <= dense_local_cap:
            mat = np.einsum(
                "xay,anmb,zbw->xnzymw", phiA_left[k], a.cores[k], phiA_right[k + 1]
            ).reshape(size, size)
            try:
                sol = np.linalg.solve(mat, rhs)
                if not np.all(np.isfinite(sol)):
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                shift = 1e-12 * np.linalg.norm(mat) + 1e-300
                sol = np.linalg.solve(mat + shift * np.eye(size), rhs)
                info.regularized = True
        else:
            from scipy.sparse.linalg import LinearOperator, cg

            def matvec(v):
                c = v.reshape(rx1, n, rx2)
                return _als_project_operator(
                    phiA_left[k], a.cores[k], phiA_right[k + 1], c
                ).reshape(size)

            op = LinearOperator((size, size), matvec=matvec)
            sol, _ = cg(op, rhs, x0=cores[k].reshape(size), rtol=1e-12, maxiter=400)
        cores[k] = sol.reshape(rx1, n, rx2)

    best = None
    best_res = np.inf
    for sweep in range(sweeps):
        # left-to-right solves, orthogonal center moving right
        for k in range(d):
            local_solve(k)
            if k < d - 1:
                rx1, n, rx2 = cores[k].shape
                q, rfac = np.linalg.qr(cores[k].reshape(rx1 * n, rx2))
                cores[k] = q.reshape(rx1, n, -1)
                cores[k + 1] = np.einsum("ab,bnc->anc", rfac, cores[k + 1])
                phiA_left[k + 1] = np.einsum(
                    "xay,anmb,xnz,ymw->zbw", phiA_left[k], a.cores[k], cores[k], cores[k]
                )
                phib_left[k + 1] = np.einsum(
                    "xy,xnz,ynw->zw", phib_left[k], cores[k], b.cores[k]
                )

        # right-to-left solves, center moving back
        for k in range(d - 1, -1, -1):
            local_solve(k)
            if k > 0:
                r1, n, r2 = cores[k].shape
                q, rfac = np.linalg.qr(cores[k].reshape(r1, n * r2).T)
                cores[k] = q.T.reshape(-1, n, r2)
                cores[k - 1] = np.einsum("anb,bc->anc", cores[k - 1], rfac.T)
                xc, ac, bc = cores[k], a.cores[k], b.cores[k]
                phiA_right[k] = np.einsum(
                    "xnz,anmb,ymw,zbw->xay", xc, ac, xc, phiA_right[k + 1]
                )
                phib_right[k] = np.einsum("xnz,ynw,zw->xy", xc, bc, phib_right[k + 1])

        xiter = TtVector(cores)
        resid = tt_add(tt_apply(a, xiter), tt_scale(b, -1.0))
        res = tt_norm(resid) / bnorm
        info.residuals.append(res)
        if res < best_res:
            best_res = res
            best = xiter
        if res <= rel_residual_tol:
            info.converged = True
            break

    return best, info


# ---------------------------------------------------------------------------
# serialization: "TTV1" binary container


def save_ttv(x: TtVector, fh) -> None:
    """Write the TT to a binary stream: magic, d, mode sizes, ranks, cores."""
    own = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "wb")
        own = True
    try:
        fh.write(_TTV_MAGIC)
        fh.write(struct.pack("<q", x.ndim))
        fh.write(np.asarray(x.mode_sizes, dtype="<i8").tobytes())
        fh.write(np.asarray(x.ranks, dtype="<i8").tobytes())
        for core in x.cores:
            fh.write(np.ascontiguousarray(core, dtype="<f8").tobytes())
    finally:
        if own:
            fh.close()


def load_ttv(fh) -> TtVector:
    own = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "rb")
        own = True
    try:
        magic = fh.read(8)
        if magic != _TTV_MAGIC:
            raise ValueError(f"bad magic header {magic!r}")
        (d,) = struct.unpack("<q", fh.read(8))
        modes = np.frombuffer(fh.read(8 * d), dtype="<i8")
        ranks = np.frombuffer(fh.read(8 * (d + 1)), dtype="<i8")
        cores = []
        for k in range(d):
            cnt = int(ranks[k] * modes[k] * ranks[k + 1])
            buf = fh.read(8 * cnt)
            cores.append(
                np.frombuffer(buf, dtype="<f8").reshape(ranks[k], modes[k], ranks[k + 1])
            )
        return TtVector(cores)
    finally:
        if own:
            fh.close()


def ttv_bytes(x: TtVector) -> bytes:
    buf = io.BytesIO()
    save_ttv(x, buf)
    return buf.getvalue()
