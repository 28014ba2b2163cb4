"""Rank-adaptive cross interpolation of black-box functions into TT format.

The driver alternates backward and forward half-sweeps over the modes.  At
mode k it samples the function on a Cartesian cross

    Xi_k = Xi_{<k} x Xi^(k) x Xi_{>k},

selects quasi-maximal-volume rows/columns of the sampled unfolding (maxvol on
an orthonormal basis of its dominant singular subspace), and extends the
nested index sets accordingly.  After the sets settle, the interpolant is
assembled in skeleton form: sampled cores glued with inverses of the
intersection matrices, which makes the TT reproduce the function exactly on
every final sample set.

Oracles receive a whole batch of points at once; repeated points are served
from a cache so the evaluation count matches the number of distinct samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ttcore import (
    TruncationPolicy,
    TtVector,
    tt_add,
    tt_dot,
    tt_round_value,
    tt_scale,
    tt_zeros,
)


class CrossEvaluationError(RuntimeError):
    """The oracle failed; carries the integer index tuples of the batch."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


@dataclass(frozen=True)
class CrossConfig:
    rel_tolerance: float = 1e-6
    max_sweeps: int = 12
    initial_rank: int = 2
    rank_increment: int = 2
    maxvol_tolerance: float = 5e-2
    seed: int = 0
    max_rank: int = 512
    verbose: bool = False

    def __post_init__(self):
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_sweeps < 1 or self.initial_rank < 1:
            raise ValueError("max_sweeps and initial_rank must be >= 1")
        if self.maxvol_tolerance < 0:
            raise ValueError("maxvol_tolerance must be >= 0")


@dataclass
class NestedIndexSets:
    """Nested left/right sample sets with their evaluated frame matrices.

    ``left_sets[k]`` holds the tuples of Xi_{<k} as an integer array
    (r_k, k); ``right_sets[k]`` holds Xi_{>k} as (r_{k+1}, d-1-k).  Frames are
    aligned row-wise with the tuples: after assembly the left partial products
    reduce to unit vectors (identity frames) and the right frames carry the
    evaluated partial products of the interpolant.
    """

    mode_sizes: tuple
    left_sets: list
    right_sets: list
    left_frames: list
    right_frames: list

    @property
    def ndim(self) -> int:
        return len(self.mode_sizes)

    @property
    def ranks(self) -> tuple:
        d = self.ndim
        r = [1] + [self.left_sets[k].shape[0] for k in range(1, d)] + [1]
        return tuple(r)

    def validate_nested(self) -> None:
        """Raise AssertionError if nestedness or cardinality bookkeeping broke."""
        d = self.ndim
        assert self.left_sets[0].shape == (1, 0)
        assert self.right_sets[d - 1].shape == (1, 0)
        for k in range(1, d):
            lset, prev = self.left_sets[k], self.left_sets[k - 1]
            assert lset.shape[1] == k
            prefixes = {row.tobytes() for row in prev}
            for row in lset:
                assert row[:-1].tobytes() in prefixes, "left nestedness violated"
            assert lset.shape[0] == self.right_sets[k - 1].shape[0]
        for k in range(d - 2, -1, -1):
            rset, nxt = self.right_sets[k], self.right_sets[k + 1]
            assert rset.shape[1] == d - 1 - k
            suffixes = {row.tobytes() for row in nxt}
            for row in rset:
                assert row[1:].tobytes() in suffixes, "right nestedness violated"


@dataclass
class CrossResult:
    tt: TtVector
    sets: NestedIndexSets
    converged: bool
    n_evals: int
    final_change: float
    sweep_log: list = field(default_factory=list)
    tt_raw: TtVector | None = None  # skeleton form before the final recompression

    def log_csv(self) -> str:
        lines = ["sweep,direction,ranks,evals,change"]
        for rec in self.sweep_log:
            ranks = "x".join(str(r) for r in rec["ranks"])
            lines.append(
                f"{rec['sweep']},{rec['direction']},{ranks},{rec['evals']},{rec['change']:.3e}"
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# maxvol


def maxvol(m: np.ndarray, tol: float = 5e-2, max_iters: int = 500) -> np.ndarray:
    """Select r rows of a tall n x r matrix with quasi-maximal |det|.

    On return the dominance bound max |(M @ M[I]^-1)_ij| <= 1 + tol holds.
    A rank-deficient input is perturbed once with noise at 1e-14 relative
    scale; if it stays singular, LinAlgError propagates.
    """
    m = np.asarray(m, dtype=np.float64)
    n, r = m.shape
    if n < r:
        raise ValueError(f"need at least as many rows as columns, got {m.shape}")
    if n == r:
        return np.arange(n)

    def _attempt(mat):
        from scipy.linalg import lu_factor

        lu, piv = lu_factor(mat)
        if np.min(np.abs(np.diag(lu)[: min(n, r)])) == 0.0:
            raise np.linalg.LinAlgError("exactly singular pivot")
        order = np.arange(n)
        for i, p in enumerate(piv):
            order[i], order[p] = order[p], order[i]
        idx = order[:r].copy()
        b = np.linalg.solve(mat[idx].T, mat.T).T  # n x r, rows idx give identity
        for _ in range(max_iters):
            flat = np.argmax(np.abs(b))
            i, j = np.unravel_index(flat, b.shape)
            if np.abs(b[i, j]) <= 1.0 + tol:
                break
            # swap row idx[j] -> i and rank-1 update of b
            bj = b[:, j].copy()
            bi = b[i, :].copy()
            bi[j] -= 1.0
            b -= np.outer(bj, bi / b[i, j])
            idx[j] = i
        return idx

    try:
        return _attempt(m)
    except np.linalg.LinAlgError:
        scale = np.max(np.abs(m)) or 1.0
        rng = np.random.default_rng(0x5EED)
        return _attempt(m + 1e-14 * scale * rng.standard_normal(m.shape))


def _select_indices(mat, target, mv_tol, rng):
    """maxvol row selection from the dominant singular basis, padded randomly.

    Returns an index array of length min(target, #rows); when the numerical
    rank of ``mat`` is below target, the remaining rows are drawn at random
    (this is the rank-enrichment mechanism).
    """
    pool = mat.shape[0]
    target = min(target, pool)
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return rng.choice(pool, size=target, replace=False) if target else np.arange(0)
    numrank = int(np.sum(s > s[0] * 1e-13))
    take = min(target, numrank)
    idx = maxvol(u[:, :take], tol=mv_tol)
    if take < target:
        rest = np.setdiff1d(np.arange(pool), idx)
        extra = rng.choice(rest, size=target - take, replace=False)
        idx = np.concatenate([idx, extra])
    return idx


def cross_update_sets(
    sets: NestedIndexSets,
    k: int,
    overline_frame: np.ndarray,
    direction: str,
    target_rank: int,
    maxvol_tol: float = 5e-2,
    rng=None,
) -> np.ndarray:
    """One nestedness-preserving index-set update from a sampled frame matrix.

    direction "left": rows of ``overline_frame`` enumerate Xi_{<k} x Xi^(k) in
    C order and the selected rows become Xi_{<k+1}.  direction "right":
    rows enumerate Xi^(k) x Xi_{>k} and the selection becomes Xi_{>k-1}.
    Returns the selected row indices; the sets and frames are updated in place.
    """
    rng = rng or np.random.default_rng(0)
    n = sets.mode_sizes[k]
    idx = _select_indices(overline_frame, target_rank, maxvol_tol, rng)
    if direction == "left":
        base = sets.left_sets[k]
        pairs = np.stack(np.unravel_index(idx, (base.shape[0], n)), axis=1)
        sets.left_sets[k + 1] = np.hstack(
            [base[pairs[:, 0]], pairs[:, 1:2].astype(np.int64)]
        )
        sets.left_frames[k + 1] = overline_frame[idx]
    elif direction == "right":
        base = sets.right_sets[k]
        pairs = np.stack(np.unravel_index(idx, (n, base.shape[0])), axis=1)
        sets.right_sets[k - 1] = np.hstack(
            [pairs[:, 0:1].astype(np.int64), base[pairs[:, 1]]]
        )
        sets.right_frames[k - 1] = overline_frame[idx]
    else:
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    return idx


def build_frame(sets: NestedIndexSets, k: int, basis: np.ndarray | None = None) -> np.ndarray:
    """Assemble the square local frame F_{!=k} = F_{<k} (x) l(Xi^(k)) (x) F_{>k}.

    With the Lagrange basis at the grid nodes (the default) the middle factor
    is the identity.
    """
    n = sets.mode_sizes[k]
    if basis is None:
        basis = np.eye(n)
    basis = np.asarray(basis, dtype=np.float64)
    lf = sets.left_frames[k]
    rf = sets.right_frames[k]
    if lf.shape[0] != sets.left_sets[k].shape[0] or rf.shape[0] != sets.right_sets[k].shape[0]:
        raise RuntimeError("stale frames: cardinalities do not match the index sets")
    return np.kron(lf, np.kron(basis, rf))


# ---------------------------------------------------------------------------
# evaluation plumbing


class _CachedOracle:
    def __init__(self, f_idx):
        self.f = f_idx
        self.cache = {}
        self.n_evals = 0

    def __call__(self, indices: np.ndarray) -> np.ndarray:
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        out = np.empty(indices.shape[0])
        miss = []
        keys = [row.tobytes() for row in indices]
        for i, key in enumerate(keys):
            val = self.cache.get(key)
            if val is None:
                miss.append(i)
            else:
                out[i] = val
        if miss:
            sub = indices[miss]
            try:
                vals = np.asarray(self.f(sub), dtype=np.float64).reshape(-1)
            except Exception as exc:  # noqa: BLE001 - annotate and re-raise
                raise CrossEvaluationError(
                    f"oracle failed on a batch of {len(sub)} points", indices=sub
                ) from exc
            if vals.shape[0] != sub.shape[0]:
                raise CrossEvaluationError(
                    f"oracle returned {vals.shape[0]} values for {sub.shape[0]} points",
                    indices=sub,
                )
            if not np.all(np.isfinite(vals)):
                bad = sub[~np.isfinite(vals)]
                raise CrossEvaluationError("oracle returned non-finite values", indices=bad)
            self.n_evals += sub.shape[0]
            for i, v in zip(miss, vals):
                self.cache[keys[i]] = float(v)
                out[i] = v
        return out


def _cross_block(ev, lset, k, rset, n) -> np.ndarray:
    """Sample f on Xi_{<k} x Xi^(k) x Xi_{>k}; returns (|L|, n, |R|)."""
    la, lc = lset.shape[0], rset.shape[0]
    total = la * n * lc
    d = lset.shape[1] + 1 + rset.shape[1]
    idx = np.empty((total, d), dtype=np.int64)
    if lset.shape[1]:
        idx[:, : lset.shape[1]] = np.repeat(lset, n * lc, axis=0)
    idx[:, lset.shape[1]] = np.tile(np.repeat(np.arange(n), lc), la)
    if rset.shape[1]:
        idx[:, lset.shape[1] + 1 :] = np.tile(rset, (la * n, 1))
    return ev(idx).reshape(la, n, lc)


def _nested_random_sets(mode_sizes, ranks, rng):
    """Random nested left and right index sets at the requested ranks."""
    d = len(mode_sizes)
    left = [np.zeros((1, 0), dtype=np.int64)]
    for k in range(1, d):
        base = left[k - 1]
        pool = base.shape[0] * mode_sizes[k - 1]
        take = min(ranks[k], pool)
        sel = rng.choice(pool, size=take, replace=False)
        pairs = np.stack(np.unravel_index(sel, (base.shape[0], mode_sizes[k - 1])), axis=1)
        left.append(np.hstack([base[pairs[:, 0]], pairs[:, 1:2].astype(np.int64)]))
    right = [None] * d
    right[d - 1] = np.zeros((1, 0), dtype=np.int64)
    for k in range(d - 2, -1, -1):
        base = right[k + 1]
        pool = mode_sizes[k + 1] * base.shape[0]
        take = min(ranks[k + 1], pool)
        sel = rng.choice(pool, size=take, replace=False)
        pairs = np.stack(np.unravel_index(sel, (mode_sizes[k + 1], base.shape[0])), axis=1)
        right[k] = np.hstack([pairs[:, 0:1].astype(np.int64), base[pairs[:, 1]]])
    return left, right


def _feasible_ranks(mode_sizes, want, max_rank):
    """Clamp a requested uniform rank to what the tensor shape supports."""
    d = len(mode_sizes)
    r = [1] * (d + 1)
    prod_left = 1
    for b in range(1, d):
        prod_left = min(prod_left * mode_sizes[b - 1], 2**30)
        r[b] = min(want, prod_left, max_rank)
    prod_right = 1
    for b in range(d - 1, 0, -1):
        prod_right = min(prod_right * mode_sizes[b], 2**30)
        r[b] = min(r[b], prod_right)
    return r


def _assemble(ev, mode_sizes, left, right, forward_blocks, forward_sel):
    """Skeleton assembly: glue sampled cores with intersection-matrix inverses."""
    d = len(mode_sizes)
    cores = []
    for k in range(d - 1):
        block = forward_blocks[k]
        la, n, rc = block.shape
        unfolded = block.reshape(la * n, rc)
        glue = unfolded[forward_sel[k]]  # f(Xi_{<k+1} x Xi_{>k}), square
        try:
            solved = np.linalg.solve(glue.T, unfolded.T).T
            if not np.all(np.isfinite(solved)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            solved = np.linalg.lstsq(glue.T, unfolded.T, rcond=1e-12)[0].T
        cores.append(solved.reshape(la, n, rc))
    last = _cross_block(ev, left[d - 1], d - 1, right[d - 1], mode_sizes[d - 1])
    cores.append(last)
    glues = [forward_blocks[k].reshape(-1, forward_blocks[k].shape[2])[forward_sel[k]]
             for k in range(d - 1)]
    return TtVector(cores), glues


def _tt_distance(x, y):
    """||x - y|| via inner products (no dense materialization)."""
    diff = tt_add(x, tt_scale(y, -1.0))
    return np.sqrt(max(tt_dot(diff, diff), 0.0))


def cross_interpolate_indexed(f_idx, mode_sizes, config: CrossConfig) -> CrossResult:
    """TT-cross over index space: the oracle maps (B, d) integer tuples to values."""
    mode_sizes = tuple(int(n) for n in mode_sizes)
    d = len(mode_sizes)
    rng = np.random.default_rng(config.seed)
    ev = _CachedOracle(f_idx)

    if d == 1:
        vals = ev(np.arange(mode_sizes[0], dtype=np.int64)[:, None])
        sets = NestedIndexSets(
            mode_sizes,
            [np.zeros((1, 0), dtype=np.int64)],
            [np.zeros((1, 0), dtype=np.int64)],
            [np.ones((1, 1))],
            [np.ones((1, 1))],
        )
        tt1 = TtVector([vals.reshape(1, -1, 1)])
        return CrossResult(tt1, sets, True, ev.n_evals, 0.0, tt_raw=tt1)

    ranks = _feasible_ranks(mode_sizes, config.initial_rank, config.max_rank)
    left, right = _nested_random_sets(mode_sizes, ranks, rng)
    sets = NestedIndexSets(mode_sizes, left, right, [None] * d, [None] * d)

    prev_tt = None
    result_tt = None
    glues = None
    change = np.inf
    converged = False
    log = []

    for sweep in range(config.max_sweeps):
        if sweep > 0 and not converged:
            want = [r + config.rank_increment for r in ranks]
            prod_left = 1
            for b in range(1, d):
                prod_left = min(prod_left * mode_sizes[b - 1], 2**30)
                want[b] = min(want[b], prod_left, config.max_rank)
            prod_right = 1
            for b in range(d - 1, 0, -1):
                prod_right = min(prod_right * mode_sizes[b], 2**30)
                want[b] = min(want[b], prod_right)
            want[0] = want[d] = 1
            ranks = want

        # backward half-sweep: refresh right sets
        for k in range(d - 1, 0, -1):
            block = _cross_block(ev, sets.left_sets[k], k, sets.right_sets[k], mode_sizes[k])
            la = block.shape[0]
            overline = block.reshape(la, -1).T  # rows enumerate Xi^(k) x Xi_{>k}
            cross_update_sets(sets, k, overline, "right", ranks[k], config.maxvol_tolerance, rng)

        # forward half-sweep: refresh left sets, keep the blocks for assembly
        forward_blocks = [None] * (d - 1)
        forward_sel = [None] * (d - 1)
        for k in range(d - 1):
            block = _cross_block(ev, sets.left_sets[k], k, sets.right_sets[k], mode_sizes[k])
            overline = block.reshape(-1, block.shape[2])
            sel = cross_update_sets(
                sets, k, overline, "left", ranks[k + 1], config.maxvol_tolerance, rng
            )
            forward_blocks[k] = block
            forward_sel[k] = sel

        tt, glues = _assemble(ev, mode_sizes, sets.left_sets, sets.right_sets,
                              forward_blocks, forward_sel)
        norm = np.sqrt(max(tt_dot(tt, tt), 0.0))
        if norm == 0.0:
            change = 0.0 if prev_tt is None else _tt_distance(tt, prev_tt)
            result_tt = tt
            log.append(
                {"sweep": sweep, "direction": "full", "ranks": tuple(ranks),
                 "evals": ev.n_evals, "change": change}
            )
            if prev_tt is not None and change == 0.0:
                converged = True
                break
            prev_tt = tt
            continue
        change = _tt_distance(tt, prev_tt) / norm if prev_tt is not None else np.inf
        result_tt = tt
        prev_tt = tt
        ranks = list(tt.ranks)  # realized ranks after selection clamps
        log.append(
            {"sweep": sweep, "direction": "full", "ranks": tuple(ranks),
             "evals": ev.n_evals, "change": change}
        )
        if config.verbose:
            print(f"cross sweep {sweep}: ranks={tuple(ranks)} evals={ev.n_evals} "
                  f"change={change:.3e}")
        if change <= config.rel_tolerance:
            converged = True
            break

    # canonical frames of the assembled interpolant: left partial products are
    # unit vectors, right partial products are the glue columns
    for k in range(d):
        sets.left_frames[k] = np.eye(sets.left_sets[k].shape[0])
        if k < d - 1:
            sets.right_frames[k] = glues[k].T.copy()
        else:
            sets.right_frames[k] = np.ones((1, 1))

    round_tol = max(1e-14, min(0.01 * config.rel_tolerance, 1e-8))
    tidy = tt_round_value(result_tt, TruncationPolicy(round_tol, config.max_rank))
    return CrossResult(
        tidy, sets, converged, ev.n_evals, float(change), log, tt_raw=result_tt
    )


def cross_interpolate(f, grid, config: CrossConfig) -> CrossResult:
    """TT-cross of a function of grid coordinates.

    ``f`` maps a batch of points (B, d) in coordinate space to (B,) values;
    ``grid`` is a TensorGrid whose nodes define the coordinates.
    """

    def f_idx(indices):
        return f(grid.points_from_indices(indices))

    return cross_interpolate_indexed(f_idx, grid.shape, config)


def cross_over_tt(base: TtVector, transform, config: CrossConfig) -> CrossResult:
    """Cross-interpolate transform(base(xi)) by evaluating the cached TT surrogate.

    This is how smoothed quantities are built: the transform sees surrogate
    values, never fresh model solves.
    """
    from .ttcore import tt_eval_indexed

    def f_idx(indices):
        return transform(tt_eval_indexed(base, indices))

    return cross_interpolate_indexed(f_idx, base.mode_sizes, config)
