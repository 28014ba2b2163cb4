import io
import itertools

import numpy as np
import pytest

from ttcvar.ttcore import (
    DenseOverflowError,
    TruncationPolicy,
    TtShapeError,
    TtVector,
    als_solve,
    load_ttv,
    op_from_dense,
    op_identity,
    op_random,
    op_to_dense,
    save_ttv,
    tt_add,
    tt_apply,
    tt_dot,
    tt_eval_indexed,
    tt_from_dense,
    tt_hadamard,
    tt_norm,
    tt_ones,
    tt_rank_one,
    tt_random,
    tt_round,
    tt_scale,
    tt_to_dense,
    tt_zeros,
)

TIGHT = TruncationPolicy(1e-12, 128)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# ---------------------------------------------------------------------------
# construction / reconstruction


def test_from_dense_zero_tensor():
    x = tt_from_dense(np.zeros((2, 2, 2)), TIGHT)
    assert x.ranks == (1, 1, 1, 1)
    assert all(np.all(c == 0) for c in x.cores)


def test_from_dense_rank_one():
    a, b, c = np.array([1.0, 2.0]), np.array([3.0, -1.0, 0.5]), np.array([2.0, 4.0])
    dense = np.einsum("i,j,k->ijk", a, b, c)
    x = tt_from_dense(dense, TIGHT)
    assert x.ranks == (1, 1, 1, 1)
    assert rel_err(tt_to_dense(x), dense) < 1e-14


def test_from_dense_roundtrip_random():
    rng = np.random.default_rng(42)
    t = rng.standard_normal((4, 4, 4))
    x = tt_from_dense(t, TIGHT)
    assert rel_err(tt_to_dense(x), t) < 1e-10


def test_from_dense_truncation_error_bound():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((5, 5, 5, 5))
    for tol in [1e-1, 1e-2, 1e-4]:
        x = tt_from_dense(t, TruncationPolicy(tol, 128))
        assert rel_err(tt_to_dense(x), t) <= tol * 1.0000001


def test_to_dense_all_ones_rank_one():
    x = tt_ones((3, 2, 4))
    assert np.all(tt_to_dense(x) == 1.0)


def test_to_dense_single_mode():
    vals = np.array([1.0, -2.0, 3.0])
    x = TtVector([vals.reshape(1, 3, 1)])
    assert np.array_equal(tt_to_dense(x), vals)


def test_dense_cap_enforced():
    x = tt_ones((1024, 1024, 1024))
    with pytest.raises(DenseOverflowError):
        tt_to_dense(x)
    with pytest.raises(DenseOverflowError):
        tt_from_dense(np.zeros(1))  # fine
        tt_from_dense(np.broadcast_to(np.zeros((1,)), (1024, 1024, 1024)))


def test_invariants_rejected():
    with pytest.raises(TtShapeError):
        TtVector([np.zeros((2, 3, 1))])  # leading rank != 1
    with pytest.raises(TtShapeError):
        TtVector([np.zeros((1, 3, 2)), np.zeros((3, 3, 1))])  # bond mismatch


# ---------------------------------------------------------------------------
# algebra vs dense oracle


def test_add_zero_is_identity():
    rng = np.random.default_rng(0)
    x = tt_random((3, 4, 2), 2, rng)
    z = tt_zeros((3, 4, 2))
    assert rel_err(tt_to_dense(tt_add(x, z)), tt_to_dense(x)) < 1e-14


def test_add_rank_additivity():
    rng = np.random.default_rng(1)
    x = tt_random((3, 3, 3), [1, 2, 2, 1], rng)
    y = tt_random((3, 3, 3), [1, 3, 3, 1], rng)
    s = tt_add(x, y)
    assert s.ranks == (1, 5, 5, 1)


def test_add_then_round_recovers_rank_one():
    factors = [np.array([1.0, 0.5, 2.0]), np.array([0.3, -1.0, 1.0])]
    x = tt_rank_one(factors)
    doubled, _ = tt_round(tt_add(x, x), TIGHT)
    assert doubled.ranks == (1, 1, 1)
    assert rel_err(tt_to_dense(doubled), 2 * tt_to_dense(x)) < 1e-12


def test_hadamard_against_dense():
    rng = np.random.default_rng(2)
    x = tt_random((3, 4, 3), 2, rng)
    y = tt_random((3, 4, 3), 3, rng)
    h = tt_hadamard(x, y)
    assert h.ranks == (1, 6, 6, 1)
    assert rel_err(tt_to_dense(h), tt_to_dense(x) * tt_to_dense(y)) < 1e-10


def test_hadamard_with_ones():
    rng = np.random.default_rng(4)
    x = tt_random((2, 5, 3), 2, rng)
    h = tt_hadamard(x, tt_ones((2, 5, 3)))
    assert rel_err(tt_to_dense(h), tt_to_dense(x)) < 1e-14


def test_hadamard_square_of_rank2():
    rng = np.random.default_rng(5)
    x = tt_random((4, 4), 2, rng)
    sq = tt_hadamard(x, x)
    assert rel_err(tt_to_dense(sq), tt_to_dense(x) ** 2) < 1e-12


def test_dot_one_hot():
    e = tt_rank_one([np.eye(4)[1], np.eye(3)[2]])
    assert tt_dot(e, e) == pytest.approx(1.0)
    assert tt_dot(e, tt_zeros((4, 3))) == 0.0


def test_dot_against_dense():
    rng = np.random.default_rng(6)
    x = tt_random((4, 4, 4), 3, rng)
    y = tt_random((4, 4, 4), 3, rng)
    ref = np.sum(tt_to_dense(x) * tt_to_dense(y))
    assert abs(tt_dot(x, y) - ref) < 1e-10 * abs(ref)


def test_dot_symmetry_bilinearity():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = tt_random((3, 3, 3), 2, rng)
        y = tt_random((3, 3, 3), 3, rng)
        z = tt_random((3, 3, 3), 2, rng)
        a, b = rng.standard_normal(2)
        lhs = tt_dot(tt_add(tt_scale(x, a), tt_scale(z, b)), y)
        rhs = a * tt_dot(x, y) + b * tt_dot(z, y)
        scale = max(abs(lhs), abs(rhs), 1.0)
        assert abs(lhs - rhs) < 1e-12 * scale
        assert abs(tt_dot(x, y) - tt_dot(y, x)) < 1e-12 * scale


# ---------------------------------------------------------------------------
# rounding


def test_round_tolerance_bound_random():
    rng = np.random.default_rng(8)
    for tol in [1e-2, 1e-6]:
        x = tt_random((4, 4, 4, 4), 5, rng)
        nrm = tt_norm(x)
        r, info = tt_round(x, TruncationPolicy(tol, 128))
        diff = tt_norm(tt_add(x, tt_scale(r, -1.0)))
        assert diff <= tol * nrm * 1.0000001
        assert info.achieved_rel_error <= tol * 1.0000001


def test_round_idempotent_on_minimal():
    rng = np.random.default_rng(9)
    x = tt_rank_one([rng.standard_normal(4) for _ in range(3)])
    r, _ = tt_round(x, TruncationPolicy(1e-15, 16))
    assert r.ranks == x.ranks
    assert rel_err(tt_to_dense(r), tt_to_dense(x)) < 1e-12


def test_round_zero():
    r, _ = tt_round(tt_zeros((3, 3, 3)), TIGHT)
    assert r.ranks == (1, 1, 1, 1)
    assert np.all(tt_to_dense(r) == 0)


def test_round_respects_max_rank_cap():
    rng = np.random.default_rng(10)
    x = tt_random((5, 5, 5), 4, rng)
    r, info = tt_round(x, TruncationPolicy(1e-14, 2))
    assert max(r.ranks) <= 2
    assert info.rank_capped


# ---------------------------------------------------------------------------
# operator application


def test_apply_identity():
    rng = np.random.default_rng(11)
    x = tt_random((3, 4, 2), 2, rng)
    y = tt_apply(op_identity((3, 4, 2)), x)
    assert rel_err(tt_to_dense(y), tt_to_dense(x)) < 1e-14


def test_apply_diagonal_equals_hadamard():
    rng = np.random.default_rng(12)
    g = tt_random((3, 3, 3), 2, rng)
    x = tt_random((3, 3, 3), 2, rng)
    diag_cores = []
    for c in g.cores:
        r1, n, r2 = c.shape
        dc = np.zeros((r1, n, n, r2))
        for i in range(n):
            dc[:, i, i, :] = c[:, i, :]
        diag_cores.append(dc)
    from ttcvar.ttcore import TtOperator

    a = TtOperator(diag_cores)
    assert rel_err(tt_to_dense(tt_apply(a, x)), tt_to_dense(tt_hadamard(g, x))) < 1e-12


def test_apply_against_dense_matrix():
    rng = np.random.default_rng(13)
    a = op_random((3, 3), (4, 2), 2, rng)
    x = tt_random((4, 2), 2, rng)
    y = tt_apply(a, x)
    ref = (op_to_dense(a) @ tt_to_dense(x).reshape(-1)).reshape(3, 3)
    assert rel_err(tt_to_dense(y), ref) < 1e-12
    assert y.ranks == tuple(ra * rx for ra, rx in zip(a.ranks, x.ranks))


def test_rank_one_operator_on_rank_one():
    rng = np.random.default_rng(14)
    a = op_random((3, 3), (3, 3), 1, rng)
    x = tt_random((3, 3), 1, rng)
    assert tt_apply(a, x).ranks == (1, 1, 1)


# ---------------------------------------------------------------------------
# batch evaluation


def test_eval_indexed_matches_dense():
    rng = np.random.default_rng(15)
    x = tt_random((4, 3, 5), 3, rng)
    dense = tt_to_dense(x)
    idx = np.array([[i, j, k] for i, j, k in itertools.product(range(4), range(3), range(5))])
    vals = tt_eval_indexed(x, idx)
    assert np.allclose(vals, dense.reshape(-1), atol=1e-12)


# ---------------------------------------------------------------------------
# ALS solver


def test_als_identity_returns_rhs_one_sweep():
    rng = np.random.default_rng(16)
    b = tt_random((3, 3, 3), 2, rng)
    x0 = tt_random((3, 3, 3), 2, rng)
    x, info = als_solve(op_identity((3, 3, 3)), b, x0, sweeps=1)
    assert tt_norm(tt_add(x, tt_scale(b, -1.0))) / tt_norm(b) < 1e-10


def test_als_zero_rhs():
    rng = np.random.default_rng(17)
    x0 = tt_random((3, 3), 2, rng)
    x, info = als_solve(op_identity((3, 3)), tt_zeros((3, 3)), x0, sweeps=3)
    assert tt_norm(x) < 1e-12
    assert info.converged


def test_als_spd_matches_dense_solve():
    rng = np.random.default_rng(18)
    c = op_random((3, 3), (3, 3), 2, rng)
    cd = op_to_dense(c)
    ad = cd @ cd.T + 3.0 * np.eye(9)
    a = op_from_dense(ad, (3, 3), (3, 3), TIGHT)
    b = tt_random((3, 3), 2, rng)
    ref = np.linalg.solve(ad, tt_to_dense(b).reshape(-1)).reshape(3, 3)
    x0 = tt_random((3, 3), 3, rng)
    x, info = als_solve(a, b, x0, sweeps=10)
    assert rel_err(tt_to_dense(x), ref) < 1e-6


def test_als_residual_monotone_on_spd():
    rng = np.random.default_rng(19)
    c = op_random((3, 3, 3), (3, 3, 3), 2, rng)
    cd = op_to_dense(c)
    ad = cd @ cd.T + 5.0 * np.eye(27)
    a = op_from_dense(ad, (3, 3, 3), (3, 3, 3), TruncationPolicy(1e-12, 64))
    b = tt_random((3, 3, 3), 2, rng)
    x0 = tt_random((3, 3, 3), 2, rng)
    x, info = als_solve(a, b, x0, sweeps=6, rel_residual_tol=0.0)
    res = info.residuals
    assert all(res[i + 1] <= res[i] + 1e-12 for i in range(len(res) - 1))


# ---------------------------------------------------------------------------
# serialization


def test_ttv_roundtrip():
    rng = np.random.default_rng(20)
    x = tt_random((4, 3, 5), 3, rng)
    buf = io.BytesIO()
    save_ttv(x, buf)
    buf.seek(0)
    y = load_ttv(buf)
    assert x.mode_sizes == y.mode_sizes
    assert x.ranks == y.ranks
    for cx, cy in zip(x.cores, y.cores):
        assert np.array_equal(cx, cy)


def test_ttv_magic_header():
    rng = np.random.default_rng(21)
    x = tt_random((2, 2), 1, rng)
    buf = io.BytesIO()
    save_ttv(x, buf)
    raw = buf.getvalue()
    assert raw[:8] == b"TTV1\x00\x00\x00\x00"
    with pytest.raises(ValueError):
        load_ttv(io.BytesIO(b"NOTMAGIC" + raw[8:]))


# ---------------------------------------------------------------------------
# randomized dense-equivalence sweep (the rank bookkeeping invariant)


def test_random_instances_dense_equivalence():
    rng = np.random.default_rng(99)
    for _ in range(40):
        d = int(rng.integers(2, 5))
        modes = tuple(int(rng.integers(2, 6)) for _ in range(d))
        x = tt_random(modes, int(rng.integers(1, 5)), rng)
        y = tt_random(modes, int(rng.integers(1, 5)), rng)
        dx, dy = tt_to_dense(x), tt_to_dense(y)
        assert rel_err(tt_to_dense(tt_add(x, y)), dx + dy) < 1e-10
        assert rel_err(tt_to_dense(tt_hadamard(x, y)), dx * dy) < 1e-10
        ref = np.sum(dx * dy)
        assert abs(tt_dot(x, y) - ref) <= 1e-10 * max(1.0, abs(ref))
        r, _ = tt_round(x, TruncationPolicy(1e-10, 64))
        # stored ranks always equal actual core dimensions
        for k, c in enumerate(r.cores):
            assert c.shape[0] == r.ranks[k] and c.shape[2] == r.ranks[k + 1]
