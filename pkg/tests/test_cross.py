import itertools

import numpy as np
import pytest

from ttcvar.cross import (
    CrossConfig,
    CrossEvaluationError,
    NestedIndexSets,
    build_frame,
    cross_interpolate,
    cross_interpolate_indexed,
    cross_over_tt,
    cross_update_sets,
    maxvol,
)
from ttcvar.quadrature import uniform_grid
from ttcvar.ttcore import tt_eval_indexed, tt_to_dense, ttv_bytes


def dense_of(f, grid):
    out = np.zeros(grid.shape)
    for idx in itertools.product(*(range(n) for n in grid.shape)):
        p = np.array([[grid.nodes(k)[i] for k, i in enumerate(idx)]])
        out[idx] = f(p)[0]
    return out


# ---------------------------------------------------------------------------
# maxvol


def test_maxvol_identity_block():
    m = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    assert sorted(maxvol(m, tol=1e-10)) == [0, 1]


def test_maxvol_square_returns_all_rows():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((4, 4))
    assert sorted(maxvol(m)) == [0, 1, 2, 3]


def test_maxvol_dominance_bound():
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = rng.standard_normal((40, 5))
        tol = 1e-6
        idx = maxvol(m, tol=tol)
        b = np.linalg.solve(m[idx].T, m.T).T
        assert np.max(np.abs(b)) <= 1.0 + tol + 1e-9


def test_maxvol_beats_random_submatrices():
    rng = np.random.default_rng(2)
    base = rng.standard_normal(4)
    m = np.outer(rng.standard_normal(30), base) + 0.05 * rng.standard_normal((30, 4))
    idx = maxvol(m, tol=1e-8)
    best = abs(np.linalg.det(m[idx]))
    for _ in range(100):
        trial = rng.choice(30, size=4, replace=False)
        assert abs(np.linalg.det(m[trial])) <= best * (1 + 1e-9)


def test_maxvol_rank_deficient_perturb_path():
    # exactly repeated rows: full column rank fails without the noise retry
    m = np.ones((6, 2))
    m[:, 1] = np.arange(6.0)
    m[3] = m[0]
    idx = maxvol(m, tol=1e-2)
    assert len(set(idx.tolist())) == 2


def test_maxvol_rejects_wide():
    with pytest.raises(ValueError):
        maxvol(np.ones((2, 3)))


# ---------------------------------------------------------------------------
# cross interpolation: exact recovery oracles


def test_separable_product_exact():
    grid = uniform_grid(3, 5)
    f = lambda p: p[:, 0] * p[:, 1] * p[:, 2]
    res = cross_interpolate(f, grid, CrossConfig(rel_tolerance=1e-12, seed=1))
    assert res.converged
    assert res.tt.ranks == (1, 1, 1, 1)
    dense = dense_of(f, grid)
    assert np.linalg.norm(tt_to_dense(res.tt) - dense) <= 1e-12 * np.linalg.norm(dense)


def test_additive_rank_two_exact():
    grid = uniform_grid(2, 6)
    f = lambda p: p[:, 0] + p[:, 1]
    res = cross_interpolate(f, grid, CrossConfig(rel_tolerance=1e-12, seed=2))
    assert res.tt.ranks == (1, 2, 1)
    dense = dense_of(f, grid)
    assert np.linalg.norm(tt_to_dense(res.tt) - dense) <= 1e-12 * np.linalg.norm(dense)


def test_constant_function():
    grid = uniform_grid(3, 4)
    res = cross_interpolate(
        lambda p: np.full(p.shape[0], 2.75), grid, CrossConfig(rel_tolerance=1e-12, seed=3)
    )
    assert res.tt.ranks == (1, 1, 1, 1)
    assert np.max(np.abs(tt_to_dense(res.tt) - 2.75)) < 1e-12


def test_exact_recovery_of_low_rank_tt():
    # any function that IS a TT of bounded rank is recovered within two sweeps
    rng = np.random.default_rng(4)
    from ttcvar.ttcore import tt_random

    target = tt_random((4, 4, 4, 4), 3, rng)
    f_idx = lambda idx: tt_eval_indexed(target, idx)
    cfg = CrossConfig(rel_tolerance=1e-11, seed=5, initial_rank=3, max_sweeps=2)
    res = cross_interpolate_indexed(f_idx, (4, 4, 4, 4), cfg)
    ref = tt_to_dense(target)
    assert np.linalg.norm(tt_to_dense(res.tt) - ref) <= 1e-10 * np.linalg.norm(ref)


def test_rank_adaptation_reaches_moderate_rank():
    grid = uniform_grid(3, 6)
    f = lambda p: 1.0 / (1.0 + np.sum(p**2, axis=1))
    cfg = CrossConfig(rel_tolerance=1e-9, seed=6, initial_rank=2, max_sweeps=15)
    res = cross_interpolate(f, grid, cfg)
    dense = dense_of(f, grid)
    err = np.linalg.norm(tt_to_dense(res.tt) - dense) / np.linalg.norm(dense)
    assert err < 1e-7
    assert max(res.tt.ranks) >= 3  # grew beyond the initial guess


def test_interpolation_condition_at_final_sets():
    f_idx = lambda idx: np.cos(0.4 * idx[:, 0]) + 0.07 * idx[:, 1] * idx[:, 2]
    res = cross_interpolate_indexed(f_idx, (5, 5, 5), CrossConfig(rel_tolerance=1e-11, seed=7))
    sets, tt = res.sets, res.tt_raw
    for k in range(3):
        lset, rset = sets.left_sets[k], sets.right_sets[k]
        n = 5
        la, lc = lset.shape[0], rset.shape[0]
        idx = np.empty((la * n * lc, 3), dtype=np.int64)
        if lset.shape[1]:
            idx[:, : lset.shape[1]] = np.repeat(lset, n * lc, axis=0)
        idx[:, lset.shape[1]] = np.tile(np.repeat(np.arange(n), lc), la)
        if rset.shape[1]:
            idx[:, lset.shape[1] + 1 :] = np.tile(rset, (la * n, 1))
        vals = f_idx(idx)
        frame = build_frame(sets, k)
        resid = np.linalg.norm(frame @ tt.cores[k].reshape(-1) - vals)
        assert resid <= 1e-10 * np.linalg.norm(vals)


def test_frame_kron_structure_mode_zero():
    f_idx = lambda idx: 1.0 + idx[:, 0] + 2.0 * idx[:, 1]
    res = cross_interpolate_indexed(f_idx, (4, 4), CrossConfig(rel_tolerance=1e-11, seed=8))
    sets = res.sets
    # at k=0 the left set is empty, so the frame is I (x) F_>0
    f0 = build_frame(sets, 0)
    expected = np.kron(np.eye(4), sets.right_frames[0])
    assert np.allclose(f0, expected)


def test_nestedness_and_cardinalities_after_run():
    f_idx = lambda idx: np.exp(-0.1 * np.sum(idx.astype(float) ** 2, axis=1))
    res = cross_interpolate_indexed(f_idx, (4, 4, 4), CrossConfig(rel_tolerance=1e-9, seed=9))
    res.sets.validate_nested()
    assert res.sets.ranks == res.tt_raw.ranks


def test_determinism_same_seed():
    grid = uniform_grid(3, 5)
    f = lambda p: np.sin(p[:, 0] + 2 * p[:, 1]) + p[:, 2] ** 2
    cfg = CrossConfig(rel_tolerance=1e-9, seed=123)
    a = cross_interpolate(f, grid, cfg)
    b = cross_interpolate(f, grid, cfg)
    assert ttv_bytes(a.tt) == ttv_bytes(b.tt)
    assert a.n_evals == b.n_evals


def test_oracle_failure_attaches_points():
    def bad(p):
        raise RuntimeError("model exploded")

    grid = uniform_grid(2, 3)
    with pytest.raises(CrossEvaluationError) as ei:
        cross_interpolate(bad, grid, CrossConfig(seed=0))
    assert ei.value.indices is not None
    assert ei.value.indices.shape[1] == 2


def test_nonconvergence_flag():
    rng = np.random.default_rng(10)
    noise = rng.standard_normal((6, 6, 6))
    f_idx = lambda idx: noise[idx[:, 0], idx[:, 1], idx[:, 2]]
    cfg = CrossConfig(rel_tolerance=1e-14, seed=11, max_sweeps=2, initial_rank=1)
    res = cross_interpolate_indexed(f_idx, (6, 6, 6), cfg)
    assert not res.converged
    assert res.final_change > 1e-14


def test_evaluation_count_scaling():
    # per sweep the sample count at mode k is r_{k-1} * n * r_k
    grid = uniform_grid(4, 5)
    f = lambda p: p[:, 0] + p[:, 1] * p[:, 2] + np.cos(p[:, 3])
    cfg = CrossConfig(rel_tolerance=1e-10, seed=12, initial_rank=3, max_sweeps=8)
    res = cross_interpolate(f, grid, cfg)
    assert res.converged
    # generous envelope: a few sweeps of d * n * r^2 distinct samples
    rmax = max(res.tt.ranks)
    assert res.n_evals <= 4 * 2 * 4 * 5 * max(rmax, 3) ** 2
    assert res.n_evals <= np.prod(grid.shape)  # caching keeps it below the full grid


def test_cross_over_tt_never_calls_model():
    rng = np.random.default_rng(13)
    from ttcvar.ttcore import tt_random

    base = tt_random((4, 4, 4), 2, rng)
    res = cross_over_tt(base, lambda v: np.tanh(v), CrossConfig(rel_tolerance=1e-10, seed=14))
    ref = np.tanh(tt_to_dense(base))
    assert np.linalg.norm(tt_to_dense(res.tt) - ref) <= 1e-8 * np.linalg.norm(ref)


def test_update_sets_forward_step_structure():
    sets = NestedIndexSets(
        (3, 3),
        [np.zeros((1, 0), dtype=np.int64), np.array([[0]], dtype=np.int64)],
        [np.array([[1]], dtype=np.int64), np.zeros((1, 0), dtype=np.int64)],
        [np.ones((1, 1)), np.eye(1)],
        [np.ones((1, 1)), np.ones((1, 1))],
    )
    overline = np.array([[1.0], [5.0], [2.0]])  # rows enumerate {()} x Xi^(0)
    rng = np.random.default_rng(0)
    idx = cross_update_sets(sets, 0, overline, "left", 1, rng=rng)
    assert idx.tolist() == [1]  # largest-volume 1x1 block
    assert sets.left_sets[1].tolist() == [[1]]
    sets.validate_nested()


def test_d1_direct_sampling():
    vals = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    f_idx = lambda idx: vals[idx[:, 0]]
    res = cross_interpolate_indexed(f_idx, (5,), CrossConfig(seed=0))
    assert np.allclose(tt_to_dense(res.tt), vals)
    assert res.n_evals == 5
