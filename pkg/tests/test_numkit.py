import math

import numpy as np
import pytest

from energy_attention import numkit as nk


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def test_logsumexp_identical_entries():
    assert nk.logsumexp(np.array([0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-15)


def test_logsumexp_single_entry_exact():
    assert nk.logsumexp(np.array([5.0])) == 5.0


def test_logsumexp_overflow_safe():
    val = nk.logsumexp(np.array([1000.0, 1000.0]))
    assert val == pytest.approx(1000.0 + math.log(2), abs=1e-12)


def test_logsumexp_empty_rejected():
    with pytest.raises(ValueError, match="empty reduction"):
        nk.logsumexp(np.array([]))


def test_logsumexp_shift_invariance():
    rng = nk.Rng(1)
    v = rng.normals(16)
    base = nk.logsumexp(v)
    for c in (1e4, -1e4):
        assert nk.logsumexp(v + c) == pytest.approx(base + c, abs=1e-9)


def test_softmax_uniform_and_singleton():
    np.testing.assert_allclose(nk.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(nk.softmax(np.array([7.3])), [1.0])


def test_softmax_analytic():
    np.testing.assert_allclose(nk.softmax(np.array([math.log(3), 0.0])),
                               [0.75, 0.25], atol=1e-15)


def test_softmax_simplex_and_shift_invariance():
    rng = nk.Rng(2)
    for _ in range(20):
        v = 10.0 * rng.normals(9)
        p = nk.softmax(v)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0.0) and np.all(p <= 1.0)
        np.testing.assert_allclose(p, nk.softmax(v + 1e4), atol=1e-9)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError):
        nk.softmax(np.array([]))


def test_softmax_lse_rows_matches_vector_ops():
    rng = nk.Rng(3)
    scores = rng.normal_matrix(4, 7, 3.0)
    weights, lse = nk.softmax_lse_rows(scores)
    for i in range(4):
        np.testing.assert_allclose(weights[i], nk.softmax(scores[i]), atol=1e-15)
        assert lse[i] == pytest.approx(nk.logsumexp(scores[i]), abs=1e-13)


# ---------------------------------------------------------------------------
# eigensolver
# ---------------------------------------------------------------------------

def _eig2_closed_form(a):
    # symmetric 2x2: mean +- sqrt(((a11-a22)/2)^2 + a12^2)
    mean = 0.5 * (a[0, 0] + a[1, 1])
    spread = math.hypot(0.5 * (a[0, 0] - a[1, 1]), a[0, 1])
    return np.array([mean - spread, mean + spread])


def _eig3_closed_form(a):
    # trigonometric closed form for a symmetric 3x3
    q = np.trace(a) / 3.0
    b = a - q * np.eye(3)
    p = math.sqrt(np.sum(b * b) / 6.0)
    if p < 1e-300:
        return np.full(3, q)
    det = np.linalg.det(b / p)
    phi = math.acos(min(1.0, max(-1.0, det / 2.0))) / 3.0
    eigs = [q + 2.0 * p * math.cos(phi + 2.0 * math.pi * k / 3.0) for k in range(3)]
    return np.sort(eigs)


def test_sym_eigvals_identity_and_diagonal():
    np.testing.assert_allclose(nk.sym_eigvals(np.eye(3)), np.ones(3))
    np.testing.assert_allclose(nk.sym_eigvals(np.diag([-2.0, 0.0, 5.0])),
                               [-2.0, 0.0, 5.0])


def test_sym_eigvals_closed_form_2x2_3x3():
    rng = nk.Rng(4)
    for _ in range(25):
        m = rng.normal_matrix(2, 2, 2.0)
        s = m + m.T
        np.testing.assert_allclose(nk.sym_eigvals(s), _eig2_closed_form(s), atol=1e-10)
        m = rng.normal_matrix(3, 3, 2.0)
        s = m + m.T
        np.testing.assert_allclose(nk.sym_eigvals(s), _eig3_closed_form(s), atol=1e-9)


def test_sym_eigvals_characteristic_polynomial_roots_4x4():
    # independent oracle: characteristic polynomial solved via the
    # companion-matrix root finder
    rng = nk.Rng(5)
    for _ in range(10):
        m = rng.normal_matrix(4, 4)
        s = m + m.T
        roots = np.sort(np.roots(np.poly(s)).real)
        np.testing.assert_allclose(nk.sym_eigvals(s), roots, atol=1e-8)


def test_sym_eig_trace_and_reconstruction():
    rng = nk.Rng(6)
    for _ in range(10):
        m = rng.normal_matrix(6, 6)
        s = m + m.T
        vals, vecs = nk.sym_eig(s)
        assert abs(vals.sum() - np.trace(s)) < 1e-9
        # full rotation product reconstructs the matrix
        assert np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - s)) < 1e-8
        assert np.max(np.abs(vecs.T @ vecs - np.eye(6))) < 1e-10


def test_sym_eig_rejects_bad_input():
    with pytest.raises(ValueError):
        nk.sym_eigvals(np.ones((2, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        nk.sym_eigvals(np.array([[0.0, 1.0], [0.0, 0.0]]))


# ---------------------------------------------------------------------------
# inverses
# ---------------------------------------------------------------------------

def test_solve_inverse_identity_and_diagonal():
    np.testing.assert_allclose(nk.solve_inverse(np.eye(4)), np.eye(4))
    np.testing.assert_allclose(nk.solve_inverse(np.diag([2.0, 4.0])),
                               np.diag([0.5, 0.25]))


def test_solve_inverse_residual():
    rng = nk.Rng(7)
    for _ in range(10):
        a = rng.normal_matrix(5, 5) + 3.0 * np.eye(5)
        inv = nk.solve_inverse(a)
        assert np.max(np.abs(a @ inv - np.eye(5))) < 1e-8


def test_solve_inverse_singular():
    with pytest.raises(ValueError, match="singular matrix"):
        nk.solve_inverse(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_range_space_pinv_orthonormal_rows_is_transpose():
    w = nk.orthonormal_rows(nk.Rng(8), 3, 7)
    np.testing.assert_allclose(nk.range_space_pinv(w), w.T, atol=1e-12)


def test_range_space_pinv_analytic_1x2():
    np.testing.assert_allclose(nk.range_space_pinv(np.array([[2.0, 0.0]])),
                               [[0.5], [0.0]])


def test_range_space_pinv_residual_and_penrose():
    rng = nk.Rng(9)
    w = rng.normal_matrix(4, 16)
    pinv = nk.range_space_pinv(w)
    assert np.max(np.abs(w @ pinv - np.eye(4))) < 1e-10
    # four Penrose conditions
    assert np.max(np.abs(w @ pinv @ w - w)) < 1e-9
    assert np.max(np.abs(pinv @ w @ pinv - pinv)) < 1e-9
    assert np.max(np.abs((w @ pinv).T - w @ pinv)) < 1e-9
    assert np.max(np.abs((pinv @ w).T - pinv @ w)) < 1e-9


def test_range_space_pinv_rank_deficient():
    w = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(ValueError, match="rank-deficient rows"):
        nk.range_space_pinv(w)
    with pytest.raises(ValueError):
        nk.range_space_pinv(np.ones((3, 2)))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_fd_gradient_quadratic_exact():
    x = np.array([1.0, 2.0, 3.0])
    grad = nk.fd_gradient(lambda v: 0.5 * float(v @ v), x)
    np.testing.assert_allclose(grad, x, atol=1e-8)


def test_fd_gradient_quadratic_form_symmetrized():
    rng = nk.Rng(10)
    a = rng.normal_matrix(5, 5)
    x = rng.normals(5)
    grad = nk.fd_gradient(lambda v: 0.5 * float(v @ a @ v), x)
    np.testing.assert_allclose(grad, 0.5 * (a + a.T) @ x, atol=1e-8)


def test_fd_gradient_constant_is_zero():
    np.testing.assert_allclose(nk.fd_gradient(lambda v: 4.2, np.ones(3)), 0.0)


def test_fd_gradient_nonfinite_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        nk.fd_gradient(lambda v: float("nan"), np.ones(2))


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

def test_rng_deterministic_stream():
    a = [nk.Rng(123).next_u64() for _ in range(1)]
    b = [nk.Rng(123).next_u64() for _ in range(1)]
    assert a == b
    np.testing.assert_array_equal(nk.Rng(9).normals(32), nk.Rng(9).normals(32))


def test_rng_uniform_range_and_rough_moments():
    rng = nk.Rng(11)
    u = rng.uniforms(4000)
    assert np.all((u >= 0.0) & (u < 1.0))
    assert abs(u.mean() - 0.5) < 0.03
    z = rng.normals(4000)
    assert abs(z.mean()) < 0.06
    assert abs(z.std() - 1.0) < 0.05


def test_sample_hypersphere_norm_and_determinism():
    rng = nk.Rng(42)
    v = nk.sample_hypersphere(rng, 8, 1.0)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    np.testing.assert_array_equal(v, nk.sample_hypersphere(nk.Rng(42), 8, 1.0))
    one = nk.sample_hypersphere(nk.Rng(0), 1, 2.0)
    assert abs(abs(one[0]) - 2.0) < 1e-12


def test_orthonormal_rows():
    w = nk.orthonormal_rows(nk.Rng(12), 4, 9)
    np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-12)


def test_validators():
    with pytest.raises(ValueError):
        nk.as_vector(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        nk.as_matrix(np.ones(3))
    with pytest.raises(ValueError):
        nk.as_vector(np.ones(3), dim=4)
    rows = nk.as_token_matrix(np.arange(6.0).reshape(3, 2), orientation="rows")
    assert rows.shape == (2, 3)
