import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_generalized, char_poly_eigs, cosine, random_spd
from neurodecode import csp
from neurodecode.csp import CspModel, covariance, fit_csp, jacobi_eigh, objective


def test_jacobi_identity():
    lam, v = jacobi_eigh(np.eye(3))
    np.testing.assert_array_equal(lam, [1, 1, 1])
    np.testing.assert_array_equal(v, np.eye(3))


def test_jacobi_diagonal_gives_permuted_identity():
    lam, v = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(lam, [3, 2, 1])
    np.testing.assert_array_equal(np.abs(v), np.eye(3)[:, [0, 2, 1]])


def test_jacobi_random_6x6_residual_and_orthonormality():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    a = a + a.T
    lam, v = jacobi_eigh(a)
    assert np.abs(a @ v - v * lam).max() <= 1e-9 * np.linalg.norm(a)
    assert np.abs(v.T @ v - np.eye(6)).max() <= 1e-10
    assert np.all(np.diff(lam) <= 0)


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("seed", range(5))
def test_jacobi_matches_characteristic_polynomial(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    a = a + a.T
    np.testing.assert_allclose(jacobi_eigh(a)[0], char_poly_eigs(a), atol=1e-8)


def test_jacobi_rejects_asymmetric():
    with pytest.raises(csp.NotSymmetricError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_jacobi_reports_non_convergence():
    a = np.random.default_rng(1).standard_normal((5, 5))
    with pytest.raises(csp.ConvergenceError):
        jacobi_eigh(a + a.T, max_sweeps=1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**32 - 1), scale=st.sampled_from([1e-6, 1.0, 1e6]))
def test_jacobi_property(n, seed, scale):
    a = np.random.default_rng(seed).standard_normal((n, n)) * scale
    a = a + a.T
    lam, v = jacobi_eigh(a)
    norm = max(np.linalg.norm(a), 1e-300)
    assert np.abs(a @ v - v * lam).max() <= 1e-9 * norm
    assert np.abs(v.T @ v - np.eye(n)).max() <= 1e-10


def test_covariance_identical_channels_rank_one():
    x = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
    c = covariance([np.vstack([x, x])]).matrix
    assert c[0, 0] == c[0, 1] == c[1, 1]
    assert np.linalg.matrix_rank(c) == 1


def test_covariance_zeros():
    np.testing.assert_array_equal(covariance([np.zeros((3, 8))]).matrix, np.zeros((3, 3)))


def test_covariance_brute_force():
    rng = np.random.default_rng(2)
    x1, x2 = rng.standard_normal((2, 3, 8))
    ref = np.zeros((3, 3))
    for x in (x1, x2):
        xc = x - x.mean(axis=1, keepdims=True)
        for t in range(8):
            ref += np.outer(xc[:, t], xc[:, t])
    ref /= 16
    np.testing.assert_allclose(covariance([x1, x2]).matrix, ref, atol=1e-12)


def test_covariance_rejects_empty_class():
    with pytest.raises(csp.CspError):
        covariance([])


def test_fit_csp_diagonal_closed_form():
    m = fit_csp(np.diag([4.0, 1.0]), np.diag([1.0, 4.0]), k=1)
    np.testing.assert_allclose(m.eigenvalues, [0.8, 0.2], atol=1e-9)
    assert cosine(m.w_max, np.array([1.0, 0.0])) == pytest.approx(1.0, abs=1e-12)
    assert cosine(m.w_min, np.array([0.0, 1.0])) == pytest.approx(1.0, abs=1e-12)
    assert m.selected_max == (0,) and m.selected_min == (1,)


def test_fit_csp_identical_classes():
    m = fit_csp(np.eye(3), np.eye(3), k=1)
    np.testing.assert_allclose(m.eigenvalues, 0.5, atol=1e-9)
    assert len(m.selected_max) == 1


def test_fit_csp_rejects_bad_input():
    with pytest.raises(csp.CspError):
        fit_csp(np.eye(2), np.eye(3), k=1)
    with pytest.raises(csp.CspError):
        fit_csp(np.eye(3), np.eye(3), k=4)
    with pytest.raises(csp.SingularCovarianceError):
        fit_csp(np.zeros((3, 3)), np.zeros((3, 3)), k=1)


def test_fit_csp_rank_deficient_is_regularised():
    x = np.random.default_rng(3).standard_normal((4, 3))
    c = x @ x.T  # rank 3 in 4 dimensions
    m = fit_csp(c, c + np.diag([1.0, 0, 0, 0]), k=2)
    assert np.all(np.isfinite(m.filters))


def test_objective_direct_substitution():
    assert objective([1.0, 0.0], np.diag([4.0, 1.0]), np.diag([1.0, 4.0])) == 4.0


def test_objective_zero_denominator():
    with pytest.raises(ZeroDivisionError):
        objective([1.0, 0.0], np.eye(2), np.diag([0.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(-1e3, 1e3).filter(lambda a: abs(a) > 1e-3))
def test_objective_homogeneous(seed, alpha):
    rng = np.random.default_rng(seed)
    c1, c2 = random_spd(rng, 4), random_spd(rng, 4)
    w = rng.standard_normal(4)
    assert objective(alpha * w, c1, c2) == pytest.approx(objective(w, c1, c2), rel=1e-12)


def test_w_max_beats_random_probes():
    rng = np.random.default_rng(4)
    c1, c2 = random_spd(rng, 6), random_spd(rng, 6)
    m = fit_csp(c1, c2, k=3)
    jmax, jmin = objective(m.w_max, c1, c2), objective(m.w_min, c1, c2)
    for v in rng.standard_normal((1000, 6)):
        j = objective(v / np.linalg.norm(v), c1, c2)
        assert jmin - 1e-9 <= j <= jmax + 1e-9


def _pair(seed, n):
    rng = np.random.default_rng(seed)
    return random_spd(rng, n), random_spd(rng, n)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8))
def test_complementarity_and_joint_diagonalisation(seed, n):
    c1, c2 = _pair(seed, n)
    p, c1r, c2r = csp.whiten(c1, c2, 1e-8)
    s1 = jacobi_eigh(p @ c1r @ p.T)[0]
    s2 = jacobi_eigh(p @ c2r @ p.T)[0]
    assert np.abs(s1 + s2[::-1] - 1).max() <= 1e-9
    m = fit_csp(c1, c2, k=1)
    w = m.filters
    assert np.abs(w @ (c1r + c2r) @ w.T - np.eye(n)).max() <= 1e-8
    assert np.all(m.eigenvalues >= -1e-9) and np.all(m.eigenvalues <= 1 + 1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 4))
def test_filters_match_determinant_roots(seed, n):
    c1, c2 = _pair(seed, n)
    m = fit_csp(c1, c2, k=1)
    lams, vecs = brute_force_generalized(c1, c2)
    assert cosine(m.w_max, vecs[0]) >= 1 - 1e-8
    assert cosine(m.w_min, vecs[-1]) >= 1 - 1e-8


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8), k=st.integers(1, 8), s=st.floats(1e-6, 1e6))
def test_selection_scale_invariant(seed, n, k, s):
    k = min(k, n)
    c1, c2 = _pair(seed, n)
    a, b = fit_csp(c1, c2, k), fit_csp(s * c1, s * c2, k)
    assert a.selected_max == b.selected_max and a.selected_min == b.selected_min


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8))
def test_monotone_extremality(seed, n):
    c1, c2 = _pair(seed, n)
    m = fit_csp(c1, c2, k=1)
    js = [objective(w, c1, c2) for w in m.filters]
    assert np.all(np.diff(js) <= 1e-9 * max(js))
    assert js[0] == pytest.approx(objective(m.w_max, c1, c2))


def test_top_k_tie_rule():
    assert csp.top_k_indices(np.array([0.5, -1.0, 1.0, 0.5]), 3) == [1, 2, 0]


def test_model_round_trip(tmp_path):
    c1, c2 = _pair(7, 5)
    m = fit_csp(c1, c2, k=3)
    m.save(tmp_path / "csp.json")
    back = CspModel.load(tmp_path / "csp.json")
    np.testing.assert_array_equal(back.filters, m.filters)
    assert back.selected_max == m.selected_max and back.selected_min == m.selected_min


def test_model_rejects_duplicate_selection():
    with pytest.raises(csp.CspError):
        CspModel(np.ones(3), np.ones(3), np.ones(3), (0, 0), (1, 2), 2, np.eye(3))
