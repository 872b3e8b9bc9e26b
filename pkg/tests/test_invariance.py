import numpy as np
import pytest

from irmkit.errors import SingularGramError
from irmkit.invariance import (
    LinearRepresentation,
    d_dist,
    d_lin,
    dummy_gradient,
    even_odd_batches,
    irm_penalty,
    irm_penalty_minibatch,
    landscape_sweep,
    optimal_classifier,
)
from irmkit.numkit import Rng, solve_gram
from irmkit.sem import Dataset, Example1Spec, SecondMoments, example1_moments, sample_example1


def diag_phi(c):
    return np.array([[1.0, 0.0], [0.0, c]])


def test_optimal_classifier_example1_diag():
    w = optimal_classifier(diag_phi(1.0), example1_moments(1.0))
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-12)


def test_optimal_classifier_x1_selector():
    w = optimal_classifier(np.array([[1.0, 0.0]]), example1_moments(4.0))
    np.testing.assert_allclose(w, [1.0], atol=1e-12)


def test_optimal_classifier_null_phi_with_ridge():
    w = optimal_classifier(np.zeros((2, 2)), example1_moments(1.0), ridge=0.5)
    np.testing.assert_allclose(w, [0.0, 0.0], atol=1e-12)


def test_optimal_classifier_singular_raises():
    with pytest.raises(SingularGramError):
        optimal_classifier(diag_phi(0.0), example1_moments(1.0))


def test_optimal_classifier_closed_form_general_c():
    # w_opt = (1/(s+1), s/(c(s+1)))
    for s, c in [(1.0, 0.5), (10.0, 2.0), (3.0, -0.7)]:
        w = optimal_classifier(diag_phi(c), example1_moments(s))
        np.testing.assert_allclose(w, [1 / (s + 1), s / (c * (s + 1))], rtol=1e-10)


def test_d_dist_example1_values():
    m = example1_moments(1.0)
    w = np.array([1.0, 0.0])
    assert abs(d_dist(w, diag_phi(1.0), m).value - 0.5) < 1e-12
    # exact-zero column: min-norm classifier is (1, 0), distance 0
    assert d_dist(w, diag_phi(0.0), m).value < 1e-20
    # near-zero column: the compensating classifier blows up as 1/c
    val = d_dist(w, diag_phi(1e-3), m).value
    assert abs(val - 2.5e5) / 2.5e5 < 1e-2


def test_d_lin_closed_form():
    for s in (0.5, 1.0, 4.0):
        m = example1_moments(s)
        for c in (-1.0, -0.3, 0.0, 0.2, 2.0):
            val = d_lin(np.array([1.0, 0.0]), diag_phi(c), m).value
            assert abs(val - c**2 * s**2) < 1e-12 * max(1.0, s**2)


def test_d_lin_zero_iff_optimal():
    rng = Rng(17)
    for trial in range(20):
        d = int(rng.integers(1, 5))
        p = int(rng.integers(1, d + 1))
        A = rng.standard_normal((d + 3, d))
        sigma = A.T @ A / (d + 3) + 0.1 * np.eye(d)
        rho = rng.standard_normal(d)
        m = SecondMoments(sigma, rho, y_sq=float(rho @ np.linalg.solve(sigma, rho)) + 1.0)
        phi = rng.standard_normal((p, d))
        w_opt = optimal_classifier(phi, m)
        assert d_lin(w_opt, phi, m).value < 1e-16
        w_bad = w_opt + 0.1 * rng.standard_normal(p)
        assert d_lin(w_bad, phi, m).value > 1e-12


def test_d_lin_gradient_matches_finite_differences():
    rng = Rng(23)
    for trial in range(10):
        d, p = 4, 3
        A = rng.standard_normal((8, d))
        m = SecondMoments(A.T @ A / 8, rng.standard_normal(d), y_sq=2.0)
        phi = rng.standard_normal((p, d))
        w = rng.standard_normal(p)
        grad = d_lin(w, phi, m, with_gradient=True).gradient
        h = 1e-6
        num = np.zeros_like(phi)
        for i in range(p):
            for j in range(d):
                e = np.zeros_like(phi)
                e[i, j] = h
                num[i, j] = (d_lin(w, phi + e, m).value - d_lin(w, phi - e, m).value) / (2 * h)
        denom = max(np.abs(num).max(), 1e-12)
        assert np.abs(grad - num).max() / denom < 1e-5


def test_irm_penalty_zero_for_conditional_mean():
    # model output equals E[y | x] exactly -> dummy classifier already optimal
    rng = Rng(5)
    X = rng.standard_normal((500, 2))
    v = np.array([0.7, -0.2])
    y = X @ v  # noiseless: f(x) = E[y | x]
    data = Dataset(X=X, y=y, env_id="t")
    assert irm_penalty(v, data, "squared").value < 1e-20


def test_irm_penalty_example1_linear():
    for s in (1.0, 10.0, 20.0):
        m = example1_moments(s)
        assert irm_penalty(np.array([1.0, 0.0]), m).value < 1e-20
    assert abs(irm_penalty(np.array([0.0, 1.0]), example1_moments(1.0)).value - 4.0) < 1e-12


@pytest.mark.parametrize("s", [1.0, 3.0])
def test_irm_penalty_equals_4_d_lin_for_linear(s):
    rng = Rng(31)
    m = example1_moments(s)
    for _ in range(10):
        v = rng.standard_normal(2)
        pen = irm_penalty(v, m).value
        lin = d_lin(np.array([1.0]), v.reshape(1, 2), m).value
        assert abs(pen - 4.0 * lin) < 1e-10 * max(1.0, pen)


def test_minibatch_degenerate_full_batch():
    data = sample_example1(Example1Spec(sigma_sq=1.0, n=512), Rng(2).stream("mb"))
    v = np.array([0.3, 0.4])
    full = irm_penalty(v, data).value
    est = irm_penalty_minibatch(v, data, data).value
    assert abs(est - full) < 1e-12


def test_minibatch_zero_gradient_model():
    data = sample_example1(Example1Spec(sigma_sq=1.0, n=256), Rng(2).stream("z"))
    a, b = even_odd_batches(data)
    data_inv = Dataset(X=data.X, y=data.X[:, 0], env_id="inv")  # y = x1 exactly
    a, b = even_odd_batches(data_inv)
    assert irm_penalty_minibatch(np.array([1.0, 0.0]), a, b).value < 1e-20


def test_minibatch_size_mismatch():
    data = sample_example1(Example1Spec(sigma_sq=1.0, n=100), Rng(0).stream("s"))
    a = Dataset(X=data.X[:40], y=data.y[:40], env_id="a")
    b = Dataset(X=data.X[:60], y=data.y[:60], env_id="b")
    with pytest.raises(ValueError):
        irm_penalty_minibatch(np.array([1.0, 0.0]), a, b)


def test_minibatch_unbiased_small():
    # mean over many random disjoint batch pairs approximates the
    # full-sample penalty within 3 standard errors
    data = sample_example1(Example1Spec(sigma_sq=2.0, n=4096), Rng(8).stream("mc"))
    v = np.array([0.5, 0.3])
    full = irm_penalty(v, data).value
    rng = Rng(9)
    b = 64
    vals = []
    for _ in range(2000):
        idx = rng.permutation(4096)[: 2 * b]
        A = Dataset(X=data.X[idx[:b]], y=data.y[idx[:b]], env_id="a")
        B = Dataset(X=data.X[idx[b:]], y=data.y[idx[b:]], env_id="b")
        vals.append(irm_penalty_minibatch(v, A, B).value)
    vals = np.array(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - full) < 3 * se + 1e-9


def test_landscape_d_lin_parabola():
    grid = np.linspace(-4, 4, 801)
    rows = landscape_sweep(1.0, grid, "d_lin")
    for row in rows:
        assert abs(row["penalty"] - row["c"] ** 2) < 1e-12


def test_landscape_d_dist_shape():
    grid = np.array([-2.0, -1.0, -0.001, 0.0, 0.001, 1.0, 2.0])
    rows = {r["c"]: r["penalty"] for r in landscape_sweep(1.0, grid, "d_dist")}
    # symmetric 0.25 * (1 + 1/c^2); diverges near 0, decays with |c|
    assert rows[0.0] < 1e-20
    assert rows[0.001] > 1e3 * rows[1.0]
    assert rows[2.0] < rows[1.0] < rows[0.001]


def test_landscape_ridged_jump_persists():
    grid = np.array([0.0, 0.001, 1.0])
    rows = {r["c"]: r["penalty"] for r in landscape_sweep(1.0, grid, "d_dist_ridged", ridge=1.0)}
    jump = abs(rows[0.001] - rows[0.0])
    assert jump > 10.0 * rows[1.0]


def test_dummy_gradient_multi_output_sums_coordinates():
    rng = Rng(4)
    X = rng.standard_normal((100, 3))

    class TwoHead:
        def outputs(self, X):
            return np.stack([X[:, 0], X[:, 1]], axis=1)

    y = X[:, 0]
    data = Dataset(X=X, y=y, env_id="m")
    g = dummy_gradient(TwoHead(), data, "squared")
    f1, f2 = X[:, 0], X[:, 1]
    expect = np.mean(2 * (f1 - y) * f1 + 2 * (f2 - y) * f2)
    assert abs(g - expect) < 1e-12
