import numpy as np
import pytest

from irmkit.invariance import irm_penalty
from irmkit.learners import (
    LinearModel,
    MlpModel,
    TrainConfig,
    fit_erm_linear,
    fit_irm_linear,
    fit_mlp,
    fit_robust_linear,
    linear_irm_loss_grad,
    mlp_loss_and_grads,
    select_lambda,
)
from irmkit.numkit import Rng
from irmkit.sem import (
    Dataset,
    Example1Spec,
    SecondMoments,
    example1_moments,
    sample_example1,
)


def ex1_envs(sigmas, n, seed=0):
    return [
        sample_example1(Example1Spec(sigma_sq=s, n=n), Rng(seed).stream(f"env{s}"))
        for s in sigmas
    ]


def test_erm_pooled_prefers_anticausal_feature():
    model = fit_erm_linear([example1_moments(10.0), example1_moments(20.0)])
    assert model.v[1] > 0.5
    assert 10.0 / 11.0 - 0.05 < model.v[1] < 20.0 / 21.0 + 0.05


def test_erm_single_env_equals_regression():
    m = example1_moments(3.0)
    model = fit_erm_linear([m])
    np.testing.assert_allclose(model.v, [0.25, 0.75], atol=1e-12)


def test_erm_pooling_idempotent():
    m = example1_moments(2.0)
    one = fit_erm_linear([m])
    three = fit_erm_linear([m, m, m])
    np.testing.assert_allclose(one.v, three.v, atol=1e-12)


def test_robust_two_symmetric_quadratics():
    r_plus = SecondMoments(np.array([[1.0]]), np.array([1.0]), y_sq=1.0)  # (v-1)^2
    r_minus = SecondMoments(np.array([[1.0]]), np.array([-1.0]), y_sq=1.0)  # (v+1)^2
    model = fit_robust_linear([r_plus, r_minus])
    assert abs(model.v[0]) < 1e-3
    assert abs(model.risk(r_plus) - 1.0) < 5e-3


def test_robust_single_env_is_erm():
    m = example1_moments(5.0)
    model = fit_robust_linear([m])
    np.testing.assert_allclose(model.v, fit_erm_linear([m]).v, atol=1e-4)


def test_linear_irm_lambda_zero_matches_erm():
    moms = [example1_moments(10.0), example1_moments(20.0)]
    erm = fit_erm_linear(moms)
    irm = fit_irm_linear(moms, TrainConfig(lam=0.0, steps=20000))
    np.testing.assert_allclose(irm.v, erm.v, atol=1e-4)


def test_linear_irm_monotone_lambda_population():
    moms = [example1_moments(10.0), example1_moments(20.0)]
    v2 = []
    for lam in (0.0, 10.0, 100.0, 1000.0, 10000.0):
        model = fit_irm_linear(moms, TrainConfig(lam=lam))
        v2.append(abs(model.v[1]))
    for a, b in zip(v2, v2[1:]):
        assert b <= a + 1e-3


def test_linear_irm_gradient_matches_finite_differences():
    rng = Rng(77)
    for d in (2, 5):
        A = rng.standard_normal((d + 4, d))
        moms = [
            SecondMoments(A.T @ A / (d + 4), rng.standard_normal(d), y_sq=2.0),
            SecondMoments(2 * (A.T @ A) / (d + 4), rng.standard_normal(d), y_sq=3.0),
        ]
        v = rng.standard_normal(d)
        for lam in (0.0, 1.0, 100.0):
            _, grad = linear_irm_loss_grad(v, moms, lam)
            num = np.zeros(d)
            h = 1e-6
            for i in range(d):
                e = np.zeros(d)
                e[i] = h
                lp, _ = linear_irm_loss_grad(v + e, moms, lam)
                lm, _ = linear_irm_loss_grad(v - e, moms, lam)
                num[i] = (lp - lm) / (2 * h)
            assert np.abs(grad - num).max() / max(np.abs(num).max(), 1e-9) < 1e-4


def theorem9_instance(seed=0, n_envs=5):
    """Analytic-moment linear SEM: y = gamma . z1 + eps, x = S (z1, z2)."""
    rng = Rng(seed).stream("thm9")
    gamma = rng.standard_normal(2)
    S = rng.standard_normal((4, 4))
    while abs(np.linalg.det(S)) < 0.5:
        S = rng.standard_normal((4, 4))
    moms = []
    for i in range(n_envs):
        a = 0.5 + 1.1 * i
        noise = 0.4 + 0.35 * i
        beta = rng.standard_normal(2)
        tau_sq = 0.3 + 0.2 * i
        q = a * gamma @ gamma + noise
        sig_z = np.zeros((4, 4))
        sig_z[:2, :2] = a * np.eye(2)
        sig_z[:2, 2:] = a * np.outer(gamma, beta)
        sig_z[2:, :2] = sig_z[:2, 2:].T
        sig_z[2:, 2:] = q * np.outer(beta, beta) + tau_sq * np.eye(2)
        rho_z = np.concatenate([a * gamma, q * beta])
        moms.append(SecondMoments(S @ sig_z @ S.T, S @ rho_z, y_sq=float(q)))
    v_star = np.linalg.inv(S).T @ np.concatenate([gamma, np.zeros(2)])
    return moms, v_star


def test_linear_irm_recovers_descrambled_causal_predictor():
    moms, v_star = theorem9_instance(seed=3)
    model = fit_irm_linear(moms, TrainConfig(lam=1e6, steps=40000, learning_rate=1e-2))
    rel = np.linalg.norm(model.v - v_star) / np.linalg.norm(v_star)
    assert rel < 0.02


def test_mlp_gradients_match_finite_differences():
    rng = Rng(11)
    X = rng.standard_normal((40, 3))
    y = (rng.uniform(size=40) < 0.5).astype(float)
    env = Dataset(X=X, y=y, env_id="g")
    model = MlpModel(3, hidden=(8,), rng=Rng(1).stream("init"), dtype=np.float64)
    for lam in (0.0, 1.0, 50.0):
        _, grads, _, _ = mlp_loss_and_grads(model, [env], lam)
        for pi, p in enumerate(model.params):
            flat = p.ravel()
            num = np.zeros_like(flat)
            h = 1e-6
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                lp, *_ = mlp_loss_and_grads(model, [env], lam)
                flat[k] = old - h
                lm, *_ = mlp_loss_and_grads(model, [env], lam)
                flat[k] = old
                num[k] = (lp - lm) / (2 * h)
            rel = np.abs(grads[pi].ravel() - num).max() / max(np.abs(num).max(), 1e-10)
            assert rel < 1e-4, f"param {pi} lam {lam}: rel err {rel}"


def toy_classification(seed, n=400, flip=0.1):
    rng = Rng(seed).stream("toy")
    X = rng.standard_normal((n, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    flips = rng.uniform(size=n) < flip
    y[flips] = 1 - y[flips]
    return Dataset(X=X.astype(np.float64), y=y, env_id=f"toy{seed}")


def test_mlp_lambda_zero_irm_equals_erm_trajectory():
    envs = [toy_classification(0), toy_classification(1)]
    cfg = TrainConfig.for_mlp(steps=30, lam=0.0, seed=5)
    m1, r1 = fit_mlp(envs, "irm", cfg, hidden=(16,), dtype=np.float64)
    m2, r2 = fit_mlp(envs, "erm", cfg, hidden=(16,), dtype=np.float64)
    assert r1.risk_trajectory == r2.risk_trajectory
    for a, b in zip(m1.params, m2.params):
        np.testing.assert_array_equal(a, b)


def test_mlp_deterministic_given_seed():
    envs = [toy_classification(2)]
    cfg = TrainConfig.for_mlp(steps=25, lam=10.0, seed=9)
    _, r1 = fit_mlp(envs, "irm", cfg, hidden=(8,), dtype=np.float64)
    _, r2 = fit_mlp(envs, "irm", cfg, hidden=(8,), dtype=np.float64)
    assert r1.to_json() == r2.to_json()


def test_mlp_learns_toy_problem():
    envs = [toy_classification(3, n=800, flip=0.05)]
    cfg = TrainConfig.for_mlp(steps=300, lam=0.0, seed=1)
    model, report = fit_mlp(envs, "erm", cfg, hidden=(16,))
    assert report.accuracies[0] > 0.9


def test_mlp_rejects_nonbinary_targets():
    env = Dataset(X=np.eye(3), y=np.array([0.0, 1.0, 2.0]), env_id="bad")
    with pytest.raises(ValueError):
        fit_mlp([env], "erm", TrainConfig.for_mlp(steps=1))


def test_select_lambda_trivial_grid():
    moms = [example1_moments(10.0), example1_moments(20.0)]
    lam, model, report = select_lambda(moms, example1_moments(5.0), [0.0])
    assert lam == 0.0
    assert len(report) == 1


def test_select_lambda_dedup():
    moms = [example1_moments(10.0), example1_moments(20.0)]
    cfg = TrainConfig(steps=2000)
    _, _, report = select_lambda(moms, example1_moments(5.0), [0.0, 0.0, 10.0, 10.0], cfg)
    assert len(report) == 2


def test_select_lambda_prefers_invariance_and_wins_ood():
    train = [example1_moments(10.0), example1_moments(20.0)]
    val = example1_moments(5.0)
    lam, model, _ = select_lambda(train, val, [0.0, 100.0, 10000.0])
    assert lam > 0
    erm = fit_irm_linear(train, TrainConfig(lam=0.0))
    probe = example1_moments(0.5)
    assert model.risk(probe) < erm.risk(probe)


def test_train_report_json_roundtrip():
    envs = [toy_classification(4, n=100)]
    _, report = fit_mlp(envs, "erm", TrainConfig.for_mlp(steps=5, seed=2), hidden=(8,))
    import json

    blob = json.loads(report.to_json())
    assert blob["env_ids"] == ["toy4"]
    assert len(blob["penalty_trajectory"]) == 5
    rows = report.final_metrics_rows()
    assert rows[0]["env"] == "toy4"
