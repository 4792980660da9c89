from __future__ import annotations

import numpy as np
import pytest

from gpopf import gp
from gpopf.gp import Hyperparams, TrainingSet


def _toy(T=12, M=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (T, M))
    w = rng.standard_normal(M)
    y = np.sin(X @ w)
    G = np.cos(X @ w)[:, None] * w[None, :]
    return TrainingSet(X, y, G, "toy")


def _dense_si(X, y, G, h, xs):
    """Straightforward loop assembly of the derivative-augmented posterior."""
    T, M = X.shape
    a, b = h.alpha, h.beta

    def k(u, v):
        return a * np.exp(-0.5 * b * np.sum((u - v) ** 2))

    n = T * (M + 1)
    S = np.zeros((n, n))
    for i in range(T):
        for j in range(T):
            kij = k(X[i], X[j])
            d = X[i] - X[j]
            S[i, j] = kij
            S[i, T + j * M:T + (j + 1) * M] = b * kij * d
            S[T + i * M:T + (i + 1) * M, j] = -b * kij * d
            S[T + i * M:T + (i + 1) * M, T + j * M:T + (j + 1) * M] = b * kij * (np.eye(M) - b * np.outer(d, d))
    S += np.diag(np.r_[np.full(T, h.gamma), np.full(T * M, h.epsilon)])
    yb = np.r_[y, G.ravel()]
    c = np.r_[[k(xs, X[j]) for j in range(T)], np.concatenate([b * k(xs, X[j]) * (xs - X[j]) for j in range(T)])]
    mean = c @ np.linalg.solve(S, yb)
    var = a - c @ np.linalg.solve(S, c)
    return mean, var


def test_hyperparams_validated():
    with pytest.raises(ValueError):
        Hyperparams(1.0, -1.0, 1e-3)
    with pytest.raises(ValueError):
        Hyperparams(1.0, 1.0, 1e-3, 0.0)
    h = Hyperparams(1.0, 2.0, 1e-3, 1e-4)
    assert Hyperparams.from_dict(h.to_dict()) == h


def test_training_set_checks():
    with pytest.raises(ValueError):
        TrainingSet(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        TrainingSet(np.zeros((3, 2)), np.zeros(3), np.zeros((3, 3)))
    ts = _toy()
    assert ts.content_hash() == _toy().content_hash()
    assert ts.content_hash() != _toy(seed=1).content_hash()


def test_kernel_derivatives_match_fd():
    h = Hyperparams(1.3, 0.7, 1e-3)
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    e = 1e-6
    fd = np.array([(gp.kernel(a, b + e * u, h) - gp.kernel(a, b - e * u, h)) / (2 * e) for u in np.eye(4)])
    np.testing.assert_allclose(gp.kernel_grad(a, b, h), fd, atol=1e-8)
    # mixed second derivative d^2 k / (d a d b)
    fd2 = np.array([(gp.kernel_grad(a + e * u, b, h) - gp.kernel_grad(a - e * u, b, h)) / (2 * e) for u in np.eye(4)])
    np.testing.assert_allclose(gp.kernel_hess(a, b, h), fd2, atol=1e-7)


def test_cov_is_symmetric_psd():
    ts = _toy(T=6, M=3)
    S = gp.build_cov(ts, Hyperparams(1.0, 1.5, 1e-6, 1e-6), "si")
    assert S.shape == (6 * 4, 6 * 4)
    np.testing.assert_allclose(S, S.T, atol=1e-14)
    assert np.linalg.eigvalsh(S).min() > 0


def test_plain_interpolation_noiseless():
    ts = _toy()
    h = Hyperparams(1.0, 1.0, 1e-12)
    m = gp.train(ts, h, "plain", standardize=False)
    mu, var = gp.predict_many(m, ts.thetas)
    np.testing.assert_allclose(mu, ts.y, atol=1e-6)
    assert np.all(var <= 1e-6)


def test_si_interpolates_gradients():
    ts = _toy(T=8)
    h = Hyperparams(1.0, 1.0, 1e-12, 1e-12)
    m = gp.train(ts, h, "si", standardize=False)
    for t in range(ts.T):
        assert gp.predict(m, ts.thetas[t])[0] == pytest.approx(ts.y[t], abs=1e-6)
        np.testing.assert_allclose(gp.mean_grad(m, ts.thetas[t]), ts.grads[t], atol=1e-5)


def test_three_point_dense_oracle():
    ts = _toy(T=3, M=2, seed=4)
    h = Hyperparams(0.8, 1.7, 1e-4, 1e-5)
    m = gp.train(ts, h, "si", standardize=False)
    xs = np.array([0.1, -0.3])
    mu, var = gp.predict(m, xs)
    mu_ref, var_ref = _dense_si(ts.thetas, ts.y, ts.grads, h, xs)
    assert mu == pytest.approx(mu_ref, abs=1e-10)
    assert var == pytest.approx(var_ref, abs=1e-10)


def test_si_variance_below_plain():
    ts = _toy(T=10)
    h = Hyperparams(1.0, 1.0, 1e-4, 1e-4)
    a = gp.train(ts, h, "plain", standardize=False)
    b = gp.train(ts, h, "si", standardize=False)
    xs = np.random.default_rng(5).uniform(-1, 1, (20, 3))
    assert np.all(gp.predict_many(b, xs)[1] <= gp.predict_many(a, xs)[1] + 1e-12)


def test_likelihood_gradient():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 1, (10, 2))
    y = rng.standard_normal(10)
    p = np.log([1.2, 3.0, 0.05])
    _, g = gp.log_marginal_likelihood(p, X, y, grad=True)
    e = 1e-6
    fd = [(gp.log_marginal_likelihood(p + e * u, X, y) - gp.log_marginal_likelihood(p - e * u, X, y)) / (2 * e)
          for u in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_fit_recovers_smooth_function():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, (25, 2))
    w = np.array([1.1, -0.6])
    ts = TrainingSet(X, np.sin(X @ w), np.cos(X @ w)[:, None] * w)
    h, info = gp.fit_hyperparams(ts, seed=0)
    assert info.converged >= 1
    assert h.epsilon is not None
    m = gp.train(ts, h, "si")
    xs = rng.uniform(-0.8, 0.8, (30, 2))
    mu, _ = gp.predict_many(m, xs)
    np.testing.assert_allclose(mu, np.sin(xs @ w), atol=5e-3)


def test_fit_is_deterministic():
    ts = _toy(T=10)
    a, _ = gp.fit_hyperparams(ts, seed=3)
    b, _ = gp.fit_hyperparams(ts, seed=3)
    assert a == b


def test_jitter_on_duplicate_points():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    S = gp.build_cov(X, Hyperparams(1.0, 1.0, 1e-300), "plain")
    L, jit = gp.cholesky_jitter(S)
    assert jit > 0
    np.testing.assert_allclose(L @ L.T, S + jit * np.eye(3), atol=1e-12)


def test_persistence_roundtrip(tmp_path):
    ts = _toy(T=6)
    m = gp.train(ts, Hyperparams(1.0, 1.0, 1e-4, 1e-4), "si")
    p = tmp_path / "m.json"
    gp.save_model(m, p)
    m2 = gp.load_model(p)
    xs = np.array([0.2, 0.1, -0.4])
    assert gp.predict(m2, xs) == pytest.approx(gp.predict(m, xs), abs=1e-12)
    assert m2.train_hash == ts.content_hash()


def test_si_requires_gradients():
    ts = TrainingSet(np.zeros((2, 1)) + [[0.0], [1.0]], [0.0, 1.0])
    with pytest.raises(ValueError):
        gp.train(ts, Hyperparams(1.0, 1.0, 1e-3, 1e-3), "si")
