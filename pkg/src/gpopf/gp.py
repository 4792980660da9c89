"""Exact Gaussian-process regression of a scalar OPF output.

Two modes share one Gaussian kernel ``k(a, b) = alpha * exp(-beta/2 ||a - b||^2)``:

* ``plain``: labels ``y(theta_t)`` only;
* ``si`` (sensitivity informed): labels plus their gradients with respect to
  theta, stacked as ``[y_1..y_T; grad y(theta_1); ...; grad y(theta_T)]``.

Labels are standardized before fitting. Gradients are scaled by the same factor
but not centered, so the prior mean is a constant.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize, minimize_scalar

log = logging.getLogger(__name__)

MODES = ("plain", "si")
LOG_BOUNDS = {"alpha": (-14.0, 14.0), "beta": (-14.0, 14.0), "gamma": (-25.0, 5.0), "epsilon": (-25.0, 5.0)}


class GpError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    alpha: float
    beta: float
    gamma: float
    epsilon: float | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(d["alpha"], d["beta"], d["gamma"], d.get("epsilon"))


@dataclass(frozen=True, eq=False)
class TrainingSet:
    thetas: np.ndarray  # T x M
    y: np.ndarray  # T
    grads: np.ndarray | None = None  # T x M
    target: str = ""

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if th.shape[0] == 0:
            raise ValueError("training set is empty")
        if y.shape[0] != th.shape[0]:
            raise ValueError("thetas and labels differ in length")
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "y", y)
        if self.grads is not None:
            g = np.asarray(self.grads, dtype=float)
            if g.shape != th.shape:
                raise ValueError(f"grads must have shape {th.shape}, got {g.shape}")
            object.__setattr__(self, "grads", g)

    @property
    def T(self) -> int:
        return self.thetas.shape[0]

    @property
    def M(self) -> int:
        return self.thetas.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.thetas, self.y) + ((self.grads,) if self.grads is not None else ()):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


# -- kernel ------------------------------------------------------------------------


def kernel(ti, tj, h: Hyperparams) -> float:
    d = np.asarray(ti, dtype=float) - np.asarray(tj, dtype=float)
    return float(h.alpha * np.exp(-0.5 * h.beta * (d @ d)))


def kernel_grad(ti, tj, h: Hyperparams) -> np.ndarray:
    """Gradient of k(ti, tj) with respect to its second argument."""
    d = np.asarray(ti, dtype=float) - np.asarray(tj, dtype=float)
    return h.beta * kernel(ti, tj, h) * d


def kernel_hess(ti, tj, h: Hyperparams) -> np.ndarray:
    """Mixed second derivative of k(ti, tj) with respect to (ti, tj)."""
    d = np.asarray(ti, dtype=float) - np.asarray(tj, dtype=float)
    H = h.beta * kernel(ti, tj, h) * (np.eye(d.size) - h.beta * np.outer(d, d))
    return 0.5 * (H + H.T)


def sq_dists(X1, X2) -> np.ndarray:
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    d = (X1 * X1).sum(1)[:, None] + (X2 * X2).sum(1)[None, :] - 2 * X1 @ X2.T
    return np.maximum(d, 0.0)


def kernel_matrix(X1, X2, h: Hyperparams) -> np.ndarray:
    return h.alpha * np.exp(-0.5 * h.beta * sq_dists(X1, X2))


# -- covariance --------------------------------------------------------------------


def _si_blocks(X: np.ndarray, h: Hyperparams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free blocks (K, G, H) of the derivative-augmented covariance."""
    T, M = X.shape
    K = kernel_matrix(X, X, h)
    D = X[:, None, :] - X[None, :, :]  # D[i, j] = theta_i - theta_j
    # cov(y_i, grad y_j) = beta k_ij (theta_i - theta_j)
    G = (h.beta * K[:, :, None] * D).reshape(T, T * M)
    # cov(grad y_i, grad y_j) = beta k_ij (I - beta d d')
    H = np.einsum("ij,ija,ijb->iajb", -h.beta ** 2 * K, D, D, optimize=True)
    for a in range(M):
        H[:, a, :, a] += h.beta * K
    return K, G, H.reshape(T * M, T * M)


def build_cov(ts: TrainingSet | np.ndarray, h: Hyperparams, mode: str = "plain") -> np.ndarray:
    """Training covariance with label noise on the diagonal."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    X = ts.thetas if isinstance(ts, TrainingSet) else np.atleast_2d(np.asarray(ts, dtype=float))
    T, M = X.shape
    if mode == "plain":
        S = kernel_matrix(X, X, h)
        S[np.diag_indices(T)] += h.gamma
        return S
    if h.epsilon is None:
        raise ValueError("sensitivity-informed covariance needs epsilon")
    K, G, H = _si_blocks(X, h)
    n = T * (M + 1)
    S = np.empty((n, n))
    S[:T, :T] = K
    S[:T, T:] = G
    S[T:, :T] = G.T
    S[T:, T:] = H
    del H
    d = np.diag_indices(n)
    S[d] += np.concatenate([np.full(T, h.gamma), np.full(T * M, h.epsilon)])
    return S


def cholesky_jitter(S: np.ndarray, overwrite: bool = False) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding diagonal jitter 1e-10..1e-6 x mean(diag) if needed."""
    try:
        return sla.cholesky(S, lower=True, overwrite_a=False, check_finite=False), 0.0
    except sla.LinAlgError:
        pass
    scale = np.trace(S) / S.shape[0]
    rel = 1e-10
    while rel <= 1e-6 * (1 + 1e-9):
        A = S.copy()
        A[np.diag_indices_from(A)] += rel * scale
        try:
            L = sla.cholesky(A, lower=True, overwrite_a=True, check_finite=False)
            log.warning("covariance needed jitter %.1e", rel * scale)
            return L, rel * scale
        except sla.LinAlgError:
            rel *= 10
    raise GpError("covariance not positive definite after jitter escalation")


# -- likelihood --------------------------------------------------------------------


def log_marginal_likelihood(logp, X, y, grad: bool = False, d2=None):
    """Plain-GP log marginal likelihood in log-parameters (log alpha, log beta, log gamma)."""
    a, b, g = np.exp(np.asarray(logp, dtype=float))
    X = np.atleast_2d(X)
    T = X.shape[0]
    if d2 is None:
        d2 = sq_dists(X, X)
    E = np.exp(-0.5 * b * d2)
    K = a * E
    S = K.copy()
    S[np.diag_indices(T)] += g
    try:
        L = sla.cholesky(S, lower=True, check_finite=False)
    except sla.LinAlgError:
        return (-np.inf, np.full(3, np.nan)) if grad else -np.inf
    w = sla.cho_solve((L, True), y, check_finite=False)
    ll = -0.5 * y @ w - np.sum(np.log(np.diag(L))) - 0.5 * T * np.log(2 * np.pi)
    if not grad:
        return float(ll)
    Si = sla.cho_solve((L, True), np.eye(T), check_finite=False)
    W = np.outer(w, w) - Si
    dS = (K, K * (-0.5 * b * d2), g * np.eye(T))
    gr = np.array([0.5 * np.sum(W * D) for D in dS])
    return float(ll), gr


def si_log_marginal_likelihood(h: Hyperparams, X, y, grads) -> float:
    """Log marginal likelihood of the derivative-augmented labels."""
    X = np.atleast_2d(X)
    yb = np.concatenate([np.asarray(y, float), np.asarray(grads, float).ravel()])
    S = build_cov(X, h, "si")
    try:
        L = sla.cholesky(S, lower=True, overwrite_a=True, check_finite=False)
    except sla.LinAlgError:
        return -np.inf
    z = sla.solve_triangular(L, yb, lower=True, check_finite=False)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * yb.size * np.log(2 * np.pi))


@dataclass
class FitInfo:
    loglik: float
    starts: int
    converged: int
    si_loglik: float | None = None
    messages: list[str] = field(default_factory=list)


def _standardize(ts: TrainingSet) -> tuple[TrainingSet, float, float]:
    mean = float(ts.y.mean())
    scale = float(ts.y.std())
    if not np.isfinite(scale) or scale <= 1e-12 * max(1.0, abs(mean)):
        scale = 1.0
    g = None if ts.grads is None else ts.grads / scale
    return TrainingSet(ts.thetas, (ts.y - mean) / scale, g, ts.target), mean, scale


def fit_hyperparams(ts: TrainingSet, n_starts: int = 8, seed: int = 0, fit_epsilon: bool | None = None,
                    standardize: bool = True) -> tuple[Hyperparams, FitInfo]:
    """Maximum-likelihood (alpha, beta, gamma), then epsilon with those frozen.

    Returned parameters live in the standardized label units used by ``train``.
    """
    if standardize:
        ts, _, _ = _standardize(ts)
    X, y = ts.thetas, ts.y
    T = ts.T
    d2 = sq_dists(X, X)
    off = d2[np.triu_indices(T, 1)]
    med = float(np.median(off[off > 0])) if np.any(off > 0) else 1.0
    vy = max(float(np.var(y)), 1e-12) if T > 1 else 1.0
    rng = np.random.default_rng(seed)
    lo = np.array([np.log(1e-2 * vy), np.log(1e-3 / med), np.log(1e-8 * vy)])
    hi = np.array([np.log(1e2 * vy), np.log(1e3 / med), np.log(vy)])
    bounds = [LOG_BOUNDS["alpha"], (LOG_BOUNDS["beta"][0] - np.log(med), LOG_BOUNDS["beta"][1] - np.log(med)),
              LOG_BOUNDS["gamma"]]

    def neg(p):
        ll, g = log_marginal_likelihood(p, X, y, grad=True, d2=d2)
        if not np.isfinite(ll):
            return 1e25, np.zeros(3)
        return -ll, -g

    best = None
    converged = 0
    msgs = []
    for _ in range(n_starts):
        p0 = rng.uniform(lo, hi)
        res = minimize(neg, p0, jac=True, method="L-BFGS-B", bounds=bounds)
        converged += bool(res.success)
        if not res.success:
            msgs.append(str(res.message))
        if best is None or res.fun < best.fun:
            best = res
    if best is None or best.fun >= 1e25:
        raise GpError("log marginal likelihood is not finite for any start")
    a, b, g = np.exp(best.x)
    info = FitInfo(-float(best.fun), n_starts, converged, messages=msgs)
    if converged == 0:
        log.warning("no MLE start converged; keeping best parameters found")
    eps = None
    if fit_epsilon is None:
        fit_epsilon = ts.grads is not None
    if fit_epsilon:
        if ts.grads is None:
            raise ValueError("epsilon fit needs gradient labels")

        def neg_eps(le):
            ll = si_log_marginal_likelihood(Hyperparams(a, b, g, float(np.exp(le))), X, y, ts.grads)
            return -ll if np.isfinite(ll) else 1e25

        r = minimize_scalar(neg_eps, bounds=LOG_BOUNDS["epsilon"], method="bounded", options={"xatol": 0.05})
        eps = float(np.exp(r.x))
        info.si_loglik = -float(r.fun)
    return Hyperparams(float(a), float(b), float(g), eps), info


# -- model -------------------------------------------------------------------------


@dataclass(eq=False)
class GpModel:
    hyperparams: Hyperparams  # standardized units
    thetas: np.ndarray
    weights: np.ndarray
    chol: np.ndarray
    mode: str
    y_mean: float = 0.0
    y_scale: float = 1.0
    target: str = ""
    train_hash: str = ""
    jitter: float = 0.0
    clamped: int = 0

    @property
    def T(self) -> int:
        return self.thetas.shape[0]

    @property
    def M(self) -> int:
        return self.thetas.shape[1]

    def cross_cov(self, theta) -> np.ndarray:
        """Covariance between y(theta) and the stacked training labels."""
        h = self.hyperparams
        d = np.asarray(theta, dtype=float)[None, :] - self.thetas
        k = h.alpha * np.exp(-0.5 * h.beta * np.einsum("ij,ij->i", d, d))
        if self.mode == "plain":
            return k
        # cov(y(theta), grad y(theta_t)) = beta k_t (theta - theta_t)
        return np.concatenate([k, (h.beta * k[:, None] * d).ravel()])


def train(ts: TrainingSet, h: Hyperparams | None = None, mode: str = "plain", standardize: bool = True,
          seed: int = 0) -> GpModel:
    """Factorize the training covariance and solve for the posterior weights.

    ``h`` is in standardized label units when ``standardize`` is set (as
    returned by ``fit_hyperparams``); it is fitted here when omitted.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "si" and ts.grads is None:
        raise ValueError("sensitivity-informed training needs gradient labels")
    raw_hash = ts.content_hash()
    mean, scale = 0.0, 1.0
    if standardize:
        ts, mean, scale = _standardize(ts)
    if h is None:
        h, _ = fit_hyperparams(ts, seed=seed, fit_epsilon=(mode == "si"), standardize=False)
    S = build_cov(ts, h, mode)
    L, jit = cholesky_jitter(S)
    del S
    yb = ts.y if mode == "plain" else np.concatenate([ts.y, ts.grads.ravel()])
    w = sla.cho_solve((L, True), yb, check_finite=False)
    return GpModel(h, ts.thetas.copy(), w, L, mode, mean, scale, ts.target, raw_hash, jit)


def predict(m: GpModel, theta, return_std: bool = False, tol: float = 1e-10):
    """Posterior mean and variance (or standard deviation) at one test point."""
    c = m.cross_cov(theta)
    mean = float(c @ m.weights)
    z = sla.solve_triangular(m.chol, c, lower=True, check_finite=False)
    var = m.hyperparams.alpha - float(z @ z)
    if var < 0:
        if var < -tol * m.hyperparams.alpha:
            log.warning("posterior variance %.3e clamped to zero", var)
        m.clamped += 1
        var = 0.0
    mean = m.y_mean + m.y_scale * mean
    var = m.y_scale ** 2 * var
    return (mean, np.sqrt(var)) if return_std else (mean, var)


def predict_many(m: GpModel, thetas, return_std: bool = False) -> tuple[np.ndarray, np.ndarray]:
    out = [predict(m, th, return_std) for th in np.atleast_2d(thetas)]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def mean_grad(m: GpModel, theta) -> np.ndarray:
    """Gradient of the posterior mean with respect to the test point."""
    h = m.hyperparams
    theta = np.asarray(theta, dtype=float)
    d = theta[None, :] - m.thetas
    k = h.alpha * np.exp(-0.5 * h.beta * np.einsum("ij,ij->i", d, d))
    T = m.T
    wy = m.weights[:T]
    g = -(h.beta * k * wy) @ d
    if m.mode == "si":
        U = m.weights[T:].reshape(T, m.M)
        proj = np.einsum("ij,ij->i", d, U)
        g += h.beta * (k @ U) - h.beta ** 2 * (k * proj) @ d
    return m.y_scale * g


# -- persistence -------------------------------------------------------------------


def model_to_dict(m: GpModel) -> dict:
    return {
        "target": m.target,
        "mode": m.mode,
        "hyperparams": m.hyperparams.to_dict(),
        "thetas": m.thetas.tolist(),
        "weights": m.weights.tolist(),
        "y_mean": m.y_mean,
        "y_scale": m.y_scale,
        "jitter": m.jitter,
        "train_hash": m.train_hash,
    }


def model_from_dict(d: dict) -> GpModel:
    h = Hyperparams.from_dict(d["hyperparams"])
    X = np.asarray(d["thetas"], dtype=float)
    S = build_cov(X, h, d["mode"])
    if d.get("jitter"):
        S[np.diag_indices_from(S)] += d["jitter"]
    L = sla.cholesky(S, lower=True, overwrite_a=True, check_finite=False)
    return GpModel(h, X, np.asarray(d["weights"], dtype=float), L, d["mode"], d["y_mean"], d["y_scale"],
                   d.get("target", ""), d.get("train_hash", ""), d.get("jitter", 0.0))


def save_model(m: GpModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(m), fh)


def load_model(path) -> GpModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
