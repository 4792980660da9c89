"""Random-feature approximations of the exact GP models.

Bochner sampling gives ``k(a, b) ~ alpha * z(a)' z(b)`` with
``z_d(theta) = sqrt(2/D) cos(v_d' theta + phi_d)``, ``v_d ~ N(0, beta I)`` and
``phi_d ~ U[0, 2 pi]``. Training then only inverts D x D matrices. In the
sensitivity-informed mode the Gram matrix of the stacked feature Jacobians is
formed through ``(S'S) o (V'V)`` without stacking the T*M rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .gp import GpError, Hyperparams, TrainingSet, _standardize, fit_hyperparams

log = logging.getLogger(__name__)

MODES = ("rf-gp", "rf-si-gp")
BLOCK = 256


@dataclass(frozen=True, eq=False)
class RfBasis:
    V: np.ndarray  # M x D
    phi: np.ndarray  # D
    beta: float
    seed: int

    @property
    def D(self) -> int:
        return self.V.shape[1]

    @property
    def M(self) -> int:
        return self.V.shape[0]


def draw_basis(M: int, D: int, beta: float, seed: int = 0) -> RfBasis:
    if D < 1:
        raise ValueError("D must be at least 1")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    rng = np.random.default_rng(seed)
    V = np.sqrt(beta) * rng.standard_normal((M, D))
    phi = rng.uniform(0.0, 2 * np.pi, D)
    return RfBasis(V, phi, float(beta), int(seed))


def features_z(b: RfBasis, theta) -> np.ndarray:
    """Feature vector (or T x D matrix for a batch of thetas)."""
    theta = np.asarray(theta, dtype=float)
    return np.sqrt(2.0 / b.D) * np.cos(theta @ b.V + b.phi)


def features_s(b: RfBasis, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return -np.sqrt(2.0 / b.D) * np.sin(theta @ b.V + b.phi)


def features_jac(b: RfBasis, theta) -> tuple[np.ndarray, np.ndarray]:
    """Return ``s(theta)`` and the D x M Jacobian with rows ``s_d v_d'``."""
    s = features_s(b, theta)
    return s, (s * b.V).T


@dataclass(eq=False)
class RfModel:
    basis: RfBasis
    hyperparams: Hyperparams  # standardized units
    mode: str
    gram: np.ndarray  # Z'D^{-1}Z (SI) or Z'Z (plain)
    weights: np.ndarray  # T5 vector
    cov_core: np.ndarray  # T6 matrix
    y_mean: float = 0.0
    y_scale: float = 1.0
    target: str = ""
    train_hash: str = ""
    train_data: TrainingSet | None = None
    clamped: int = 0


def _accumulate(ts: TrainingSet, b: RfBasis, si: bool, h: Hyperparams, block: int = BLOCK):
    """Gram matrices and projected labels, streamed over blocks of training rows."""
    D = b.D
    ZtZ = np.zeros((D, D))
    Zty = np.zeros(D)
    StS = np.zeros((D, D)) if si else None
    Sg = np.zeros(D) if si else None
    for lo in range(0, ts.T, block):
        X = ts.thetas[lo:lo + block]
        Z = features_z(b, X)
        ZtZ += Z.T @ Z
        Zty += Z.T @ ts.y[lo:lo + block]
        if si:
            S = features_s(b, X)
            StS += S.T @ S
            # sum_t s_t o (V' g_t)
            Sg += np.sum(S * (ts.grads[lo:lo + block] @ b.V), axis=0)
    return ZtZ, Zty, StS, Sg


def _chol(A: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        return sla.cho_factor(A, lower=True, check_finite=False), 0.0
    except sla.LinAlgError:
        pass
    scale = np.trace(A) / A.shape[0]
    rel = 1e-10
    while rel <= 1e-6 * (1 + 1e-9):
        B = A.copy()
        B[np.diag_indices_from(B)] += rel * scale
        try:
            return sla.cho_factor(B, lower=True, check_finite=False), rel * scale
        except sla.LinAlgError:
            rel *= 10
    raise GpError("random-feature system not positive definite after jitter escalation")


def train_rf(ts: TrainingSet, h: Hyperparams | None = None, b: RfBasis | None = None, mode: str = "rf-si-gp",
             D: int = 1600, seed: int = 0, standardize: bool = True, keep_data: bool = True) -> RfModel:
    """Train a random-feature GP on one scalar target.

    ``h`` is in standardized label units (as produced by ``gp.fit_hyperparams``);
    it is fitted on the exact covariance when omitted.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    si = mode == "rf-si-gp"
    if si and ts.grads is None:
        raise ValueError("rf-si-gp needs gradient labels")
    raw = ts
    mean, scale = 0.0, 1.0
    if standardize:
        ts, mean, scale = _standardize(ts)
    if h is None:
        h, _ = fit_hyperparams(ts, seed=seed, fit_epsilon=si, standardize=False)
    if si and h.epsilon is None:
        raise ValueError("rf-si-gp needs epsilon")
    if b is None:
        b = draw_basis(ts.M, D, h.beta, seed)
    if b.M != ts.M:
        raise ValueError("basis dimension does not match theta length")
    ZtZ, Zty, StS, Sg = _accumulate(ts, b, si, h)
    if si:
        G = ZtZ / h.gamma + (StS * (b.V.T @ b.V)) / h.epsilon
        rhs = Zty / h.gamma + Sg / h.epsilon
        A = h.alpha * G
        A[np.diag_indices_from(A)] += 1.0
    else:
        # plain mode: (alpha Z'Z + gamma I)^{-1} applied to Z'y and Z'Z
        G = ZtZ
        rhs = Zty
        A = h.alpha * G
        A[np.diag_indices_from(A)] += h.gamma
    cf, _ = _chol(A)
    w = sla.cho_solve(cf, rhs, check_finite=False)
    C = sla.cho_solve(cf, G, check_finite=False)
    C = 0.5 * (C + C.T)
    return RfModel(b, h, mode, G, w, C, mean, scale, raw.target, raw.content_hash(), raw if keep_data else None)


def predict_rf(m: RfModel, theta, return_std: bool = False, tol: float = 1e-8):
    """Posterior mean and variance at one test point; cost independent of T."""
    a = m.hyperparams.alpha
    z = features_z(m.basis, theta)
    mean = a * float(z @ m.weights)
    var = a * float(z @ z) - a * a * float(z @ (m.cov_core @ z))
    if var < 0:
        if var < -tol * a:
            log.warning("random-feature variance %.3e clamped to zero", var)
        m.clamped += 1
        var = 0.0
    mean = m.y_mean + m.y_scale * mean
    var = m.y_scale ** 2 * var
    return (mean, np.sqrt(var)) if return_std else (mean, var)


def predict_rf_many(m: RfModel, thetas, return_std: bool = False) -> tuple[np.ndarray, np.ndarray]:
    out = [predict_rf(m, th, return_std) for th in np.atleast_2d(thetas)]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def model_to_dict(m: RfModel) -> dict:
    if m.train_data is None:
        raise ValueError("model was trained without keep_data; cannot serialize")
    ts = m.train_data
    return {
        "target": m.target,
        "mode": m.mode,
        "hyperparams": m.hyperparams.to_dict(),
        "thetas": ts.thetas.tolist(),
        "y": ts.y.tolist(),
        "grads": None if ts.grads is None else ts.grads.tolist(),
        "weights": m.weights.tolist(),
        "y_mean": m.y_mean,
        "y_scale": m.y_scale,
        "train_hash": m.train_hash,
        "rf": {"seed": m.basis.seed, "D": m.basis.D},
    }


def model_from_dict(d: dict) -> RfModel:
    h = Hyperparams.from_dict(d["hyperparams"])
    ts = TrainingSet(np.asarray(d["thetas"]), np.asarray(d["y"]),
                     None if d.get("grads") is None else np.asarray(d["grads"]), d.get("target", ""))
    b = draw_basis(ts.M, int(d["rf"]["D"]), h.beta, int(d["rf"]["seed"]))
    return train_rf(ts, h, b, d["mode"])


def save_model(m: RfModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(m), fh)
