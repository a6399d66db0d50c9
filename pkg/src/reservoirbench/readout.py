"""Linear readouts on reservoir features.

Batch ridge and pseudoinverse solutions, recursive least squares, noise
injection, pruning strategies, effective degrees of freedom and conceptor
matrices.  Weights are stored as ``W_out`` of shape ``(outputs, features)`` so
that a prediction is ``phi(x) @ W_out.T``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

logger = logging.getLogger(__name__)

__all__ = [
    "ReadoutError",
    "DesignMatrix",
    "ReadoutWeights",
    "expand_features",
    "fit_ridge",
    "fit_pseudoinverse",
    "rls_fit",
    "noise_regularize",
    "prune_backward",
    "prune_random",
    "weighted_ridge",
    "effective_dof",
    "conceptor",
]


class ReadoutError(ValueError):
    """The requested solve is ill-posed."""


FEATURE_TAGS = {(1, False): "linear", (1, True): "linear+bias", (2, False): "poly2", (2, True): "poly2+bias", (3, False): "poly3", (3, True): "poly3+bias"}


@dataclass
class DesignMatrix:
    """Feature matrix with the tag of the map that produced it."""

    X: np.ndarray
    feature_map_tag: str = "linear"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise ValueError("design matrix must be T x F with F >= 1")


@dataclass
class ReadoutWeights:
    """Trained output map.

    Attributes
    ----------
    W_out : ndarray, shape (m, F)
    beta_used : float
    pruned_mask : ndarray of bool, optional
        True for features that were removed; their weights are exactly zero.
    """

    W_out: np.ndarray
    beta_used: float = 0.0
    pruned_mask: np.ndarray | None = None

    def __post_init__(self):
        self.W_out = np.atleast_2d(np.asarray(self.W_out, dtype=float))
        if not np.all(np.isfinite(self.W_out)):
            raise ReadoutError("readout weights are not finite")
        if self.pruned_mask is not None:
            self.pruned_mask = np.asarray(self.pruned_mask, dtype=bool)
            self.W_out[:, self.pruned_mask] = 0.0

    def predict(self, X) -> np.ndarray:
        X = X.X if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
        return X @ self.W_out.T

    def to_dict(self) -> dict:
        return {
            "W_out": self.W_out.tolist(),
            "beta": self.beta_used,
            "mask": None if self.pruned_mask is None else self.pruned_mask.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReadoutWeights":
        mask = doc.get("mask")
        return cls(np.asarray(doc["W_out"], dtype=float), float(doc.get("beta", 0.0)), None if mask is None else np.asarray(mask, dtype=bool))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def _matrix(X) -> np.ndarray:
    return X.X if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)


def _targets(Y) -> np.ndarray:
    Y = np.asarray(getattr(Y, "data", Y), dtype=float)
    return Y[:, None] if Y.ndim == 1 else Y


def expand_features(states, degree: int = 1, include_bias: bool = True) -> DesignMatrix:
    """Per-neuron polynomial features.

    ``degree=1`` keeps the states, ``2`` appends their squares and ``3``
    appends squares and cubes.  No cross terms are formed.  A trailing column
    of ones is added when ``include_bias`` is set.
    """
    if degree not in (1, 2, 3):
        raise ValueError("degree must be 1, 2 or 3")
    S = np.asarray(states, dtype=float)
    if S.ndim == 1:
        S = S[None, :]
    blocks = [S]
    if degree >= 2:
        blocks.append(S * S)
    if degree >= 3:
        blocks.append(S * S * S)
    if include_bias:
        blocks.append(np.ones((S.shape[0], 1)))
    return DesignMatrix(np.hstack(blocks), FEATURE_TAGS[(degree, bool(include_bias))])


def _spd_solve(A: np.ndarray, B: np.ndarray, retries: int = 3) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A`` by Cholesky.

    On failure a jitter of ``10 * eps * trace(A)`` is added, escalating ten-fold
    per retry.
    """
    jitter = 10.0 * np.finfo(float).eps * max(np.trace(A), np.finfo(float).tiny)
    eye = np.eye(A.shape[0])
    for attempt in range(retries + 1):
        M = A if attempt == 0 else A + jitter * 10.0 ** (attempt - 1) * eye
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            continue
        Z = _forward(L, B)
        return _backward(L.T, Z)
    raise ReadoutError("normal equations are singular; use beta > 0")


def _forward(L, B):
    return solve_triangular(L, B, lower=True, check_finite=False)


def _backward(U, B):
    return solve_triangular(U, B, lower=False, check_finite=False)


def fit_ridge(X, Y, beta: float = 1e-4) -> ReadoutWeights:
    """Ridge solution ``W_out = ((X^T X + beta I)^{-1} X^T Y)^T``.

    Raises
    ------
    ReadoutError
        If the system is singular at ``beta = 0``.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    A = _matrix(X)
    Yt = _targets(Y)
    if A.shape[0] != Yt.shape[0]:
        raise ValueError("X and Y must have the same number of rows")
    G = A.T @ A
    G[np.diag_indices_from(G)] += beta
    if beta == 0.0 and np.linalg.matrix_rank(A) < A.shape[1]:
        raise ReadoutError("X^T X is singular at beta = 0; use beta > 0")
    W = _spd_solve(G, A.T @ Yt)
    return ReadoutWeights(W.T, beta)


def fit_pseudoinverse(X, Y) -> ReadoutWeights:
    """Least-squares solution via ``(X^T X)^{-1} X^T``.

    Raises
    ------
    ReadoutError
        If ``X`` is rank deficient.
    """
    A = _matrix(X)
    Yt = _targets(Y)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise ReadoutError("design matrix is rank deficient; use ridge regression")
    Q, R = np.linalg.qr(A)
    W = _backward(R, Q.T @ Yt)
    return ReadoutWeights(W.T, 0.0)


def rls_fit(stream, n_features: int | None = None, n_outputs: int | None = None, forgetting: float = 1.0, delta_init: float = 1e4, W0=None) -> ReadoutWeights:
    """Recursive least squares over a stream of ``(x_t, y_t)`` pairs.

    Each sample applies::

        z = P x
        g = z / (forgetting + x^T z)
        W = W + (y - W x) g^T
        P = (P - g z^T) / forgetting

    starting from ``P = delta_init * I``.  ``P`` is re-symmetrised whenever
    its asymmetry exceeds ``1e-6``.
    """
    if not 0.0 < forgetting <= 1.0:
        raise ValueError("forgetting must lie in (0, 1]")
    if delta_init <= 0:
        raise ValueError("delta_init must be positive")
    it = iter(stream)
    first = next(it, None)
    if first is None:
        if n_features is None or n_outputs is None:
            raise ValueError("empty stream needs n_features and n_outputs")
        return ReadoutWeights(np.zeros((n_outputs, n_features)) if W0 is None else W0, 0.0)
    x0 = np.atleast_1d(np.asarray(first[0], dtype=float))
    y0 = np.atleast_1d(np.asarray(first[1], dtype=float))
    F, m = x0.size, y0.size
    W = np.zeros((m, F)) if W0 is None else np.array(W0, dtype=float)
    P = delta_init * np.eye(F)
    resym = 0

    def update(x, y):
        nonlocal W, P, resym
        z = P @ x
        g = z / (forgetting + x @ z)
        W = W + np.outer(y - W @ x, g)
        P = (P - np.outer(g, z)) / forgetting
        if np.max(np.abs(P - P.T)) > 1e-6:
            P = 0.5 * (P + P.T)
            resym += 1

    update(x0, y0)
    for x, y in it:
        update(np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float)))
    if resym:
        logger.info("rls_fit re-symmetrised P %d times", resym)
    return ReadoutWeights(W, 0.0)


def noise_regularize(states, sigma: float, seed: int = 0) -> np.ndarray:
    """Return ``states + sigma * N(0, 1)`` noise drawn from ``seed``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    S = np.asarray(states, dtype=float)
    if sigma == 0:
        return S.copy()
    rng = np.random.default_rng(seed)
    return S + sigma * rng.standard_normal(S.shape)


def _val_mse(X_tr, Y_tr, X_val, Y_val, keep, beta):
    W = np.zeros((Y_tr.shape[1], X_tr.shape[1]))
    if keep.any():
        W[:, keep] = fit_ridge(X_tr[:, keep], Y_tr, beta).W_out
    return float(np.mean((X_val @ W.T - Y_val) ** 2)), W


def temporal_split(X, Y, val_fraction: float = 0.2):
    """Split rows in time order; the last ``val_fraction`` become validation."""
    A = _matrix(X)
    Yt = _targets(Y)
    cut = int(round(len(A) * (1.0 - val_fraction)))
    return A[:cut], Yt[:cut], A[cut:], Yt[cut:]


def prune_backward(W_out, X_train, Y_train, X_val=None, Y_val=None, beta: float = 1e-4, patience: int = 3, min_features: int = 1) -> ReadoutWeights:
    """Greedy backward selection of readout features.

    Each round removes the feature whose removal gives the lowest validation
    MSE after refitting ridge on the survivors.  The search stops after
    ``patience`` consecutive rounds without improvement on the best seen
    validation MSE, and the best mask is returned.  Without an explicit
    validation set the last 20% of the training rows are used.
    """
    if X_val is None or Y_val is None:
        X_train, Y_train, X_val, Y_val = temporal_split(X_train, Y_train)
    Xt, Yt = _matrix(X_train), _targets(Y_train)
    Xv, Yv = _matrix(X_val), _targets(Y_val)
    if len(Xv) == 0:
        raise ValueError("validation split is empty")
    F = Xt.shape[1]
    keep = np.ones(F, dtype=bool)
    best_mse, best_W = _val_mse(Xt, Yt, Xv, Yv, keep, beta)
    best_keep = keep.copy()
    stall = 0
    while keep.sum() > min_features and stall < patience:
        trial = []
        for j in np.flatnonzero(keep):
            k = keep.copy()
            k[j] = False
            trial.append((_val_mse(Xt, Yt, Xv, Yv, k, beta)[0], j))
        mse, j = min(trial)
        keep[j] = False
        if mse < best_mse:
            best_mse, best_keep, stall = mse, keep.copy(), 0
            best_W = _val_mse(Xt, Yt, Xv, Yv, keep, beta)[1]
        else:
            stall += 1
    if best_keep.all():
        W0 = np.atleast_2d(np.asarray(getattr(W_out, "W_out", W_out), dtype=float))
        return ReadoutWeights(W0, beta, ~best_keep)
    return ReadoutWeights(best_W, beta, ~best_keep)


def prune_random(W_out, fraction: float, seed: int, X_train, Y_train, beta: float = 1e-4) -> ReadoutWeights:
    """Remove a uniformly random ``fraction`` of features and refit ridge."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    W0 = np.atleast_2d(np.asarray(getattr(W_out, "W_out", W_out), dtype=float))
    F = W0.shape[1]
    n_drop = min(int(round(fraction * F)), F - 1)
    if n_drop == 0:
        return ReadoutWeights(W0.copy(), beta, np.zeros(F, dtype=bool))
    rng = np.random.default_rng(seed)
    drop = np.zeros(F, dtype=bool)
    drop[rng.choice(F, size=n_drop, replace=False)] = True
    Xt, Yt = _matrix(X_train), _targets(Y_train)
    W = np.zeros((Yt.shape[1], F))
    W[:, ~drop] = fit_ridge(Xt[:, ~drop], Yt, beta).W_out
    return ReadoutWeights(W, beta, drop)


def weighted_ridge(X, Y, beta: float, D) -> ReadoutWeights:
    """Ridge with per-feature penalties, ``((X^T X + beta D)^{-1} X^T Y)^T``."""
    A = _matrix(X)
    Yt = _targets(Y)
    d = np.asarray(D, dtype=float)
    if d.ndim == 2:
        if np.count_nonzero(d - np.diag(np.diag(d))):
            raise ValueError("D must be diagonal")
        d = np.diag(d)
    if np.any(d < 0):
        raise ValueError("D must be non-negative")
    G = A.T @ A + beta * np.diag(d)
    return ReadoutWeights(_spd_solve(G, A.T @ Yt).T, beta)


def effective_dof(X, beta: float) -> float:
    """``sum_i s_i^2 / (s_i^2 + beta)`` over the singular values of ``X``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    s = np.linalg.svd(_matrix(X), compute_uv=False)
    s2 = s * s
    if beta == 0:
        return float(np.count_nonzero(s2 > s2.max() * 1e-12 * max(_matrix(X).shape)))
    return float(np.sum(s2 / (s2 + beta)))


def conceptor(states, alpha: float) -> np.ndarray:
    """``C = (R + alpha I)^{-1} R`` with ``R`` the state correlation matrix."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    S = np.asarray(states, dtype=float)
    R = S.T @ S / len(S)
    R = 0.5 * (R + R.T)
    vals, vecs = np.linalg.eigh(R)
    vals = np.clip(vals, 0.0, None)
    C = (vecs * (vals / (vals + alpha))) @ vecs.T
    return 0.5 * (C + C.T)
