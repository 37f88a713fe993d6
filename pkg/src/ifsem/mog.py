"""Mixture-of-Gaussians baselines fitted by plain EM.

Two covariance structures are supported: ``spherical`` (one variance per
component) and ``full`` (an unconstrained covariance matrix per component).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ifsem import kernels
from ifsem.errors import DimensionError, ParseError

log = logging.getLogger(__name__)

__all__ = ["MogModel", "MODES", "mog_log_density", "mog_responsibilities", "fit_mog",
           "mog_to_dict", "mog_from_dict", "save_mog", "load_mog"]

MODES = ("spherical", "full")
COLLAPSE_VAR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class MogModel:
    """A Gaussian mixture.

    ``covariances`` has shape ``(K,)`` (variances) in spherical mode and
    ``(K, H, H)`` in full mode.
    """

    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    mode: str = "spherical"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        means = np.array(self.means, dtype=float, ndmin=2)
        cov = np.array(self.covariances, dtype=float)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        K, H = means.shape
        expected = (K,) if self.mode == "spherical" else (K, H, H)
        if cov.shape != expected:
            raise DimensionError(f"covariances shape {cov.shape}, expected {expected}")
        if weights.shape != (K,) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-12:
            raise ValueError("weights must be a probability vector of length K")
        if self.mode == "spherical":
            if np.any(cov <= 0):
                raise ValueError("variances must be positive")
        else:
            if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
                raise ValueError("covariances must be symmetric")
            np.linalg.cholesky(cov)  # raises LinAlgError if not positive definite
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "weights", weights / weights.sum())

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def H(self):
        return self.means.shape[1]


def _component_log_densities(model, X):
    """``(N, K)`` matrix of ``log w_k + log N(x_i | mu_k, Sigma_k)``."""
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    N, H = X.shape
    if model.mode == "spherical":
        d2 = np.sum((X[:, None, :] - model.means[None]) ** 2, axis=2)
        var = model.covariances
        return (log_w - 0.5 * H * LOG_2PI - 0.5 * H * np.log(var))[None] - d2 / (2 * var)
    out = np.empty((N, model.K))
    for k in range(model.K):
        L = np.linalg.cholesky(model.covariances[k])
        sol = np.linalg.solve(L, (X - model.means[k]).T)
        out[:, k] = (log_w[k] - 0.5 * H * LOG_2PI - np.sum(np.log(np.diag(L)))
                     - 0.5 * np.sum(sol ** 2, axis=0))
    return out


def _check(model, X):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != model.H:
        raise DimensionError(f"model dimension {model.H} but points have shape {X.shape}")
    return X


def mog_responsibilities(model, X):
    """Return ``(R, ll)``: normalized responsibilities and per-row log density."""
    X = np.atleast_2d(_check(model, X))
    if model.mode == "spherical":
        with np.errstate(divide="ignore"):
            log_w = np.log(model.weights)
        return kernels.responsibilities(X, model.means, np.sqrt(model.covariances), log_w)
    lj = _component_log_densities(model, X)
    best = lj.max(axis=1, keepdims=True)
    e = np.exp(lj - best)
    total = e.sum(axis=1, keepdims=True)
    return e / total, (best + np.log(total))[:, 0]


def mog_log_density(model, x):
    """Log density at a point or at each row of an ``(N, H)`` array."""
    x = _check(model, x)
    _, ll = mog_responsibilities(model, np.atleast_2d(x))
    return float(ll[0]) if x.ndim == 1 else ll


def _global_cov(X, mode):
    centered = X - X.mean(axis=0)
    if mode == "spherical":
        return float(np.sum(centered ** 2)) / centered.size
    return centered.T @ centered / X.shape[0]


def _regularize(cov):
    H = cov.shape[-1]
    return cov + 1e-9 * np.trace(cov) / H * np.eye(H)


def fit_mog(data, K, mode="spherical", iterations=100, rng=None, init=None, restarts=1):
    """Fit a Gaussian mixture by EM on the full data set.

    Means start on ``K`` distinct random data points, every component gets
    the global (co)variance and weights start uniform, unless ``init``
    supplies a starting model.  A component whose variance collapses below
    1e-12 (or whose mass vanishes) is re-seeded on a random data point with
    the global (co)variance.

    With ``restarts > 1`` (and no ``init``) several random starts are run
    in sequence and the one with the highest final training log-likelihood
    is kept; ties go to the earliest.

    Returns
    -------
    (MogModel, list of float)
        The fitted model and the mean training log-likelihood before each
        M-step followed by the final value (``iterations + 1`` entries).
    """
    X = np.asarray(data, dtype=float)
    N, H = X.shape
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    rng = np.random.default_rng() if rng is None else rng
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    if restarts > 1 and init is None:
        runs = [fit_mog(X, K, mode, iterations, rng) for _ in range(restarts)]
        return max(runs, key=lambda run: run[1][-1])
    glob = _global_cov(X, mode)
    if init is None:
        idx = rng.choice(N, size=K, replace=False)
        cov = np.full(K, glob) if mode == "spherical" else np.repeat(
            _regularize(glob)[None], K, axis=0)
        model = MogModel(X[idx], cov, np.full(K, 1.0 / K), mode)
    else:
        if init.mode != mode or init.K != K or init.H != H:
            raise ValueError("init does not match K, H and mode")
        model = init
    trace = []
    for _ in range(iterations):
        R, ll = mog_responsibilities(model, X)
        trace.append(float(ll.mean()))
        model = _m_step(X, R, mode, glob, rng)
    trace.append(float(mog_responsibilities(model, X)[1].mean()))
    return model, trace


def _m_step(X, R, mode, glob, rng):
    N, H = X.shape
    mass = R.sum(axis=0)
    K = mass.size
    means = np.empty((K, H))
    covs = np.empty((K,) if mode == "spherical" else (K, H, H))
    for k in range(K):
        if not mass[k] > 0:
            means[k], covs[k] = _reseed(X, glob, mode, rng, k)
            continue
        means[k] = R[:, k] @ X / mass[k]
        diff = X - means[k]
        if mode == "spherical":
            covs[k] = float(R[:, k] @ np.sum(diff ** 2, axis=1)) / (H * mass[k])
            collapsed = covs[k] < COLLAPSE_VAR
        else:
            covs[k] = _regularize((diff * R[:, k, None]).T @ diff / mass[k])
            collapsed = np.trace(covs[k]) / H < COLLAPSE_VAR
            if not collapsed:
                try:
                    np.linalg.cholesky(covs[k])
                except np.linalg.LinAlgError:
                    collapsed = True
        if collapsed:
            means[k], covs[k] = _reseed(X, glob, mode, rng, k)
    weights = mass / mass.sum()
    return MogModel(means, covs, weights, mode)


def _reseed(X, glob, mode, rng, k):
    log.info("mixture component %d collapsed; re-seeding", k)
    mean = X[rng.integers(X.shape[0])]
    return mean, (glob if mode == "spherical" else _regularize(glob))


def mog_to_dict(model):
    return {"k": model.K, "h": model.H, "mode": model.mode,
            "means": model.means.tolist(), "covariances": model.covariances.tolist(),
            "weights": model.weights.tolist()}


def mog_from_dict(obj):
    try:
        model = MogModel(obj["means"], obj["covariances"], obj["weights"], obj["mode"])
    except (KeyError, TypeError, ValueError, np.linalg.LinAlgError) as exc:
        raise ParseError(f"malformed mixture model ({exc})") from None
    if model.K != int(obj.get("k", model.K)) or model.H != int(obj.get("h", model.H)):
        raise ParseError("k/h fields disagree with the parameter arrays")
    return model


def save_mog(model, path):
    Path(path).write_text(json.dumps(mog_to_dict(model), indent=1) + "\n")


def load_mog(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None
    return mog_from_dict(obj)
