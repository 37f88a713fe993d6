"""Reference implementations of the hot loops, used when the compiled
extension is unavailable.

Every function here has a twin in ``ifsem._ckernels`` with the same
signature; the two agree to floating-point rounding.
"""
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# rows * components * dims per chunk; keeps temporaries around 32 MB
_CHUNK_ELEMS = 1 << 22


def _prepare(sigmas, log_priors, H):
    with np.errstate(divide="ignore"):
        const_term = log_priors - H * np.log(sigmas) - 0.5 * H * LOG_2PI
    inv_two_var = 1.0 / (2.0 * sigmas * sigmas)
    return const_term, inv_two_var


def _log_joint(X, means, const_term, inv_two_var):
    diff = X[:, None, :] - means[None, :, :]
    d2 = np.einsum("nmh,nmh->nm", diff, diff)
    return const_term[None, :] - d2 * inv_two_var[None, :]


def _row_chunks(N, M, H):
    step = max(1, _CHUNK_ELEMS // max(1, M * H))
    for lo in range(0, N, step):
        yield lo, min(N, lo + step)


def responsibilities(X, means, sigmas, log_priors, P):
    """Normalized mixture responsibilities.

    Parameters
    ----------
    X : ndarray, shape (N, H)
    means : ndarray, shape (M, H)
    sigmas : ndarray, shape (M,)
    log_priors : ndarray, shape (M,)
        May contain ``-inf`` for components with zero weight.
    P : ndarray, shape (N, M)
        Output buffer; row ``i`` receives the posterior over components.

    Returns
    -------
    ndarray, shape (N,)
        Log mixture density of each row of ``X``.
    """
    N, H = X.shape
    M = means.shape[0]
    const_term, inv_two_var = _prepare(sigmas, log_priors, H)
    ll = np.empty(N)
    with np.errstate(invalid="ignore", divide="ignore"):
        for lo, hi in _row_chunks(N, M, H):
            lj = _log_joint(X[lo:hi], means, const_term, inv_two_var)
            best = lj.max(axis=1)
            dead = best == -np.inf
            best[dead] = 0.0
            e = np.exp(lj - best[:, None])
            total = e.sum(axis=1)
            P[lo:hi] = e / total[:, None]
            ll[lo:hi] = best + np.log(total)
            if dead.any():
                P[lo:hi][dead] = 0.0
                ll[lo:hi][dead] = -np.inf
    return ll


def mixture_log_density(X, means, sigmas, log_priors):
    """Log mixture density of each row of ``X``; no responsibilities kept."""
    N, H = X.shape
    M = means.shape[0]
    const_term, inv_two_var = _prepare(sigmas, log_priors, H)
    ll = np.empty(N)
    with np.errstate(invalid="ignore", divide="ignore"):
        for lo, hi in _row_chunks(N, M, H):
            lj = _log_joint(X[lo:hi], means, const_term, inv_two_var)
            best = lj.max(axis=1)
            dead = best == -np.inf
            best[dead] = 0.0
            out = best + np.log(np.exp(lj - best[:, None]).sum(axis=1))
            out[dead] = -np.inf
            ll[lo:hi] = out
    return ll


def chaos_game(scales, rotations, translations, choices, start, burn_in):
    """Iterate randomly chosen maps from ``start``.

    ``choices[i]`` is the component applied at step ``i``.  The first
    ``burn_in`` iterates are discarded; the rest are returned as rows.
    """
    H = start.shape[0]
    steps = choices.shape[0]
    n = max(0, steps - burn_in)
    out = np.empty((n, H))
    # nested lists beat tiny numpy ops by an order of magnitude here
    S = scales.tolist()
    Rs = rotations.tolist()
    Ts = translations.tolist()
    x = [float(v) for v in start]
    dims = range(H)
    for step, k in enumerate(choices.tolist()):
        s, R, t = S[k], Rs[k], Ts[k]
        x = [s * sum(R[a][b] * x[b] for b in dims) + t[a] for a in dims]
        if step >= burn_in:
            out[step - burn_in] = x
    return out
