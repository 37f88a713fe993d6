"""Backend selection for the hot loops.

The compiled extension ``ifsem._ckernels`` is used when it was built; the
numpy/pure-Python module ``ifsem._pykernels`` is the fallback.  Setting
``IFSEM_BACKEND=python`` forces the fallback.
"""
import os

import numpy as np

from ifsem import _pykernels

try:
    from ifsem import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("IFSEM_BACKEND", "").lower() != "python":
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    names = {"python": _pykernels}
    if _ckernels is not None:
        names["cython"] = _ckernels
    return names


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def responsibilities(X, means, sigmas, log_priors, out=None, backend=None):
    """Posterior over mixture components for each row of ``X``.

    Returns ``(P, ll)`` where ``P`` is ``(N, M)`` row-stochastic and ``ll``
    holds the log mixture density of each row.
    """
    impl = available_backends()[backend] if backend else _impl
    X = _c(X)
    P = np.empty((X.shape[0], len(sigmas))) if out is None else out
    ll = impl.responsibilities(X, _c(means), _c(sigmas), _c(log_priors), P)
    return P, np.asarray(ll)


def mixture_log_density(X, means, sigmas, log_priors, backend=None):
    impl = available_backends()[backend] if backend else _impl
    return np.asarray(impl.mixture_log_density(_c(X), _c(means), _c(sigmas), _c(log_priors)))


def chaos_game(scales, rotations, translations, choices, start, burn_in, backend=None):
    impl = available_backends()[backend] if backend else _impl
    return np.asarray(impl.chaos_game(_c(scales), _c(rotations), _c(translations),
                                      np.ascontiguousarray(choices, dtype=np.intp),
                                      _c(start), int(burn_in)))
