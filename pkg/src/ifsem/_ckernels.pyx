# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: mixture responsibilities and the chaos game.

Mirrors ``ifsem._pykernels`` exactly; see that module for the contracts.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef void _prepare(const double[::1] sigmas, const double[::1] log_priors, int H,
                   double[::1] const_term, double[::1] inv_two_var) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(sigmas.shape[0]):
        const_term[j] = log_priors[j] - H * log(sigmas[j]) - 0.5 * H * LOG_2PI
        inv_two_var[j] = 1.0 / (2.0 * sigmas[j] * sigmas[j])


cdef double _row_log_joint(const double[:, ::1] X, Py_ssize_t i,
                           const double[:, ::1] means,
                           const double[::1] const_term,
                           const double[::1] inv_two_var,
                           double[::1] row) noexcept nogil:
    """Fill ``row`` with log joint densities of point i and return their max."""
    cdef Py_ssize_t j, h
    cdef Py_ssize_t M = means.shape[0]
    cdef Py_ssize_t H = means.shape[1]
    cdef double d2, diff, lj
    cdef double best = -INFINITY
    for j in range(M):
        if const_term[j] == -INFINITY:
            row[j] = -INFINITY
            continue
        d2 = 0.0
        for h in range(H):
            diff = X[i, h] - means[j, h]
            d2 = d2 + diff * diff
        lj = const_term[j] - d2 * inv_two_var[j]
        row[j] = lj
        if lj > best:
            best = lj
    return best


def responsibilities(const double[:, ::1] X, const double[:, ::1] means,
                     const double[::1] sigmas, const double[::1] log_priors,
                     double[:, ::1] P):
    cdef Py_ssize_t N = X.shape[0]
    cdef Py_ssize_t M = means.shape[0]
    cdef int H = <int> means.shape[1]
    cdef Py_ssize_t i, j
    cdef double best, total, lse
    const_term_arr = np.empty(M)
    inv_arr = np.empty(M)
    ll_arr = np.empty(N)
    cdef double[::1] const_term = const_term_arr
    cdef double[::1] inv_two_var = inv_arr
    cdef double[::1] ll = ll_arr
    _prepare(sigmas, log_priors, H, const_term, inv_two_var)
    with nogil:
        for i in range(N):
            best = _row_log_joint(X, i, means, const_term, inv_two_var, P[i])
            if best == -INFINITY:
                for j in range(M):
                    P[i, j] = 0.0
                ll[i] = -INFINITY
                continue
            total = 0.0
            for j in range(M):
                P[i, j] = exp(P[i, j] - best)
                total = total + P[i, j]
            lse = best + log(total)
            for j in range(M):
                P[i, j] = P[i, j] / total
            ll[i] = lse
    return ll_arr


def mixture_log_density(const double[:, ::1] X, const double[:, ::1] means,
                        const double[::1] sigmas, const double[::1] log_priors):
    cdef Py_ssize_t N = X.shape[0]
    cdef Py_ssize_t M = means.shape[0]
    cdef int H = <int> means.shape[1]
    cdef Py_ssize_t i, j
    cdef double best, total
    const_term_arr = np.empty(M)
    inv_arr = np.empty(M)
    row_arr = np.empty(M)
    ll_arr = np.empty(N)
    cdef double[::1] const_term = const_term_arr
    cdef double[::1] inv_two_var = inv_arr
    cdef double[::1] row = row_arr
    cdef double[::1] ll = ll_arr
    _prepare(sigmas, log_priors, H, const_term, inv_two_var)
    with nogil:
        for i in range(N):
            best = _row_log_joint(X, i, means, const_term, inv_two_var, row)
            if best == -INFINITY:
                ll[i] = -INFINITY
                continue
            total = 0.0
            for j in range(M):
                total = total + exp(row[j] - best)
            ll[i] = best + log(total)
    return ll_arr


def chaos_game(const double[::1] scales, const double[:, :, ::1] rotations,
               const double[:, ::1] translations, const cnp.intp_t[::1] choices,
               const double[::1] start, Py_ssize_t burn_in):
    cdef Py_ssize_t steps = choices.shape[0]
    cdef Py_ssize_t H = start.shape[0]
    cdef Py_ssize_t n = steps - burn_in if steps > burn_in else 0
    cdef Py_ssize_t step, a, b, k
    cdef double acc, s
    out_arr = np.empty((n, H))
    x_arr = np.array(start, dtype=np.float64)
    y_arr = np.empty(H)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] x = x_arr
    cdef double[::1] y = y_arr
    with nogil:
        for step in range(steps):
            k = choices[step]
            s = scales[k]
            for a in range(H):
                acc = 0.0
                for b in range(H):
                    acc = acc + rotations[k, a, b] * x[b]
                y[a] = s * acc + translations[k, a]
            for a in range(H):
                x[a] = y[a]
            if step >= burn_in:
                for a in range(H):
                    out[step - burn_in, a] = x[a]
    return out_arr
