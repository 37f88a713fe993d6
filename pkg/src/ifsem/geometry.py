"""Similitudes, spherical Gaussians and rotation utilities.

A similitude maps ``x -> s * R @ x + t`` with a positive scale ``s``, a
proper rotation ``R`` and a translation ``t``.  All objects here are small
immutable values; functions never modify their arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ifsem.errors import DimensionError

__all__ = [
    "Similitude",
    "SphericalGaussian",
    "apply",
    "compose",
    "invert",
    "transform_gaussian",
    "log_density",
    "random_rotation",
    "optimal_rotation",
    "rotation_2d",
    "is_rotation",
]

ROTATION_TOL = 1e-9
LOG_2PI = math.log(2.0 * math.pi)


def is_rotation(R, tol=ROTATION_TOL):
    """Return True if ``R`` is square, orthonormal and has determinant +1."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        return False
    eye = np.eye(R.shape[0])
    if np.linalg.norm(R.T @ R - eye) > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class Similitude:
    """The map ``x -> s * R @ x + t``.

    Parameters
    ----------
    s : float
        Positive scale.
    R : array_like, shape (H, H)
        Proper rotation matrix.
    t : array_like, shape (H,)
        Translation.
    """

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float, ndmin=2)
        t = np.array(self.t, dtype=float).reshape(-1)
        s = float(self.s)
        if not s > 0 or not math.isfinite(s):
            raise ValueError(f"scale must be positive and finite, got {s}")
        if R.shape != (t.size, t.size):
            raise DimensionError(
                f"rotation shape {R.shape} does not match translation length {t.size}")
        if not is_rotation(R):
            raise ValueError("R is not a proper rotation matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def dim(self):
        return self.t.size

    @classmethod
    def identity(cls, dim):
        return cls(1.0, np.eye(dim), np.zeros(dim))

    @property
    def matrix(self):
        """The linear part ``s * R``."""
        return self.s * self.R

    def __call__(self, x):
        return apply(self, x)

    def allclose(self, other, atol=1e-12):
        return (self.dim == other.dim
                and abs(self.s - other.s) <= atol
                and np.allclose(self.R, other.R, rtol=0, atol=atol)
                and np.allclose(self.t, other.t, rtol=0, atol=atol))

    def __repr__(self):
        return (f"Similitude(s={self.s!r}, R={self.R.tolist()!r}, "
                f"t={self.t.tolist()!r})")


@dataclass(frozen=True, eq=False)
class SphericalGaussian:
    """Isotropic Gaussian with mean ``mu`` and standard deviation ``sigma``."""

    mu: np.ndarray
    sigma: float

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        sigma = float(self.sigma)
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        mu.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self):
        return self.mu.size

    @classmethod
    def standard(cls, dim):
        """The standard normal ``N(0, I)`` in ``dim`` dimensions."""
        return cls(np.zeros(dim), 1.0)


def _check_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise DimensionError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


def apply(f, x):
    """Apply similitude ``f`` to a point or to the rows of an ``(N, H)`` array."""
    x = _check_points(x, f.dim)
    return f.s * (x @ f.R.T) + f.t


def compose(outer, inner):
    """Return the similitude ``x -> outer(inner(x))``."""
    if outer.dim != inner.dim:
        raise DimensionError(f"cannot compose dimensions {outer.dim} and {inner.dim}")
    return Similitude(outer.s * inner.s,
                      outer.R @ inner.R,
                      outer.s * (outer.R @ inner.t) + outer.t)


def invert(f):
    """Return the inverse similitude ``y -> R^T (y - t) / s``."""
    Rt = f.R.T
    return Similitude(1.0 / f.s, Rt, -(Rt @ f.t) / f.s)


def transform_gaussian(f, g):
    """Image of the spherical Gaussian ``g`` under ``f``.

    A similitude maps ``N(mu, sigma^2 I)`` to ``N(s R mu + t, (s sigma)^2 I)``.
    """
    if f.dim != g.dim:
        raise DimensionError(f"similitude dimension {f.dim} != gaussian dimension {g.dim}")
    return SphericalGaussian(f.s * (f.R @ g.mu) + f.t, f.s * g.sigma)


def log_density(g, x):
    """Log density of spherical Gaussian ``g`` at ``x``.

    ``x`` may be a single point or an ``(N, H)`` array; the result is a float
    or an array of length ``N`` accordingly.
    """
    x = _check_points(x, g.dim)
    H = g.dim
    sq = np.sum((x - g.mu) ** 2, axis=-1)
    return -0.5 * H * LOG_2PI - H * math.log(g.sigma) - sq / (2.0 * g.sigma ** 2)


def rotation_2d(angle):
    """Counter-clockwise rotation by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def random_rotation(dim, rng):
    """Draw a rotation matrix from the Haar measure on SO(dim).

    Uses the QR decomposition of a standard Gaussian matrix with the signs of
    ``diag(R)`` absorbed into ``Q``; a determinant of -1 is fixed by negating
    the first column.
    """
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    Z = rng.standard_normal((dim, dim))
    Q, R = np.linalg.qr(Z)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    Q = Q * d
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def optimal_rotation(A):
    """Rotation maximizing ``tr(A^T R)`` over SO(H).

    With ``A = U S V^T`` the maximizer is ``U diag(1, ..., 1, det(U V^T)) V^T``.
    For rank-deficient ``A`` the maximizer is not unique and any one of them
    is returned.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    U, _, Vt = np.linalg.svd(A)
    d = np.ones(A.shape[0])
    d[-1] = np.sign(np.linalg.det(U @ Vt))
    return (U * d) @ Vt
