"""The IFS probability model.

An :class:`IfsModel` with ``K`` components and maximum depth ``D`` is a
mixture of spherical Gaussians, one per *code*: a sequence of component
indices of length ``0..D``.  The Gaussian for code ``(c1, ..., cd)`` is the
image of ``N(0, I)`` under ``post o f_c1 o ... o f_cd`` and its weight is
``v[d] * w[c1] * ... * w[cd]``.

Component indices in codes are 0-based.  Codes are always enumerated in
canonical order: by length, then lexicographically.  Every matrix whose
columns run over codes (responsibilities in particular) uses this order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ifsem import kernels
from ifsem.errors import CapacityError, DimensionError, ParseError
from ifsem.geometry import Similitude, SphericalGaussian, is_rotation, optimal_rotation

__all__ = [
    "IfsModel",
    "CodeTable",
    "DEFAULT_TABLE_LIMIT",
    "enumerate_codes",
    "num_codes",
    "build_code_table",
    "code_log_prior",
    "log_density",
    "sample",
    "sample_attractor",
    "mean_depth",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

DEFAULT_TABLE_LIMIT = 10 ** 6
SIMPLEX_TOL = 1e-12
LOAD_TOL = 1e-6
# compositions longer than this are re-projected onto SO(H)
REORTHO_EVERY = 16


def _as_simplex(p, name, tol=SIMPLEX_TOL):
    p = np.array(p, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be finite and non-negative")
    total = p.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"{name} must sum to 1 (sum is {total!r})")
    return p / total


@dataclass(frozen=True, eq=False)
class IfsModel:
    """Parameters of an IFS mixture model.

    Parameters
    ----------
    components : sequence of Similitude
        The ``K`` component maps.
    w : array_like, shape (K,)
        Component weights, a probability vector.
    v : array_like, shape (D + 1,)
        Depth weights indexed by depth ``0..D``.
    post : Similitude
        Post-transform applied after the component compositions.
    """

    components: tuple
    w: np.ndarray
    v: np.ndarray
    post: Similitude

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("an IFS needs at least one component")
        H = self.post.dim
        for f in comps:
            if f.dim != H:
                raise DimensionError("all components must share the post-transform's dimension")
        w = _as_simplex(self.w, "w")
        v = _as_simplex(self.v, "v")
        if w.size != len(comps):
            raise DimensionError(f"{len(comps)} components but {w.size} weights")
        w.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)

    @property
    def H(self):
        return self.post.dim

    @property
    def K(self):
        return len(self.components)

    @property
    def D(self):
        return self.v.size - 1

    def with_depth(self, depth):
        """Copy of this model with maximum depth ``depth`` and uniform depth weights."""
        return replace(self, v=np.full(depth + 1, 1.0 / (depth + 1)))

    def component_arrays(self):
        """Return ``(scales, rotations, translations)`` stacked over components."""
        return (np.array([f.s for f in self.components]),
                np.stack([f.R for f in self.components]),
                np.stack([f.t for f in self.components]))


def num_codes(K, D):
    """Number of codes of length ``0..D`` over ``K`` symbols."""
    if K == 1:
        return D + 1
    return (K ** (D + 1) - 1) // (K - 1)


def _check_capacity(K, D, limit):
    if K < 1 or D < 0:
        raise ValueError(f"need K >= 1 and D >= 0, got K={K}, D={D}")
    if K ** (D + 1) > limit:
        raise CapacityError(f"K^(D+1) = {K}^{D + 1} exceeds the code table limit {limit}")


def enumerate_codes(K, D, limit=DEFAULT_TABLE_LIMIT):
    """All codes of length ``0..D`` over ``range(K)`` in canonical order."""
    _check_capacity(K, D, limit)
    codes = [()]
    level = [()]
    for _ in range(D):
        level = [c + (k,) for c in level for k in range(K)]
        codes.extend(level)
    return codes


@dataclass(frozen=True, eq=False)
class CodeTable:
    """Per-code compositions and endpoint Gaussians in canonical order.

    Attributes
    ----------
    K, D, H : int
        Alphabet size, maximum code length and dimension.
    offsets : ndarray, shape (D + 2,)
        Codes of length ``d`` occupy rows ``offsets[d]:offsets[d + 1]``.
    depths : ndarray of int, shape (M,)
    first : ndarray of int, shape (M,)
        First digit of each code, ``-1`` for the empty code.
    tail : ndarray of int, shape (M,)
        Row of the code with its first digit removed, ``-1`` for the empty code.
    scales, rotations, translations : ndarray
        The inner composition ``f_c1 o ... o f_cd`` of each code, excluding
        the post-transform.
    means, sigmas : ndarray
        Endpoint Gaussians; they include the post-transform iff
        ``include_post``.
    log_prior : ndarray, shape (M,)
        ``log v[d] + sum(log w[c_i])``; ``-inf`` where a weight is zero.
    """

    K: int
    D: int
    H: int
    include_post: bool
    offsets: np.ndarray
    depths: np.ndarray
    first: np.ndarray
    tail: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    log_prior: np.ndarray

    @property
    def M(self):
        return self.depths.size

    @property
    def M_inner(self):
        """Number of codes of length at most ``D - 1``."""
        return int(self.offsets[self.D])

    def code(self, j):
        """The digits of row ``j`` as a tuple."""
        d = int(self.depths[j])
        local = int(j - self.offsets[d])
        digits = []
        for _ in range(d):
            local, r = divmod(local, self.K)
            digits.append(r)
        return tuple(reversed(digits))

    @property
    def codes(self):
        return [self.code(j) for j in range(self.M)]

    def inner(self, j):
        """Inner composition of row ``j`` as a :class:`Similitude`."""
        return Similitude(self.scales[j], self.rotations[j], self.translations[j])

    def endpoint(self, j):
        return SphericalGaussian(self.means[j], self.sigmas[j])

    def component_columns(self, k):
        """Rows of the codes ``(k,) + c`` for every code ``c`` of length < D.

        The result is ordered like the tails ``c``, i.e. entry ``i`` is the
        row of ``(k,) + code(i)``.
        """
        cols = [np.arange(self.offsets[d + 1] + k * self.K ** d,
                          self.offsets[d + 1] + (k + 1) * self.K ** d)
                for d in range(self.D)]
        return np.concatenate(cols) if cols else np.empty(0, dtype=np.intp)

    def prefix(self, depth):
        """The table restricted to codes of length at most ``depth``."""
        m = int(self.offsets[depth + 1])
        return replace(self, D=depth, offsets=self.offsets[:depth + 2],
                       depths=self.depths[:m], first=self.first[:m],
                       tail=np.where(self.tail[:m] < m, self.tail[:m], -1),
                       scales=self.scales[:m], rotations=self.rotations[:m],
                       translations=self.translations[:m], means=self.means[:m],
                       sigmas=self.sigmas[:m], log_prior=self.log_prior[:m])


def _project_rotations(Rs):
    U, _, Vt = np.linalg.svd(Rs)
    d = np.sign(np.linalg.det(U @ Vt))
    U[..., -1] *= d[:, None]
    return U @ Vt


def build_code_table(model, max_depth=None, include_post=True, limit=DEFAULT_TABLE_LIMIT):
    """Enumerate codes up to ``max_depth`` and precompute their Gaussians.

    Compositions are built level by level: the code ``c + (k,)`` reuses the
    composition of its prefix ``c``.
    """
    D = model.D if max_depth is None else int(max_depth)
    if not 0 <= D <= model.D:
        raise ValueError(f"max_depth must be in [0, {model.D}], got {D}")
    K, H = model.K, model.H
    _check_capacity(K, D, limit)
    cs, cR, ct = model.component_arrays()
    with np.errstate(divide="ignore"):
        log_w = np.log(model.w)
        log_v = np.log(model.v)

    sizes = [K ** d for d in range(D + 1)]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
    M = int(offsets[-1])
    depths = np.repeat(np.arange(D + 1), sizes)
    first = np.full(M, -1, dtype=np.intp)
    tail = np.full(M, -1, dtype=np.intp)
    scales = np.empty(M)
    rotations = np.empty((M, H, H))
    translations = np.empty((M, H))
    log_digits = np.empty(M)

    scales[0] = 1.0
    rotations[0] = np.eye(H)
    translations[0] = 0.0
    log_digits[0] = 0.0
    for d in range(1, D + 1):
        lo, hi = offsets[d], offsets[d + 1]
        local = np.arange(sizes[d])
        parent = offsets[d - 1] + local // K
        last = local % K
        first[lo:hi] = local // K ** (d - 1)
        tail[lo:hi] = offsets[d - 1] + local % K ** (d - 1)
        ps, pR, pt = scales[parent], rotations[parent], translations[parent]
        scales[lo:hi] = ps * cs[last]
        R = pR @ cR[last]
        if d % REORTHO_EVERY == 0:
            R = _project_rotations(R)
        rotations[lo:hi] = R
        translations[lo:hi] = ps[:, None] * np.einsum("mab,mb->ma", pR, ct[last]) + pt
        log_digits[lo:hi] = log_digits[parent] + log_w[last]

    if include_post:
        post = model.post
        means = post.s * translations @ post.R.T + post.t
        sigmas = post.s * scales
    else:
        means = translations.copy()
        sigmas = scales.copy()
    log_prior = log_v[depths] + log_digits
    return CodeTable(K=K, D=D, H=H, include_post=include_post, offsets=offsets,
                     depths=depths, first=first, tail=tail, scales=scales,
                     rotations=rotations, translations=translations, means=means,
                     sigmas=sigmas, log_prior=log_prior)


def code_log_prior(model, code):
    """``log v[len(code)] + sum(log w[c] for c in code)``; may be ``-inf``."""
    code = tuple(code)
    if len(code) > model.D or any(not 0 <= c < model.K for c in code):
        raise ValueError(f"invalid code {code} for K={model.K}, D={model.D}")
    terms = [model.v[len(code)]] + [model.w[c] for c in code]
    if any(p == 0 for p in terms):
        return -math.inf
    return float(sum(math.log(p) for p in terms))


def log_density(model, x, table=None):
    """Log density of the model at a point or at each row of an ``(N, H)`` array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.H:
        raise DimensionError(f"model dimension {model.H} but points have shape {x.shape}")
    if table is None:
        table = build_code_table(model)
    pts = x.reshape(-1, model.H)
    ll = kernels.mixture_log_density(pts, table.means, table.sigmas, table.log_prior)
    return float(ll[0]) if x.ndim == 1 else ll


def mean_depth(model):
    """Expected code length ``sum(d * v[d])``."""
    return float(np.arange(model.v.size) @ model.v)


def sample(model, n, rng):
    """Draw ``n`` points from the finite-depth mixture.

    For each point a depth ``d ~ v`` and ``d`` digits ``~ w`` are drawn, and
    a standard normal draw is pushed through ``post o f_c1 o ... o f_cd``.
    """
    H, D = model.H, model.D
    depth = rng.choice(D + 1, size=n, p=model.v)
    digits = rng.choice(model.K, size=(n, D), p=model.w) if D else np.zeros((n, 0), int)
    x = rng.standard_normal((n, H))
    cs, cR, ct = model.component_arrays()
    # innermost map first: f_cd is applied before f_c(d-1)
    for pos in range(D - 1, -1, -1):
        live = depth > pos
        k = digits[live, pos]
        x[live] = cs[k, None] * np.einsum("nab,nb->na", cR[k], x[live]) + ct[k]
    post = model.post
    return post.s * x @ post.R.T + post.t


def sample_attractor(model, n, rng, burn_in=32, start=None):
    """Sample the limit distribution with the chaos game.

    A single chain starts at ``start`` (the origin by default) and applies a
    component drawn from ``w`` at every step.  The first ``burn_in`` iterates
    are discarded; the next ``n`` are post-transformed and returned.
    """
    H = model.H
    choices = rng.choice(model.K, size=n + burn_in, p=model.w)
    start = np.zeros(H) if start is None else np.asarray(start, dtype=float)
    cs, cR, ct = model.component_arrays()
    pts = kernels.chaos_game(cs, cR, ct, choices, start, burn_in)
    post = model.post
    return post.s * pts @ post.R.T + post.t


def _sim_to_dict(f):
    return {"s": f.s, "r": f.R.reshape(-1).tolist(), "t": f.t.tolist()}


def model_to_dict(model):
    return {
        "h": model.H,
        "k": model.K,
        "d": model.D,
        "components": [_sim_to_dict(f) for f in model.components],
        "w": model.w.tolist(),
        "v": model.v.tolist(),
        "post": _sim_to_dict(model.post),
    }


def _sim_from_dict(obj, H, where):
    try:
        s = float(obj["s"])
        R = np.array(obj["r"], dtype=float)
        t = np.array(obj["t"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed similitude ({exc})") from None
    if R.size != H * H or t.size != H:
        raise ParseError(f"{where}: expected {H * H} rotation and {H} translation entries")
    R = R.reshape(H, H)
    if not is_rotation(R, tol=LOAD_TOL):
        raise ParseError(f"{where}: r is not a rotation matrix")
    if not s > 0:
        raise ParseError(f"{where}: scale must be positive")
    return Similitude(s, optimal_rotation(R), t)


def _simplex_from_list(values, name, size):
    p = np.array(values, dtype=float).reshape(-1)
    if p.size != size:
        raise ParseError(f"{name}: expected {size} entries, got {p.size}")
    if np.any(p < -LOAD_TOL) or abs(p.sum() - 1.0) > LOAD_TOL:
        raise ParseError(f"{name} is not a probability vector")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def model_from_dict(obj):
    """Build a model from its JSON form, validating invariants."""
    try:
        H, K, D = int(obj["h"]), int(obj["k"]), int(obj["d"])
        comps_raw, post_raw = obj["components"], obj["post"]
        w_raw, v_raw = obj["w"], obj["v"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"model is missing a field ({exc})") from None
    if len(comps_raw) != K:
        raise ParseError(f"k={K} but {len(comps_raw)} components")
    comps = [_sim_from_dict(c, H, f"components[{i}]") for i, c in enumerate(comps_raw)]
    post = _sim_from_dict(post_raw, H, "post")
    return IfsModel(comps, _simplex_from_list(w_raw, "w", K),
                    _simplex_from_list(v_raw, "v", D + 1), post)


def save_model(model, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None
    return model_from_dict(obj)
