"""Expectation-maximization for IFS models.

One iteration computes code responsibilities for a minibatch (E-step) and
then updates, from the old parameters and all at once:

* the depth weights ``v`` and component weights ``w`` (multinomial MLEs);
* each component ``f_k`` by a weighted similarity fit between the
  de-post-transformed points and the tails of the codes starting with ``k``,
  whose endpoint Gaussians are held fixed at their old values;
* the post-transform by the same similarity fit over all codes.

The similarity fit maximizes

    Q(s, R, t) = -p H log s - sum_ij W_ij ||y_i - t - s R m_j||^2 / (2 s^2 sigma_j^2)

where ``m_j, sigma_j`` are the fixed tail Gaussians and ``W`` the relevant
block of responsibilities.  The translation and rotation have closed forms
(weighted centroids and an SVD); the scale is the positive root of
``p H s^2 + b s - a = 0``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ifsem import kernels
from ifsem.errors import DimensionError
from ifsem.geometry import Similitude, invert, optimal_rotation, random_rotation
from ifsem.model import IfsModel, build_code_table, log_density, mean_depth

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "Responsibilities",
    "e_step",
    "update_depth_weights",
    "update_component_weights",
    "solve_scale",
    "update_component",
    "update_post",
    "em_iteration",
    "init_random",
    "pre_select",
    "has_converged",
    "fit",
    "fit_restarts",
]

STARVED_MASS = 1e-300
# smallest-to-largest singular value ratio below which the rotation is ambiguous
RANK_TOL = 1e-12


@dataclass
class TrainConfig:
    """Settings for :func:`fit`.  Defaults follow the 2D experiments."""

    K: int = 3
    D: int = 6
    iterations: int = 300
    minibatch: int = 500
    pool_size: int = 10
    pre_iterations: int = 100
    pre_depth: int = 3
    pre_minibatch: int = 500
    seed: int = 0
    scale_floor: float = 1e-6
    convergence_threshold: float = 0.95
    restarts: int = 1
    workers: int = 1

    def __post_init__(self):
        for name in ("K", "minibatch", "pool_size", "pre_minibatch", "restarts", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("D", "iterations", "pre_iterations", "pre_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.convergence_threshold <= 1:
            raise ValueError("convergence_threshold must lie in (0, 1]")
        if not self.scale_floor > 0:
            raise ValueError("scale_floor must be positive")


@dataclass
class TrainHistory:
    """Per-iteration training record."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, **record):
        self.records.append(record)

    def to_jsonl(self, include_time=True):
        lines = []
        for r in self.records:
            r = dict(r)
            if not include_time:
                r["seconds"] = None
            lines.append(json.dumps(r))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text):
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Posterior code probabilities for a batch.

    ``values[i, j]`` is the probability that code ``j`` (canonical order)
    generated point ``i``; ``log_density[i]`` is the model log density of
    point ``i``.
    """

    values: np.ndarray
    log_density: np.ndarray


def _row_slices(n, parts):
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def e_step(model, batch, table=None, workers=1):
    """Responsibilities of every code for every row of ``batch``.

    Rows are normalized in log space so points far from every Gaussian
    still get a finite, normalized row.  With ``workers > 1`` contiguous row
    blocks are processed by threads; rows are independent, so the result is
    identical to the single-threaded one.
    """
    batch = np.ascontiguousarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != model.H:
        raise DimensionError(f"model dimension {model.H} but batch has shape {batch.shape}")
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if table is None:
        table = build_code_table(model)
    P = np.empty((batch.shape[0], table.M))
    ll = np.empty(batch.shape[0])

    def run(rows):
        _, ll[rows] = kernels.responsibilities(batch[rows], table.means, table.sigmas,
                                               table.log_prior, out=P[rows])

    if workers > 1 and batch.shape[0] >= 2 * workers:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, _row_slices(batch.shape[0], workers)))
    else:
        run(slice(None))
    return Responsibilities(P, ll)


def update_depth_weights(P, table):
    """``v[d]`` proportional to the total responsibility of codes of length ``d``."""
    mass = np.bincount(table.depths, weights=np.asarray(P).sum(axis=0),
                       minlength=table.D + 1)
    return mass / mass.sum()


def update_component_weights(P, table):
    """``w[k]`` proportional to the responsibility of codes starting with ``k``.

    The empty code does not contribute.  Returns ``None`` when no code of
    length at least one carries any mass; the caller keeps the old weights.
    """
    col_mass = np.asarray(P).sum(axis=0)
    deep = table.first >= 0
    mass = np.bincount(table.first[deep], weights=col_mass[deep], minlength=table.K)
    total = mass.sum()
    if not total > 0:
        return None
    return mass / total


def solve_scale(a, b, p, H, floor=1e-6):
    """Positive root of ``p H s^2 + b s - a = 0``, clamped below at ``floor``."""
    if a <= 0:
        return floor
    pH = p * H
    # stable form of (-b + sqrt(b^2 + 4 pH a)) / (2 pH)
    disc = math.sqrt(b * b + 4.0 * pH * a)
    if b <= 0:
        s = (disc - b) / (2.0 * pH)
    else:
        s = 2.0 * a / (b + disc)
    return max(s, floor)


def _similarity_fit(Y, W, T, tail_scales, old, floor):
    """Weighted similarity fit; returns ``None`` if ``W`` has no mass."""
    H = Y.shape[1]
    Z = 1.0 / tail_scales ** 2
    WZ = W * Z
    row = WZ.sum(axis=1)
    col = WZ.sum(axis=0)
    pz = row.sum()
    if not pz >= STARVED_MASS:
        return None
    y_bar = row @ Y / pz
    t_bar = col @ T / pz
    Yc = Y - y_bar
    Tc = T - t_bar
    A = Yc.T @ (WZ @ Tc)
    sv = np.linalg.svd(A, compute_uv=False)
    if H == 1:
        R = np.ones((1, 1))
    elif not sv[0] > 0:
        R = old.R
    elif sv[H - 2] < RANK_TOL * sv[0]:
        # many maximizers; take the one closest to the old rotation
        R = optimal_rotation(A + 1e-9 * sv[0] * old.R)
    else:
        R = optimal_rotation(A)
    b = float(np.sum(A * R))
    a = float(row @ np.einsum("nh,nh->n", Yc, Yc))
    s = solve_scale(a, b, float(W.sum()), H, floor)
    t = y_bar - s * (R @ t_bar)
    return Similitude(s, R, t)


def update_component(k, P, Y, table, old, scale_floor=1e-6):
    """New parameters for component ``k``.

    Parameters
    ----------
    k : int
        Component index.
    P : ndarray, shape (N, M)
        Responsibilities over all codes of ``table``.
    Y : ndarray, shape (N, H)
        The batch mapped through the inverse of the old post-transform.
    table : CodeTable
        Code table of the old model; its inner compositions (without the
        post-transform) of codes shorter than ``D`` serve as the tails.
    old : Similitude
        Current parameters of component ``k``.

    Returns
    -------
    (Similitude, bool)
        The update and whether the component was starved (no
        responsibility), in which case ``old`` is returned unchanged.
    """
    m = table.M_inner
    if m == 0:
        return old, True
    W = np.asarray(P)[:, table.component_columns(k)]
    new = _similarity_fit(np.asarray(Y), W, table.translations[:m], table.scales[:m],
                          old, scale_floor)
    if new is None:
        return old, True
    return new, False


def update_post(P, X, table, old, scale_floor=1e-6):
    """New post-transform, fitted over all codes of ``table``.

    Same contract as :func:`update_component` with the raw batch ``X`` and
    the full responsibility matrix.
    """
    new = _similarity_fit(np.asarray(X), np.asarray(P), table.translations, table.scales,
                          old, scale_floor)
    if new is None:
        return old, True
    return new, False


def em_iteration(model, batch, scale_floor=1e-6, workers=1, flags=None):
    """One EM iteration on ``batch``; returns the updated model.

    All updates are computed from the incoming model and applied together.
    Starved components and undefined weight updates keep their old values;
    a description of each such event is appended to ``flags`` if given.
    """
    table = build_code_table(model)
    P = e_step(model, batch, table, workers).values
    batch = np.asarray(batch, dtype=float)
    Y = invert(model.post)(batch)

    v = update_depth_weights(P, table)
    w = update_component_weights(P, table)
    if w is None:
        w = model.w
        if flags is not None:
            flags.append("w_kept")
    comps = []
    for k, f in enumerate(model.components):
        new, starved = update_component(k, P, Y, table, f, scale_floor)
        if starved and flags is not None:
            flags.append(f"starved:{k}")
        comps.append(new)
    post, starved = update_post(P, batch, table, model.post, scale_floor)
    if starved and flags is not None:
        flags.append("starved:post")
    return IfsModel(comps, w, v, post)


def _uniform_ball(n, H, rng):
    x = rng.standard_normal((n, H))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.random((n, 1)) ** (1.0 / H)


def init_random(K, H, rng, D=0):
    """Random model whose components have fixed points spread over the unit ball.

    Each component has scale 1/2, a Haar-random rotation and the
    translation that makes a uniformly drawn point of the unit ball its
    fixed point.  Weights and depth weights are uniform; the post-transform
    is the identity.
    """
    points = _uniform_ball(K, H, rng)
    comps = []
    for p in points:
        R = random_rotation(H, rng)
        comps.append(Similitude(0.5, R, p - 0.5 * (R @ p)))
    return IfsModel(comps, np.full(K, 1.0 / K), np.full(D + 1, 1.0 / (D + 1)),
                    Similitude.identity(H))


def has_converged(model, threshold=0.95):
    """True if at least ``threshold`` of the depth weight sits at the deepest level."""
    return bool(model.v[-1] >= threshold)


def _minibatch(data, size, rng):
    n = data.shape[0]
    if size >= n:
        idx = rng.permutation(n)
    else:
        idx = rng.choice(n, size=size, replace=False)
    return data[idx]


def train(model, data, iterations, minibatch, rng, scale_floor=1e-6, workers=1,
          test_data=None, history=None):
    """Run ``iterations`` EM steps from ``model`` on fresh minibatches."""
    for it in range(iterations):
        start = time.perf_counter()
        flags = []
        model = em_iteration(model, _minibatch(data, minibatch, rng), scale_floor,
                             workers, flags)
        if history is not None:
            ll = None
            if test_data is not None and len(test_data):
                ll = float(np.mean(log_density(model, test_data)))
            history.append(iter=it, mean_ll_test=ll, mean_depth=mean_depth(model),
                           v=model.v.tolist(), seconds=time.perf_counter() - start,
                           flags=flags)
            log.debug("iteration %d: mean depth %.3f, test ll %s", it,
                      mean_depth(model), ll)
    return model


def pre_select(data, config, rng):
    """Train ``pool_size`` random candidates briefly; keep the deepest.

    Each candidate is trained at depth ``pre_depth`` (capped at ``D``) for
    ``pre_iterations`` iterations with minibatches of ``pre_minibatch``.
    The candidate with the highest mean depth wins; ties go to the lowest
    pool index.
    """
    data = np.asarray(data, dtype=float)
    depth = min(config.pre_depth, config.D)
    best, best_depth = None, -math.inf
    for i in range(config.pool_size):
        cand = init_random(config.K, data.shape[1], rng, depth)
        cand = train(cand, data, config.pre_iterations, config.pre_minibatch, rng,
                     config.scale_floor, config.workers)
        md = mean_depth(cand)
        log.debug("candidate %d: mean depth %.4f", i, md)
        if md > best_depth:
            best, best_depth = cand, md
    return best


def fit(data, config, rng, test_data=None, initial=None):
    """Fit an IFS model to ``data``.

    The starting point is ``initial`` if given, a single random model when
    ``pool_size == 1`` and ``pre_iterations == 0``, and the pre-selected
    candidate otherwise.  Pre-selected candidates are lifted to depth ``D``
    with uniform depth weights.

    Returns
    -------
    (IfsModel, TrainHistory)
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("fit needs a non-empty (N, H) array")
    if initial is not None:
        model = initial
    elif config.pool_size == 1 and config.pre_iterations == 0:
        model = init_random(config.K, data.shape[1], rng, config.D)
    else:
        model = pre_select(data, config, rng).with_depth(config.D)
    if model.H != data.shape[1]:
        raise DimensionError(f"model dimension {model.H} but data dimension {data.shape[1]}")
    history = TrainHistory()
    model = train(model, data, config.iterations, config.minibatch, rng,
                  config.scale_floor, config.workers, test_data, history)
    return model, history


def _fit_one(args):
    data, config, seed_seq, test_data = args
    rng = np.random.default_rng(seed_seq)
    model, history = fit(data, config, rng, test_data)
    score = log_density(model, test_data if test_data is not None and len(test_data) else data)
    return model, history, float(np.mean(score))


def fit_restarts(data, config, test_data=None):
    """Run ``config.restarts`` independent fits and keep the best one.

    Restart ``i`` uses the ``i``-th child of ``SeedSequence(config.seed)``.
    The winner has the highest mean log density on ``test_data`` (or on
    ``data`` when no test set is given); ties go to the earliest restart.
    With ``workers > 1`` restarts run in separate processes.

    Returns
    -------
    (IfsModel, TrainHistory, float)
        Best model, its history and its score.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    jobs = [(data, config, s, test_data) for s in seeds]
    if config.workers > 1 and config.restarts > 1:
        single = replace(config, workers=1)
        jobs = [(data, single, s, test_data) for s in seeds]
        with ProcessPoolExecutor(min(config.workers, config.restarts)) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(job) for job in jobs]
    scores = [r[2] for r in results]
    best = int(np.argmax(scores))
    log.info("restart scores: %s; keeping %d", ", ".join(f"{s:.4f}" for s in scores), best)
    return results[best]
