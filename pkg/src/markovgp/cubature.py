"""Gaussian integration rules: Gauss-Hermite tensor grids and a symmetric 5th-order rule.

All rules integrate against the unit Gaussian N(0, I); `gaussian_expectation` maps
them onto an arbitrary N(mean, cov) through a Cholesky factor of the covariance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

DEFAULT_GH_ORDER = 20
# tensor grids grow as order^dim; refuse anything that would not fit in memory
MAX_TENSOR_POINTS = 200_000


@dataclass(frozen=True)
class CubatureRule:
    """Weighted point set approximating E[g(x)] for x ~ N(0, I_dim).

    points : (dim, n) array of abscissae
    weights: (n,) array summing to 1 (signed for UT5 with dim > 4)
    """

    tag: str
    points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.points.shape[0]

    @property
    def num_points(self) -> int:
        return self.points.shape[1]


def hermite_nodes(order):
    """Nodes/weights of probabilists' Gauss-Hermite on one axis (weight N(0,1)).

    Golub-Welsch: eigendecompose the symmetric tridiagonal Jacobi matrix of the
    Hermite three-term recurrence (zero diagonal, off-diagonal sqrt(k)); nodes are
    the eigenvalues, weights the squared first eigenvector components (mu_0 = 1).
    """
    if order == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1.0, order))
    nodes, vecs = eigh_tridiagonal(np.zeros(order), off)
    weights = vecs[0] ** 2
    return nodes, weights / weights.sum()


def gauss_hermite(dim, order=DEFAULT_GH_ORDER):
    """Tensor-product Gauss-Hermite rule over `dim` axes, `order` points per axis."""
    if dim < 1 or order < 1:
        raise ValueError(f"dim and order must be >= 1, got dim={dim}, order={order}")
    if order**dim > MAX_TENSOR_POINTS:
        raise ValueError(
            f"Gauss-Hermite tensor grid has order^dim = {order}^{dim} = {order**dim} "
            f"points, above the budget of {MAX_TENSOR_POINTS}; use ut5 for high dim"
        )
    nodes, w1 = hermite_nodes(order)
    if dim == 1:
        return CubatureRule(f"GH({order})", nodes[None, :].copy(), w1.copy())
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    points = np.stack([g.ravel() for g in grids])
    weights = np.ones(order**dim)
    for axis_idx in np.meshgrid(*([np.arange(order)] * dim), indexing="ij"):
        weights = weights * w1[axis_idx.ravel()]
    return CubatureRule(f"GH({order})", points, weights)


def ut5(dim):
    """Symmetric 5th-order rule (McNamee-Stroud), 2*dim^2 + 1 points.

    Point set: origin, axial pairs at +-sqrt(3) e_i, and diagonal pairs at
    sqrt(3)(+-e_i +-e_j) for i < j. Exact for all polynomials of total degree <= 5
    under N(0, I); the axial weight goes negative for dim > 4, which is fine for
    the moment computations here.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    r = np.sqrt(3.0)
    w0 = 1.0 + (dim**2 - 7.0 * dim) / 18.0
    w1 = (4.0 - dim) / 18.0
    w2 = 1.0 / 36.0
    cols = [np.zeros((dim, 1))]
    weights = [w0]
    for i in range(dim):
        for s in (+r, -r):
            p = np.zeros(dim)
            p[i] = s
            cols.append(p[:, None])
            weights.append(w1)
    for i, j in itertools.combinations(range(dim), 2):
        for si, sj in itertools.product((+r, -r), repeat=2):
            p = np.zeros(dim)
            p[i], p[j] = si, sj
            cols.append(p[:, None])
            weights.append(w2)
    return CubatureRule("UT5", np.concatenate(cols, axis=1), np.asarray(weights))


def make_rule(spec, dim):
    """Build a rule from a short tag: 'gh' / 'gh<order>' / 'ut5'."""
    spec = spec.lower()
    if spec == "ut5":
        return ut5(dim)
    if spec.startswith("gh"):
        order = int(spec[2:]) if len(spec) > 2 else DEFAULT_GH_ORDER
        return gauss_hermite(dim, order)
    raise ValueError(f"unknown cubature spec {spec!r}; expected 'gh', 'gh<order>' or 'ut5'")


def chol_with_jitter(cov):
    """Lower Cholesky factor with an escalating jitter ladder.

    Starts at 1e-10 * trace/dim and multiplies by 10 up to 1e-4 * trace/dim before
    giving up; cavity covariances can be near-singular so plain cholesky is too
    brittle here.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov.reshape(1, 1)
    d = cov.shape[0]
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(cov) / d, np.finfo(float).tiny)
    jitter = 1e-10 * scale
    eye = np.eye(d)
    while jitter <= 1e-4 * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"covariance not positive definite even with jitter {1e-4 * scale:.3e} "
        f"(trace-scaled ladder exhausted)"
    )


def sigma_points(mean, cov, rule):
    """Map unit points onto N(mean, cov): columns mean + chol(cov) @ points."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if mean.size == 1:
        # scalar marginal: sqrt replaces the Cholesky machinery
        var = float(cov) if cov.ndim == 0 else float(cov.flat[0])
        if var < 0.0:
            if var < -1e-4 * max(abs(var), np.finfo(float).tiny):
                raise np.linalg.LinAlgError(
                    f"negative scalar variance {var:.3e}"
                )
            var = 0.0
        return mean[:, None] + math.sqrt(var) * rule.points
    L = chol_with_jitter(cov)
    return mean[:, None] + L @ rule.points


def gaussian_expectation(g, mean, cov, rule):
    """E[g(f)] for f ~ N(mean, cov) under the given rule.

    `g` takes a (dim, n) array of points and returns values whose last axis runs
    over the n points; the weighted sum is taken over that axis.
    """
    vals = np.asarray(g(sigma_points(mean, cov, rule)))
    return vals @ rule.weights
