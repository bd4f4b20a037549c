"""Separable space-time Gaussian processes as coupled temporal processes.

A separable kernel k((r,t),(r',t')) = kappa_r(r,r') * kappa_t(t,t') admits a
Markovian representation in time: attach one copy of the temporal state to
each of m reference locations in space.  The joint state evolves with

    A = I_m (x) A_t(dt),   Q = K_uu (x) Q_t(dt),   Pinf = K_uu (x) Pinf_t,

where K_uu is the spatial Gram matrix over the reference locations.  An
observation at location r projects onto the state through

    H(r) = [kappa_r(r, r_u) K_uu^{-1}] (x) H_t,

the conditional-mean interpolation weights of the spatial kernel.  When the
data live exactly on the reference locations (``grid`` mode) the weights
reduce to unit basis rows and the construction is exact; otherwise the
reference locations act as inducing points.

Observations are ordered along the sequential coordinate; points sharing a
timestamp are grouped into one block step with one site per point.  The
representation plugs directly into the temporal engine: only the compiled
dynamics and the per-step measurement matrices differ.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .engine import (
    CompiledDynamics,
    FitHistory,
    RuleConfig,
    RunResult,
    SequenceData,
    TimeGrid,
    _fit_loop,
    run_sequence,
)
from .cubature import make_rule
from .kernels import ContinuousSSM, discretize, kappa, log_params, to_state_space, with_log_params
from .likelihoods import Likelihood

__all__ = [
    "SpatialConfig",
    "SpatioTemporalModel",
    "build_state",
    "measurement_matrix",
    "order_by_time",
    "build_sequence",
    "compile_st_dynamics",
    "run_spatiotemporal",
    "fit_spatiotemporal",
    "spatiotemporal_nlpd",
    "quantile_inducing_points",
]


def _as_locations(r) -> np.ndarray:
    arr = np.asarray(r, dtype=float)
    if arr.ndim == 0:
        arr = arr[None]
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("spatial locations must be a vector or a 2-d array")
    return arr


def _cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def spatial_gram(kernel, a, b=None) -> np.ndarray:
    """Gram matrix of a stationary kernel over (possibly multi-d) locations."""
    a = _as_locations(a)
    b = a if b is None else _as_locations(b)
    return kappa(kernel, _cross_distances(a, b))


def quantile_inducing_points(r, m: int) -> np.ndarray:
    """m equally spaced quantiles of a scalar spatial coordinate."""
    r = np.asarray(r, dtype=float).ravel()
    qs = (np.arange(m) + 0.5) / m
    return np.quantile(r, qs)


@dataclass(frozen=True)
class SpatialConfig:
    """Spatial side of a separable space-time model.

    ``inducing`` holds the reference locations; ``mode`` is "inducing"
    (observations interpolated from the reference locations) or "grid"
    (observations lie exactly on them).
    """

    kernel: object
    inducing: np.ndarray
    mode: str = "inducing"

    def __post_init__(self) -> None:
        locs = _as_locations(self.inducing)
        object.__setattr__(self, "inducing", locs)
        if self.mode not in ("inducing", "grid"):
            raise ValueError(f"unknown spatial mode {self.mode!r}")
        if locs.shape[0] < 1:
            raise ValueError("need at least one reference location")
        dists = _cross_distances(locs, locs)
        np.fill_diagonal(dists, np.inf)
        if dists.min() <= 0.0:
            raise ValueError("reference locations must be distinct")

    @property
    def num_inducing(self) -> int:
        return self.inducing.shape[0]


@dataclass(frozen=True)
class SpatioTemporalModel:
    """Precompiled separable model: temporal SSM plus spatial Gram factors."""

    spatial: SpatialConfig
    temporal: object
    ssm_t: ContinuousSSM
    k_uu: np.ndarray
    k_uu_chol: np.ndarray

    @property
    def num_inducing(self) -> int:
        return self.spatial.num_inducing

    @property
    def state_dim(self) -> int:
        return self.num_inducing * self.ssm_t.state_dim

    @property
    def theta(self) -> np.ndarray:
        """Unconstrained parameters: temporal kernel's, then log spatial
        lengthscale (the spatial variance is redundant with the temporal one
        in a separable product and stays fixed)."""
        return np.concatenate(
            [log_params(self.temporal), [np.log(self.spatial.kernel.lengthscale)]]
        )

    def with_theta(self, theta: np.ndarray) -> "SpatioTemporalModel":
        theta = np.asarray(theta, dtype=float)
        n_t = log_params(self.temporal).size
        temporal = with_log_params(self.temporal, theta[:n_t])
        from dataclasses import replace as _replace

        spatial_kernel = _replace(
            self.spatial.kernel, lengthscale=float(np.exp(theta[n_t]))
        )
        spatial = SpatialConfig(
            spatial_kernel, self.spatial.inducing, self.spatial.mode
        )
        return build_state(spatial, temporal)


def build_state(spatial: SpatialConfig, temporal) -> SpatioTemporalModel:
    """Compile the separable construction for the given kernels."""
    ssm_t = to_state_space(temporal)
    k_uu = spatial_gram(spatial.kernel, spatial.inducing)
    jitter = 1e-8 * float(np.mean(np.diag(k_uu)))
    k_uu = k_uu + jitter * np.eye(spatial.num_inducing)
    try:
        chol = np.linalg.cholesky(k_uu)
    except np.linalg.LinAlgError as exc:
        raise ValueError("spatial Gram matrix is not positive definite") from exc
    return SpatioTemporalModel(spatial, temporal, ssm_t, k_uu, chol)


def _spatial_weights(model: SpatioTemporalModel, r_k) -> np.ndarray:
    loc = _as_locations(r_k)
    if model.spatial.mode == "grid":
        dists = _cross_distances(loc, model.spatial.inducing)[0]
        row = np.zeros(model.num_inducing)
        row[int(np.argmin(dists))] = 1.0
        return row
    cross = spatial_gram(model.spatial.kernel, loc, model.spatial.inducing)[0]
    half = np.linalg.solve(model.k_uu_chol, cross)
    return np.linalg.solve(model.k_uu_chol.T, half)


def measurement_matrix(model: SpatioTemporalModel, r_k) -> np.ndarray:
    """H(r_k): spatial interpolation weights Kronecker the temporal H."""
    return np.kron(_spatial_weights(model, r_k)[None, :], model.ssm_t.H)


def order_by_time(
    t: np.ndarray, r: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Sort by the sequential coordinate, grouping equal timestamps.

    Returns the distinct sorted timestamps and, per step, the indices of the
    original observations that share it.
    """
    t = np.asarray(t, dtype=float).ravel()
    order = np.argsort(t, kind="stable")
    unique_t, starts = np.unique(t[order], return_index=True)
    groups = [
        order[starts[i] : starts[i + 1] if i + 1 < starts.size else t.size]
        for i in range(unique_t.size)
    ]
    return unique_t, groups


def build_sequence(
    model: SpatioTemporalModel,
    r: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    likelihood: Likelihood,
    mask: Optional[np.ndarray] = None,
) -> Tuple[SequenceData, np.ndarray, List[np.ndarray]]:
    """Group observations into block steps and build their measurements.

    ``mask`` marks points that participate in inference; excluded points
    still pin their timestamp into the grid (the posterior remains available
    there) but contribute no site.  Returns the sequence, the step index of
    every original point, and the per-step point groups.
    """
    r = _as_locations(r)
    t = np.asarray(t, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if mask is None:
        mask = np.isfinite(y)
    mask = np.asarray(mask, dtype=bool)
    m_lat = model.ssm_t.H.shape[0]
    unique_t, groups = order_by_time(t)
    step_of_point = np.empty(t.size, dtype=int)
    h_list: List[np.ndarray] = []
    y_list: List[Optional[np.ndarray]] = []
    unit_list: List[List[np.ndarray]] = []
    step_mask = np.zeros(unique_t.size, dtype=bool)
    for k, group in enumerate(groups):
        step_of_point[group] = k
        active = [i for i in group if mask[i]]
        if not active:
            h_list.append(np.zeros((0, model.state_dim)))
            y_list.append(None)
            unit_list.append([])
            continue
        step_mask[k] = True
        h_list.append(np.vstack([measurement_matrix(model, r[i]) for i in active]))
        y_list.append(y[active])
        unit_list.append(
            [u * m_lat + np.arange(m_lat) for u in range(len(active))]
        )
    grid = TimeGrid(unique_t, step_mask)
    return SequenceData(grid, h_list, y_list, unit_list), step_of_point, groups


def compile_st_dynamics(
    model: SpatioTemporalModel, grid: TimeGrid
) -> CompiledDynamics:
    """Kronecker-expand the temporal transitions; never forms the joint SDE."""
    dts = grid.dt
    unique, idx = np.unique(dts, return_inverse=True)
    s = model.state_dim
    eye_m = np.eye(model.num_inducing)
    A = np.empty((unique.size, s, s))
    Q = np.empty_like(A)
    for i, dt in enumerate(unique):
        trans = discretize(model.ssm_t, float(dt))
        A[i] = np.kron(eye_m, trans.A)
        Q[i] = np.kron(model.k_uu, trans.Q)
    pinf = np.kron(model.k_uu, model.ssm_t.Pinf)
    return CompiledDynamics(A, Q, idx, pinf)


def run_spatiotemporal(
    model: SpatioTemporalModel,
    likelihood: Likelihood,
    r: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    config: RuleConfig,
    num_iters: int = 20,
    tol: float = 1e-6,
    mask: Optional[np.ndarray] = None,
) -> Tuple[RunResult, np.ndarray]:
    """Full inference over a scattered space-time point set.

    Returns the engine result together with each point's step index.
    """
    seq, step_of_point, _ = build_sequence(model, r, t, y, likelihood, mask)
    dyn = compile_st_dynamics(model, seq.grid)
    result = run_sequence(
        None, likelihood, seq, config, num_iters=num_iters, tol=tol, dyn=dyn
    )
    return result, step_of_point


def fit_spatiotemporal(
    model: SpatioTemporalModel,
    likelihood: Likelihood,
    r: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    config: RuleConfig,
    num_iters: int = 100,
    step_size: float = 0.1,
    fd_step: float = 1e-4,
    mask: Optional[np.ndarray] = None,
    inner_iters: int = 8,
    fixed: Optional[np.ndarray] = None,
) -> Tuple[SpatioTemporalModel, FitHistory]:
    """Adam on the filter energy; measurement matrices are rebuilt per step
    because the spatial lengthscale moves the interpolation weights.

    With a discrete likelihood the latent scale is weakly identified (a
    steeper link compensates a larger amplitude), so callers typically pass
    ``fixed`` to pin the temporal variance and search lengthscales only.
    """

    def rebuild(theta: np.ndarray) -> Tuple[CompiledDynamics, SequenceData]:
        m = model.with_theta(theta)
        seq, _, _ = build_sequence(m, r, t, y, likelihood, mask)
        return compile_st_dynamics(m, seq.grid), seq

    theta, history = _fit_loop(
        model.theta.copy(),
        rebuild,
        likelihood,
        config,
        num_iters,
        step_size,
        fd_step,
        inner_iters,
        fixed,
    )
    return model.with_theta(theta), history


def spatiotemporal_nlpd(
    model: SpatioTemporalModel,
    likelihood: Likelihood,
    result: RunResult,
    step_of_point: np.ndarray,
    r: np.ndarray,
    y: np.ndarray,
    eval_mask: np.ndarray,
    cubature: Optional[str] = None,
) -> float:
    """Mean -log p(y* | smoothed state) over the selected points.

    Evaluation points need not have participated in inference; their latent
    marginal is read off the smoothed state at their own timestamp.  The
    default cubature is Gauss-Hermite for narrow latents and the unscented
    rule for wide ones.
    """
    r = _as_locations(r)
    y = np.asarray(y, dtype=float).ravel()
    if cubature is None:
        cubature = "gh" if likelihood.latent_dim <= 2 else "ut5"
    rule = make_rule(cubature, likelihood.latent_dim)
    total = 0.0
    count = 0
    for i in np.flatnonzero(np.asarray(eval_mask, dtype=bool)):
        if not np.isfinite(y[i]):
            continue
        k = int(step_of_point[i])
        h_i = measurement_matrix(model, r[i])
        mean = h_i @ result.state_means[k]
        cov = h_i @ result.state_covs[k] @ h_i.T
        lp = likelihood.log_predictive(y[i], mean, 0.5 * (cov + cov.T), rule)
        if not np.isfinite(lp):
            raise ValueError(f"non-finite predictive density at point {i}")
        total -= float(lp)
        count += 1
    if count == 0:
        raise ValueError("no finite evaluation points")
    return total / count
