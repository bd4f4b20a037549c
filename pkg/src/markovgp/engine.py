"""Sequential inference and learning for Markovian Gaussian processes.

The model is a linear time-invariant state space prior (from ``kernels``)
observed through a possibly non-Gaussian likelihood.  Inference alternates

- a forward Kalman filter in which each observation enters through its
  current Gaussian *site* (pseudo-observation of f_k = H x_k), accumulating
  the per-step energy -log p(y_k | y_1..k-1); and
- a backward RTS smoothing sweep during which each site is refreshed from
  the smoothed marginal by the configured update rule.

Hyperparameters are trained by descending the filter energy with Adam on the
unconstrained (log) parameters; gradients come from central finite
differences, each probe being a cheap filter-only pass with frozen sites.

Observations are organised as one *unit* per site: a temporal model has a
single unit per step spanning all latent functions, while a spatio-temporal
block step has one unit per spatial location.  Units are updated jointly in
one Kalman step but carry independent sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .cubature import CubatureRule, make_rule, sigma_points
from .kernels import (
    ContinuousSSM,
    discretize,
    log_params,
    stack_independent,
    to_state_space,
    with_log_params,
)
from .likelihoods import Likelihood
from .sites import (
    Cavity,
    GaussianMoments,
    RuleConfig,
    Site,
    compute_cavity,
    cvi_update,
    eep_update,
    pep_update,
    site_natural_params,
    slep_update,
)

__all__ = [
    "TimeGrid",
    "SequenceData",
    "TemporalGP",
    "CompiledDynamics",
    "EnergyLedger",
    "RunResult",
    "FilterResult",
    "FitHistory",
    "EngineError",
    "compile_dynamics",
    "predict",
    "site_update_step",
    "rts_smooth_step",
    "energy_step",
    "run_sequence",
    "run_inference",
    "forward_filter",
    "fit_hyperparameters",
    "energy_gradient",
    "negative_log_predictive_density",
]


class EngineError(RuntimeError):
    """Raised when a filtering or smoothing step fails irrecoverably."""


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Non-decreasing timestamps with an observation-presence mask.

    Ties are legal: a zero-dt step has an identity transition with no process
    noise, so consecutive observations at the same time condition on the same
    latent state sequentially (the exact chain-rule factorisation).
    """

    t: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "mask", mask)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("timestamps must be a non-empty 1-d array")
        if np.any(np.diff(t) < 0.0):
            raise ValueError("timestamps must be non-decreasing")
        if mask.shape != t.shape:
            raise ValueError("mask must have one entry per timestamp")

    @property
    def num_steps(self) -> int:
        return self.t.shape[0]

    @property
    def dt(self) -> np.ndarray:
        out = np.empty_like(self.t)
        out[0] = 0.0
        out[1:] = np.diff(self.t)
        return out


@dataclass
class SequenceData:
    """Prepared observation sequence the engine iterates over.

    H[k] maps the state to the step's latent vector f_k; units[k] lists the
    row-index groups of f_k that share one site (and one scalar observation
    each, except the temporal case where the single unit spans all rows);
    y[k] holds one value per unit, or None for unobserved steps.
    """

    grid: TimeGrid
    H: List[np.ndarray]
    y: List[Optional[np.ndarray]]
    units: List[List[np.ndarray]]

    def __post_init__(self) -> None:
        n = self.grid.num_steps
        if not (len(self.H) == len(self.y) == len(self.units) == n):
            raise ValueError("per-step containers must match the grid length")

    @classmethod
    def temporal(
        cls,
        t: np.ndarray,
        y: np.ndarray,
        H: np.ndarray,
        mask: Optional[np.ndarray] = None,
    ) -> "SequenceData":
        """Scalar-per-step series: one unit spanning all latent functions."""
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        if mask is None:
            mask = np.isfinite(y)
        grid = TimeGrid(t, mask)
        m = H.shape[0]
        rows = [np.arange(m)]
        n = grid.num_steps
        ys: List[Optional[np.ndarray]] = [
            np.array([y[k]]) if mask[k] else None for k in range(n)
        ]
        return cls(grid, [H] * n, ys, [rows] * n)


@dataclass(frozen=True)
class TemporalGP:
    """A sum of independent latent processes observed through a likelihood.

    One kernel per latent function; the state spaces are stacked so the
    measurement matrix H returns the vector of latent function values.
    """

    kernels: Tuple
    likelihood: Likelihood

    def __post_init__(self) -> None:
        kernels = tuple(self.kernels)
        object.__setattr__(self, "kernels", kernels)
        if len(kernels) != self.likelihood.latent_dim:
            raise ValueError(
                f"likelihood expects {self.likelihood.latent_dim} latent "
                f"function(s), got {len(kernels)} kernel(s)"
            )

    def state_space(self) -> ContinuousSSM:
        parts = [to_state_space(k) for k in self.kernels]
        return parts[0] if len(parts) == 1 else stack_independent(parts)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([log_params(k) for k in self.kernels])

    def with_theta(self, theta: np.ndarray) -> "TemporalGP":
        out = []
        pos = 0
        for k in self.kernels:
            width = log_params(k).size
            out.append(with_log_params(k, theta[pos : pos + width]))
            pos += width
        if pos != theta.size:
            raise ValueError(f"expected {pos} parameters, got {theta.size}")
        return replace(self, kernels=tuple(out))


@dataclass(frozen=True)
class CompiledDynamics:
    """Per-step discrete transitions, deduplicated by time interval."""

    A: np.ndarray  # (u, s, s) unique transition matrices
    Q: np.ndarray  # (u, s, s) matching process noise
    idx: np.ndarray  # (n,) step -> unique-interval index; step 0 unused
    Pinf: np.ndarray  # (s, s) stationary prior covariance

    @property
    def state_dim(self) -> int:
        return self.Pinf.shape[0]


def compile_dynamics(ssm: ContinuousSSM, grid: TimeGrid) -> CompiledDynamics:
    dts = grid.dt
    unique, idx = np.unique(dts, return_inverse=True)
    A = np.empty((unique.size, ssm.state_dim, ssm.state_dim))
    Q = np.empty_like(A)
    for i, dt in enumerate(unique):
        trans = discretize(ssm, float(dt))
        A[i] = trans.A
        Q[i] = trans.Q
    return CompiledDynamics(A, Q, idx, ssm.Pinf.copy())


@dataclass
class EnergyLedger:
    """Per-step negative log conditional evidence and its total."""

    per_step: np.ndarray

    @property
    def total(self) -> float:
        return float(self.per_step.sum())


@dataclass
class RunResult:
    """Posterior trajectory, site store, and diagnostics of one run."""

    state_means: np.ndarray  # (n, s) smoothed
    state_covs: np.ndarray  # (n, s, s) smoothed
    latent_means: List[np.ndarray]  # per step (m_k,)
    latent_covs: List[np.ndarray]  # per step (m_k, m_k)
    sites: List[List[Optional[Site]]]
    energy: EnergyLedger
    iterations: int
    converged: bool
    cavity_failures: int
    skipped_updates: int
    energy_history: List[float] = field(default_factory=list)


@dataclass
class FilterResult:
    """Filtered (forward-only) trajectory, for equivalence checks."""

    means: np.ndarray  # (n, s)
    covs: np.ndarray  # (n, s, s)
    energy: EnergyLedger
    sites: List[List[Optional[Site]]]


@dataclass
class FitHistory:
    """Accepted energies and bookkeeping from hyperparameter training."""

    energies: List[float] = field(default_factory=list)
    thetas: List[np.ndarray] = field(default_factory=list)
    rejected_steps: int = 0
    final_step_size: float = 0.0


# ---------------------------------------------------------------------------
# single-step operations
# ---------------------------------------------------------------------------


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def predict(prev: GaussianMoments, A: np.ndarray, Q: np.ndarray) -> GaussianMoments:
    """Exact linear-Gaussian time update."""
    mean = A @ prev.mean
    cov = _sym(A @ prev.cov @ A.T + Q)
    return GaussianMoments(mean, cov)


def site_update_step(
    pred: GaussianMoments, H: np.ndarray, site: Site, step: int = -1
) -> GaussianMoments:
    """Kalman update treating the site as a pseudo-observation of f = Hx.

    Only the site's active rows observe the state; the covariance follows the
    Joseph form, which stays symmetric for the non-PSD site covariances that
    expectation propagation legitimately produces.
    """
    idx, value, noise = site.observation()
    if idx.size == 0:
        return pred
    h_obs = H[idx]
    p_ht = pred.cov @ h_obs.T
    s_obs = _sym(h_obs @ p_ht + noise)
    if s_obs.shape == (1, 1):
        s00 = s_obs[0, 0]
        if s00 == 0.0:
            raise EngineError(f"singular innovation covariance at step {step}")
        gain = p_ht / s00
    else:
        try:
            gain = np.linalg.solve(s_obs, p_ht.T).T
        except np.linalg.LinAlgError as exc:
            raise EngineError(
                f"singular innovation covariance at step {step}"
            ) from exc
    innov = value - h_obs @ pred.mean
    mean = pred.mean + gain @ innov
    ikh = np.eye(pred.cov.shape[0]) - gain @ h_obs
    cov = _sym(ikh @ pred.cov @ ikh.T + gain @ noise @ gain.T)
    return GaussianMoments(mean, cov)


def rts_smooth_step(
    filt_k: GaussianMoments,
    post_k1: GaussianMoments,
    A: np.ndarray,
    Q: np.ndarray,
) -> GaussianMoments:
    """One backward Rauch-Tung-Striebel recursion step."""
    pred = predict(filt_k, A, Q)
    try:
        gain = np.linalg.solve(pred.cov, A @ filt_k.cov).T
    except np.linalg.LinAlgError as exc:
        raise EngineError("singular predictive covariance in smoother") from exc
    mean = filt_k.mean + gain @ (post_k1.mean - pred.mean)
    cov = _sym(filt_k.cov + gain @ (post_k1.cov - pred.cov) @ gain.T)
    return GaussianMoments(mean, cov)


def energy_step(
    pred_latent: GaussianMoments,
    likelihood: Likelihood,
    y,
    config: RuleConfig,
    rule: Optional[CubatureRule],
    step: int = -1,
) -> float:
    """-log p(y_k | y_1..k-1) under the predicted latent marginal.

    Cubature rules integrate the likelihood against the predictive Gaussian;
    the extended rule uses its linearised Gaussian evidence instead, which is
    the quantity its own update is exact for.
    """
    if config.rule == "eep":
        e = _eep_energy(
            pred_latent.mean, pred_latent.cov, likelihood, likelihood.observed(y)
        )
    else:
        e = -likelihood.log_predictive(y, pred_latent.mean, pred_latent.cov, rule)
    if not math.isfinite(e):
        raise EngineError(f"non-finite energy at step {step}")
    return e


def _eep_energy(mu: np.ndarray, cov: np.ndarray, likelihood: Likelihood, y: float):
    sigma0 = np.zeros(likelihood.noise_dim)
    h = np.atleast_1d(likelihood.measurement(mu, sigma0))[0]
    jf, js = likelihood.jacobians(mu, sigma0)
    r = (js @ likelihood.noise_cov() @ js.T)[0, 0]
    e_k = r + jf[0] @ cov @ jf[0]
    v = y - h
    return 0.5 * (math.log(2.0 * math.pi * e_k) + v * v / e_k)


# steps holding several observations: joint cubature stays feasible only in
# low dimension; beyond this the energy falls back to a per-unit marginal sum
_JOINT_ENERGY_MAX_DIM = 3

_cached_rule = lru_cache(maxsize=None)(make_rule)


def _block_energy(
    latent: GaussianMoments,
    likelihood: Likelihood,
    y_k: np.ndarray,
    units: Sequence[np.ndarray],
    config: RuleConfig,
    rule: Optional[CubatureRule],
    step: int,
) -> float:
    """-log p(y_k | y_1..k-1) for a step observing several units at once."""
    if config.rule == "eep":
        e = _eep_block_energy(latent, likelihood, y_k, units)
    else:
        all_rows = np.concatenate(list(units))
        block_mean = latent.mean[all_rows]
        block_cov = latent.cov[np.ix_(all_rows, all_rows)]
        closed = likelihood.block_log_predictive(
            np.asarray(y_k, dtype=float), block_mean, block_cov
        )
        if closed is not None:
            e = -closed
        elif all_rows.size <= _JOINT_ENERGY_MAX_DIM:
            e = _joint_cubature_energy(
                block_mean, block_cov, likelihood, y_k, units, config
            )
        else:
            e = sum(
                energy_step(
                    _unit_marginal(latent.mean, latent.cov, rows),
                    likelihood,
                    y_k[u],
                    config,
                    rule,
                    step,
                )
                for u, rows in enumerate(units)
            )
    if not math.isfinite(e):
        raise EngineError(f"non-finite energy at step {step}")
    return e


def _joint_cubature_energy(
    mean: np.ndarray,
    cov: np.ndarray,
    likelihood: Likelihood,
    y_k: np.ndarray,
    units: Sequence[np.ndarray],
    config: RuleConfig,
) -> float:
    joint_rule = _cached_rule(config.cubature, mean.size)
    pts = sigma_points(mean, cov, joint_rule)
    logp = np.zeros(pts.shape[1])
    offset = 0
    for u, rows in enumerate(units):
        logp += likelihood.log_density(y_k[u], pts[offset : offset + rows.size])
        offset += rows.size
    shift = logp.max()
    if not math.isfinite(shift):
        return math.inf
    return -(shift + math.log(float(joint_rule.weights @ np.exp(logp - shift))))


def _eep_block_energy(
    latent: GaussianMoments,
    likelihood: Likelihood,
    y_k: np.ndarray,
    units: Sequence[np.ndarray],
) -> float:
    """Linearised Gaussian evidence with the full cross-unit covariance."""
    d = len(units)
    sigma0 = np.zeros(likelihood.noise_dim)
    jac = np.zeros((d, latent.dim))
    v = np.empty(d)
    r_diag = np.empty(d)
    for u, rows in enumerate(units):
        mu_u = latent.mean[rows]
        jf, js = likelihood.jacobians(mu_u, sigma0)
        jac[u, rows] = jf[0]
        r_diag[u] = (js @ likelihood.noise_cov() @ js.T)[0, 0]
        v[u] = likelihood.observed(y_k[u]) - np.atleast_1d(
            likelihood.measurement(mu_u, sigma0)
        )[0]
    e_mat = jac @ latent.cov @ jac.T + np.diag(r_diag)
    sign, logdet = np.linalg.slogdet(2.0 * math.pi * e_mat)
    if sign <= 0:
        return math.inf
    return 0.5 * (logdet + v @ np.linalg.solve(e_mat, v))


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------


def _init_site(
    likelihood: Likelihood,
    y_unit: float,
    marginal: GaussianMoments,
    config: RuleConfig,
    rule: Optional[CubatureRule],
) -> Optional[Site]:
    """First-pass site from the prediction, always at full strength."""
    if config.rule == "cvi":
        return cvi_update(marginal, y_unit, likelihood, rule, None, 1.0)
    cavity = Cavity(marginal.mean, marginal.cov)
    if config.rule == "pep":
        return pep_update(cavity, y_unit, likelihood, 1.0, rule)
    if config.rule == "eep":
        return eep_update(cavity, y_unit, likelihood, 1.0)
    return slep_update(cavity, y_unit, likelihood, 1.0, rule)


def _refresh_site(
    likelihood: Likelihood,
    y_unit: float,
    marginal: GaussianMoments,
    previous: Optional[Site],
    config: RuleConfig,
    rule: Optional[CubatureRule],
):
    """Smoothing-pass site update from the current posterior marginal.

    Returns (site, cavity_failed, skipped): EP rules first remove the alpha
    fraction of the previous site; a non-PSD cavity or a failed update keeps
    the previous site.
    """
    if config.rule == "cvi":
        new = cvi_update(marginal, y_unit, likelihood, rule, previous, config.damping)
        return (previous, False, True) if new is None else (new, False, False)
    cavity = compute_cavity(marginal, previous, config.alpha)
    if cavity is None:
        return previous, True, False
    if config.rule == "pep":
        new = pep_update(cavity, y_unit, likelihood, config.alpha, rule)
    elif config.rule == "eep":
        new = eep_update(cavity, y_unit, likelihood, config.alpha)
    else:
        new = slep_update(cavity, y_unit, likelihood, config.alpha, rule)
    if new is None:
        return previous, False, True
    if config.damping < 1.0 and previous is not None:
        new = _blend_sites(previous, new, config.damping)
        if new is None:
            return previous, False, True
    return new, False, False


def _blend_sites(prev: Site, new: Site, damping: float) -> Optional[Site]:
    """Geometric blend in natural parameters (diagonal, per dimension)."""
    m = new.dim
    var_prev = np.diag(prev.sigma_site)
    var_new = np.diag(new.sigma_site)
    prec = (1.0 - damping) * np.where(prev.active, 1.0 / var_prev, 0.0)
    prec = prec + damping * np.where(new.active, 1.0 / var_new, 0.0)
    shift = (1.0 - damping) * np.where(prev.active, prev.mu_site / var_prev, 0.0)
    shift = shift + damping * np.where(new.active, new.mu_site / var_new, 0.0)
    active = np.abs(prec) > 1e-300
    if not active.any():
        return None
    var = np.where(active, 1.0 / np.where(active, prec, 1.0), 1.0)
    mu = np.where(active, shift * var, 0.0)
    if not (np.all(np.isfinite(var)) and np.all(np.isfinite(mu))):
        return None
    return Site(mu, np.diag(var), active)


def _unit_marginal(
    latent_mean: np.ndarray, latent_cov: np.ndarray, rows: np.ndarray
) -> GaussianMoments:
    if rows.size == 1:
        r = rows[0]
        return GaussianMoments(latent_mean[r : r + 1], latent_cov[r : r + 1, r : r + 1])
    return GaussianMoments(latent_mean[rows], latent_cov[np.ix_(rows, rows)])


def _joint_site_update(
    pred: GaussianMoments,
    H: np.ndarray,
    sites: Sequence[Optional[Site]],
    units: Sequence[np.ndarray],
    step: int,
) -> GaussianMoments:
    """Apply all units' sites in one Kalman update (block-diagonal noise)."""
    rows: List[np.ndarray] = []
    values: List[np.ndarray] = []
    blocks: List[np.ndarray] = []
    for site, unit_rows in zip(sites, units):
        if site is None:
            continue
        idx, value, noise = site.observation()
        if idx.size == 0:
            continue
        rows.append(unit_rows[idx])
        values.append(value)
        blocks.append(noise)
    if not rows:
        return pred
    all_rows = np.concatenate(rows)
    value = np.concatenate(values)
    q = all_rows.size
    noise = np.zeros((q, q))
    pos = 0
    for block in blocks:
        w = block.shape[0]
        noise[pos : pos + w, pos : pos + w] = block
        pos += w
    joint = Site(value, noise, np.ones(q, bool))
    return site_update_step(pred, H[all_rows], joint, step)


def _forward_pass(
    dyn: CompiledDynamics,
    likelihood: Likelihood,
    seq: SequenceData,
    sites: List[List[Optional[Site]]],
    config: RuleConfig,
    rule: Optional[CubatureRule],
    initialise: bool,
    collect: bool,
):
    """Filter with current sites; optionally create first-pass sites.

    Returns (energy ledger, filtered means, filtered covs, predicted means,
    predicted covs); the trajectories are None when collect is False.
    """
    n = seq.grid.num_steps
    s = dyn.state_dim
    mask = seq.grid.mask
    m_filt = np.empty((n, s)) if collect else None
    p_filt = np.empty((n, s, s)) if collect else None
    m_pred = np.empty((n, s)) if collect else None
    p_pred = np.empty((n, s, s)) if collect else None
    energies = np.zeros(n)
    state = GaussianMoments(np.zeros(s), dyn.Pinf.copy())
    for k in range(n):
        if k > 0:
            i = dyn.idx[k]
            state = predict(state, dyn.A[i], dyn.Q[i])
        if collect:
            m_pred[k] = state.mean
            p_pred[k] = state.cov
        if mask[k]:
            H = seq.H[k]
            latent = GaussianMoments(H @ state.mean, _sym(H @ state.cov @ H.T))
            y_k = seq.y[k]
            units = seq.units[k]
            if len(units) == 1:
                energies[k] = energy_step(
                    _unit_marginal(latent.mean, latent.cov, units[0]),
                    likelihood,
                    y_k[0],
                    config,
                    rule,
                    k,
                )
            else:
                energies[k] = _block_energy(
                    latent, likelihood, y_k, units, config, rule, k
                )
            if initialise:
                for u, rows in enumerate(units):
                    marg = _unit_marginal(latent.mean, latent.cov, rows)
                    sites[k][u] = _init_site(likelihood, y_k[u], marg, config, rule)
            state = _joint_site_update(state, H, sites[k], units, k)
        if collect:
            m_filt[k] = state.mean
            p_filt[k] = state.cov
    return EnergyLedger(energies), m_filt, p_filt, m_pred, p_pred


def _backward_pass(
    dyn: CompiledDynamics,
    likelihood: Likelihood,
    seq: SequenceData,
    sites: List[List[Optional[Site]]],
    config: RuleConfig,
    rule: Optional[CubatureRule],
    m_filt: np.ndarray,
    p_filt: np.ndarray,
    m_pred: np.ndarray,
    p_pred: np.ndarray,
):
    """RTS smoothing with interleaved site refreshes.

    Smoother gains for all steps are formed in one batched solve; the sweep
    then walks backward refreshing each observed step's sites from its
    smoothed marginal.  Returns (state means, state covs, max natural-param
    change, cavity failures, skipped updates).
    """
    n = seq.grid.num_steps
    mask = seq.grid.mask
    m_post = m_filt.copy()
    p_post = p_filt.copy()
    if n > 1:
        a_next = dyn.A[dyn.idx[1:]]
        # G_k = P_filt[k] A_{k+1}^T P_pred[k+1]^{-1}, solved batched
        try:
            gains = np.linalg.solve(
                p_pred[1:], a_next @ p_filt[:-1]
            ).transpose(0, 2, 1)
        except np.linalg.LinAlgError as exc:
            raise EngineError("singular predictive covariance in smoother") from exc
    delta = 0.0
    cavity_failures = 0
    skipped = 0
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            g = gains[k]
            m_post[k] = m_filt[k] + g @ (m_post[k + 1] - m_pred[k + 1])
            p_post[k] = _sym(p_filt[k] + g @ (p_post[k + 1] - p_pred[k + 1]) @ g.T)
        if not mask[k]:
            continue
        H = seq.H[k]
        latent_mean = H @ m_post[k]
        latent_cov = _sym(H @ p_post[k] @ H.T)
        y_k = seq.y[k]
        for u, rows in enumerate(seq.units[k]):
            marg = _unit_marginal(latent_mean, latent_cov, rows)
            old = sites[k][u]
            new, cav_failed, skip = _refresh_site(
                likelihood, y_k[u], marg, old, config, rule
            )
            cavity_failures += int(cav_failed)
            skipped += int(skip)
            if new is not old:
                dim = rows.size
                delta = max(
                    delta,
                    float(
                        np.max(
                            np.abs(
                                site_natural_params(new, dim)
                                - site_natural_params(old, dim)
                            )
                        )
                    ),
                )
                sites[k][u] = new
    return m_post, p_post, delta, cavity_failures, skipped


# ---------------------------------------------------------------------------
# top-level inference
# ---------------------------------------------------------------------------


def _make_cubature(config: RuleConfig, likelihood: Likelihood):
    if config.rule == "eep" or config.cubature == "none":
        return None
    return make_rule(config.cubature, likelihood.latent_dim)


def _empty_sites(seq: SequenceData) -> List[List[Optional[Site]]]:
    return [[None] * len(units) for units in seq.units]


def run_sequence(
    ssm: Optional[ContinuousSSM],
    likelihood: Likelihood,
    seq: SequenceData,
    config: RuleConfig,
    num_iters: int = 20,
    tol: float = 1e-6,
    sites: Optional[List[List[Optional[Site]]]] = None,
    dyn: Optional[CompiledDynamics] = None,
) -> RunResult:
    """Iterate filter + smoothing-with-site-refresh until sites converge.

    Callers with non-kernel dynamics (e.g. Kronecker-structured states) pass
    ``dyn`` directly and may leave ``ssm`` as None.
    """
    if dyn is None:
        if ssm is None:
            raise ValueError("either ssm or dyn must be provided")
        dyn = compile_dynamics(ssm, seq.grid)
    rule = _make_cubature(config, likelihood)
    initialise = sites is None
    if sites is None:
        sites = _empty_sites(seq)
    energy = EnergyLedger(np.zeros(seq.grid.num_steps))
    cavity_failures = 0
    skipped = 0
    converged = False
    iterations = 0
    m_post = p_post = None
    energy_history: List[float] = []
    for it in range(num_iters):
        iterations = it + 1
        energy, m_filt, p_filt, m_pred, p_pred = _forward_pass(
            dyn, likelihood, seq, sites, config, rule, initialise and it == 0, True
        )
        energy_history.append(energy.total)
        m_post, p_post, delta, cav, skip = _backward_pass(
            dyn, likelihood, seq, sites, config, rule, m_filt, p_filt, m_pred, p_pred
        )
        cavity_failures += cav
        skipped += skip
        if delta < tol and it > 0:
            converged = True
            break
    latent_means = []
    latent_covs = []
    for k in range(seq.grid.num_steps):
        H = seq.H[k]
        latent_means.append(H @ m_post[k])
        latent_covs.append(_sym(H @ p_post[k] @ H.T))
    return RunResult(
        m_post,
        p_post,
        latent_means,
        latent_covs,
        sites,
        energy,
        iterations,
        converged,
        cavity_failures,
        skipped,
        energy_history,
    )


def run_inference(
    model: TemporalGP,
    t: np.ndarray,
    y: np.ndarray,
    config: RuleConfig,
    num_iters: int = 20,
    tol: float = 1e-6,
    mask: Optional[np.ndarray] = None,
) -> RunResult:
    """Convenience wrapper for scalar-per-step temporal series."""
    ssm = model.state_space()
    seq = SequenceData.temporal(t, y, ssm.H, mask)
    return run_sequence(ssm, model.likelihood, seq, config, num_iters, tol)


def forward_filter(
    model: TemporalGP,
    t: np.ndarray,
    y: np.ndarray,
    config: RuleConfig,
    mask: Optional[np.ndarray] = None,
    sites: Optional[List[List[Optional[Site]]]] = None,
) -> FilterResult:
    """One forward filtering pass over a temporal series.

    With no site store given, sites are created on the fly from the
    predictions (the first pass of the full algorithm); the filtered
    trajectory is then directly comparable to classical nonlinear filters.
    """
    ssm = model.state_space()
    seq = SequenceData.temporal(t, y, ssm.H, mask)
    dyn = compile_dynamics(ssm, seq.grid)
    rule = _make_cubature(config, model.likelihood)
    initialise = sites is None
    if sites is None:
        sites = _empty_sites(seq)
    energy, m_filt, p_filt, _, _ = _forward_pass(
        dyn, model.likelihood, seq, sites, config, rule, initialise, True
    )
    return FilterResult(m_filt, p_filt, energy, sites)


# ---------------------------------------------------------------------------
# hyperparameter learning
# ---------------------------------------------------------------------------


def _clone_sites(sites: List[List[Optional[Site]]]) -> List[List[Optional[Site]]]:
    return [list(step) for step in sites]


def fit_hyperparameters(
    model: TemporalGP,
    t: np.ndarray,
    y: np.ndarray,
    config: RuleConfig,
    num_iters: int = 250,
    step_size: float = 0.1,
    fd_step: float = 1e-4,
    mask: Optional[np.ndarray] = None,
    inner_iters: int = 8,
    fixed: Optional[np.ndarray] = None,
) -> Tuple[TemporalGP, FitHistory]:
    """Adam on the filter energy with finite-difference gradients.

    Each outer iteration interleaves filter and smoothing sweeps (at most
    ``inner_iters``, stopping early once the energy is stable) so the energy
    is evaluated at near-fixed-point sites, probes each unconstrained
    parameter with two filter-only passes for a central difference, and takes
    one Adam step.  A step whose settled energy rises is rejected:
    parameters, optimiser state, and sites revert, and the step size halves.
    The recorded history therefore contains accepted energies only.
    """
    ssm = model.state_space()
    seq = SequenceData.temporal(t, y, ssm.H, mask)

    def rebuild(th: np.ndarray) -> Tuple[CompiledDynamics, SequenceData]:
        return compile_dynamics(model.with_theta(th).state_space(), seq.grid), seq

    theta, history = _fit_loop(
        model.theta.copy(),
        rebuild,
        model.likelihood,
        config,
        num_iters,
        step_size,
        fd_step,
        inner_iters,
        fixed,
    )
    return model.with_theta(theta), history


def _fit_loop(
    theta: np.ndarray,
    rebuild: Callable[[np.ndarray], Tuple[CompiledDynamics, SequenceData]],
    likelihood: Likelihood,
    config: RuleConfig,
    num_iters: int,
    step_size: float,
    fd_step: float,
    inner_iters: int,
    fixed: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, FitHistory]:
    """Model-agnostic Adam descent: ``rebuild`` maps parameters to a ready
    (dynamics, sequence) pair, so both the transitions and the measurement
    matrices may depend on the parameters.  Parameters flagged in ``fixed``
    are excluded from the search: they get no probes and no updates."""
    rule = _make_cubature(config, likelihood)
    num_params = theta.size
    free = np.arange(num_params)
    if fixed is not None:
        free = np.flatnonzero(~np.asarray(fixed, dtype=bool))
    adam_m = np.zeros(num_params)
    adam_v = np.zeros(num_params)
    adam_t = 0
    lr = step_size
    history = FitHistory()

    # first pass initialises the sites at the starting parameters
    dyn, seq = rebuild(theta)
    sites = _empty_sites(seq)
    _forward_pass(dyn, likelihood, seq, sites, config, rule, True, False)

    def settle(d: CompiledDynamics, s: SequenceData) -> float:
        """Interleave filter and smoother sweeps until the filter energy is
        stable, so energies compared across parameter steps are evaluated at
        (near-)fixed-point sites rather than mid-oscillation.  Leaves
        ``sites`` consistent with the returned energy."""
        prev = math.inf
        total = math.inf
        for _ in range(max(inner_iters, 1)):
            ledger, m_f, p_f, m_p, p_p = _forward_pass(
                d, likelihood, s, sites, config, rule, False, True
            )
            total = ledger.total
            if abs(total - prev) < 1e-8 * max(1.0, abs(total)):
                break
            prev = total
            _backward_pass(
                d, likelihood, s, sites, config, rule, m_f, p_f, m_p, p_p
            )
        return total

    prev_energy = math.inf
    prev_theta = theta.copy()
    prev_sites = _clone_sites(sites)
    prev_adam = (adam_m.copy(), adam_v.copy(), adam_t)
    streak = 0

    for _ in range(num_iters):
        dyn, seq = rebuild(theta)
        energy = settle(dyn, seq)
        if energy > prev_energy + 1e-9 * max(1.0, abs(prev_energy)):
            # reject: restore the last accepted state and shrink the step
            theta = prev_theta.copy()
            sites = _clone_sites(prev_sites)
            adam_m, adam_v, adam_t = (
                prev_adam[0].copy(),
                prev_adam[1].copy(),
                prev_adam[2],
            )
            lr = max(lr * 0.5, 1e-4)
            history.rejected_steps += 1
            streak += 1
            if lr <= 1e-4 and streak >= 10:
                # even floor-sized steps keep rising: converged
                break
            continue
        streak = 0
        prev_energy = energy
        prev_theta = theta.copy()
        prev_sites = _clone_sites(sites)
        prev_adam = (adam_m.copy(), adam_v.copy(), adam_t)
        history.energies.append(energy)
        history.thetas.append(theta.copy())

        grad = np.zeros(num_params)
        for j in free:
            probe = theta.copy()
            probe[j] += fd_step
            dyn_hi, seq_hi = rebuild(probe)
            e_hi, *_ = _forward_pass(
                dyn_hi, likelihood, seq_hi, sites, config, rule, False, False
            )
            probe[j] -= 2.0 * fd_step
            dyn_lo, seq_lo = rebuild(probe)
            e_lo, *_ = _forward_pass(
                dyn_lo, likelihood, seq_lo, sites, config, rule, False, False
            )
            grad[j] = (e_hi.total - e_lo.total) / (2.0 * fd_step)
        if not np.all(np.isfinite(grad)):
            break

        adam_t += 1
        adam_m = 0.9 * adam_m + 0.1 * grad
        adam_v = 0.999 * adam_v + 0.001 * grad * grad
        m_hat = adam_m / (1.0 - 0.9**adam_t)
        v_hat = adam_v / (1.0 - 0.999**adam_t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        # the next iteration's settle refreshes the sites at the new
        # parameters, completing the filter/step/smooth cycle

    history.final_step_size = lr
    return prev_theta, history


def energy_gradient(
    model: TemporalGP,
    t: np.ndarray,
    y: np.ndarray,
    config: RuleConfig,
    sites: List[List[Optional[Site]]],
    fd_step: float = 1e-4,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central-difference energy gradient at the model's parameters."""
    ssm = model.state_space()
    seq = SequenceData.temporal(t, y, ssm.H, mask)
    rule = _make_cubature(config, model.likelihood)
    theta = model.theta
    grad = np.empty(theta.size)
    for j in range(theta.size):
        probe = theta.copy()
        probe[j] += fd_step
        dyn = compile_dynamics(model.with_theta(probe).state_space(), seq.grid)
        e_hi, *_ = _forward_pass(
            dyn, model.likelihood, seq, sites, config, rule, False, False
        )
        probe[j] -= 2.0 * fd_step
        dyn = compile_dynamics(model.with_theta(probe).state_space(), seq.grid)
        e_lo, *_ = _forward_pass(
            dyn, model.likelihood, seq, sites, config, rule, False, False
        )
        grad[j] = (e_hi.total - e_lo.total) / (2.0 * fd_step)
    return grad


# ---------------------------------------------------------------------------
# predictive evaluation
# ---------------------------------------------------------------------------


def negative_log_predictive_density(
    likelihood: Likelihood,
    result: RunResult,
    y,
    eval_mask: np.ndarray,
    units: Optional[List[List[np.ndarray]]] = None,
    cubature: Optional[str] = None,
) -> float:
    """Mean -log p(y* | posterior marginal) over the evaluated steps.

    ``y`` is either a scalar-per-step array (temporal series) or a list of
    per-step value vectors aligned with ``units`` (block steps).  The default
    cubature is Gauss-Hermite for narrow latents and the unscented rule for
    wide ones, where a tensor grid would be too large.
    """
    if cubature is None:
        cubature = "gh" if likelihood.latent_dim <= 2 else "ut5"
    rule = make_rule(cubature, likelihood.latent_dim)
    scalar_series = isinstance(y, np.ndarray) and y.ndim == 1
    total = 0.0
    count = 0
    for k in np.flatnonzero(eval_mask):
        y_k = np.array([y[k]]) if scalar_series else y[k]
        if y_k is None or not np.all(np.isfinite(np.asarray(y_k, dtype=float))):
            continue
        mean = result.latent_means[k]
        cov = result.latent_covs[k]
        rows_list = units[k] if units is not None else [np.arange(mean.shape[0])]
        for u, rows in enumerate(rows_list):
            lp = likelihood.log_predictive(
                y_k[u], mean[rows], cov[np.ix_(rows, rows)], rule
            )
            total -= lp
            count += 1
    if count == 0:
        raise ValueError("no evaluation points selected")
    return total / count
