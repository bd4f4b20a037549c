"""Local Gaussian site approximations and the rules that refresh them.

Each observation is represented by a Gaussian "site" factor on the latent
marginal f_k = H x_k.  Four interchangeable strategies update a site from the
current belief:

- ``pep_update``   power expectation propagation: moment-match a fractional
                   tilted distribution via cubature (or a conjugate closed
                   form when the likelihood provides one).
- ``eep_update``   extended EP: analytically linearise the measurement model
                   at the cavity mean; closed form, valid down to alpha = 0.
- ``slep_update``  statistically linearised EP: linearise in expectation over
                   the cavity using cubature integrals.
- ``cvi_update``   natural-gradient variational inference: derivatives of the
                   expected log-likelihood under the posterior marginal.

All rules are stateless and return ``None`` to signal a skipped update (the
caller keeps the previous site and counts the skip).  ``compute_cavity``
likewise returns ``None`` when removing the site fraction would make the
cavity variance non-positive.

Multivariate (m > 1) conventions: cavity subtraction acts element-wise on
variances with site cross-covariances discarded, and curvature matrices are
diagonalised before inversion.  Both choices trade a little statistical
efficiency for robustness; latent dimensions that an update cannot identify
(zero measurement Jacobian column) are marked inactive, meaning "no site
factor for this dimension".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .cubature import CubatureRule, sigma_points
from .likelihoods import Likelihood

__all__ = [
    "GaussianMoments",
    "Site",
    "Cavity",
    "RuleConfig",
    "compute_cavity",
    "pep_update",
    "eep_update",
    "slep_update",
    "cvi_update",
    "site_natural_params",
]

_RULES = ("pep", "eep", "slep", "cvi")
# |Hessian| below this is treated as singular (flat tilt => no information).
_SINGULAR_TOL = 1e-300


@dataclass(frozen=True)
class GaussianMoments:
    """A Gaussian belief: mean vector and symmetric covariance."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Site:
    """Gaussian pseudo-observation of the latent marginal.

    ``sigma_site`` is symmetric with finite diagonal; negative variances are
    legitimate transient EP states.  ``active`` marks which latent dimensions
    the site constrains; inactive dimensions carry no factor (infinite
    variance) and their stored mean/variance entries are placeholders.
    """

    mu_site: np.ndarray
    sigma_site: np.ndarray
    active: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu_site.shape[0]

    def observation(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(active indices, observed values, observation noise block)."""
        if self.active.all():
            return np.arange(self.active.shape[0]), self.mu_site, self.sigma_site
        idx = np.flatnonzero(self.active)
        return idx, self.mu_site[idx], self.sigma_site[np.ix_(idx, idx)]


@dataclass(frozen=True)
class Cavity:
    """Belief with (a fraction of) the local site removed."""

    mu_cav: np.ndarray
    sigma_cav: np.ndarray


@dataclass(frozen=True)
class RuleConfig:
    """Which update rule to run and with what knobs.

    alpha is the power / fraction parameter: (0, 1] for pep, [0, 1] for
    eep/slep, ignored by cvi.  cubature is a spec string ("gh", "gh7",
    "ut5", or "none" for rules that need no integrals).  damping blends new
    and previous site in natural parameters (1.0 = replace outright).
    """

    rule: str
    alpha: float = 1.0
    cubature: str = "gh"
    damping: float = 1.0

    def __post_init__(self) -> None:
        if self.rule not in _RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {_RULES}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.rule == "pep":
            if not 0.0 < self.alpha <= 1.0:
                raise ValueError(f"pep requires alpha in (0, 1], got {self.alpha}")
            if self.cubature == "none":
                raise ValueError("pep requires a cubature rule")
        elif self.rule in ("eep", "slep"):
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError(
                    f"{self.rule} requires alpha in [0, 1], got {self.alpha}"
                )
            if self.rule == "slep" and self.cubature == "none":
                raise ValueError("slep requires a cubature rule")


def _finite(*arrays: np.ndarray) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


# ---------------------------------------------------------------------------
# cavity
# ---------------------------------------------------------------------------


def compute_cavity(
    posterior_marginal: GaussianMoments, site: Optional[Site], alpha: float
) -> Optional[Cavity]:
    """Remove a fraction ``alpha`` of the site from the posterior marginal.

    With no site (None) or alpha = 0 the cavity is the marginal itself.  For
    m > 1 the subtraction acts element-wise on variances and discards the
    site's cross-covariances, yielding a diagonal cavity.  Returns ``None``
    if any cavity variance would be non-positive.
    """
    mu, cov = posterior_marginal.mean, posterior_marginal.cov
    if site is None or alpha == 0.0 or not site.active.any():
        return Cavity(mu.copy(), cov.copy())
    m = mu.shape[0]
    if m == 1:
        v = cov[0, 0]
        sv = site.sigma_site[0, 0]
        cav_prec = 1.0 / v - alpha / sv
        if cav_prec <= 0.0 or not math.isfinite(cav_prec):
            return None
        cav_var = 1.0 / cav_prec
        cav_mu = cav_var * (mu[0] / v - alpha * site.mu_site[0] / sv)
        if not (math.isfinite(cav_var) and math.isfinite(cav_mu)):
            return None
        return Cavity(np.array([cav_mu]), np.array([[cav_var]]))
    v = np.diag(cov)
    sv = np.diag(site.sigma_site)
    site_prec = np.where(site.active, alpha / sv, 0.0)
    site_shift = np.where(site.active, alpha * site.mu_site / sv, 0.0)
    cav_prec = 1.0 / v - site_prec
    if np.any(cav_prec <= 0.0) or not np.all(np.isfinite(cav_prec)):
        return None
    cav_var = 1.0 / cav_prec
    cav_mu = cav_var * (mu / v - site_shift)
    if not _finite(cav_mu, cav_var):
        return None
    return Cavity(cav_mu, np.diag(cav_var))


# ---------------------------------------------------------------------------
# power EP
# ---------------------------------------------------------------------------


def _tilted_moments(
    likelihood: Likelihood,
    y,
    mu: np.ndarray,
    cov: np.ndarray,
    alpha: float,
    cubature: CubatureRule,
):
    """Cubature moments of the tilted density q_cav(f) p(y|f)^alpha."""
    exact = likelihood.exact_tilted(y, mu, cov, alpha)
    if exact is not None:
        lz, mhat, chat = exact
        return lz, np.asarray(mhat, dtype=float), np.atleast_2d(chat).astype(float)
    pts = sigma_points(mu, cov, cubature)
    logp = likelihood.log_density(y, pts)
    a = alpha * logp + np.log(cubature.weights)
    hi = np.max(a)
    if not np.isfinite(hi):
        return None
    r = np.exp(a - hi)
    z = r.sum()
    if z <= 0.0 or not np.isfinite(z):
        return None
    r /= z
    mhat = pts @ r
    d = pts - mhat[:, None]
    chat = (d * r) @ d.T
    return hi + math.log(z), mhat, chat


def pep_update(
    cavity: Cavity,
    y,
    likelihood: Likelihood,
    alpha: float,
    cubature: CubatureRule,
) -> Optional[Site]:
    """Moment-match the fractional tilted distribution.

    The gradient and Hessian of the log-normaliser with respect to the cavity
    mean come from the Gaussian identities applied to the tilted moments
    (one cubature pass yields all three quantities); the site then follows in
    closed form.
    """
    mu, cov = cavity.mu_cav, cavity.sigma_cav
    m = mu.shape[0]
    tilted = _tilted_moments(likelihood, y, mu, cov, alpha, cubature)
    if tilted is None:
        return None
    _, mhat, chat = tilted
    if m == 1:
        s = cov[0, 0]
        dm = mhat[0] - mu[0]
        grad = dm / s
        # d2/dmu2 log Z = C_hat/s^2 - 1/s with C_hat the central tilted
        # covariance (the raw-moment cross terms cancel against grad^2)
        hess = (chat[0, 0] / s - 1.0) / s
        if not math.isfinite(hess) or abs(hess) < _SINGULAR_TOL:
            return None
        site_var = -alpha * (s + 1.0 / hess)
        site_mu = mu[0] - grad / hess
        if not (math.isfinite(site_var) and math.isfinite(site_mu)):
            return None
        return Site(np.array([site_mu]), np.array([[site_var]]), np.ones(1, bool))
    cov_inv = np.linalg.inv(cov)
    dm = mhat - mu
    grad = cov_inv @ dm
    hess_full = cov_inv @ chat @ cov_inv - cov_inv
    # keep only the diagonal curvature: off-diagonal terms of the tilted
    # Hessian destabilise the element-wise cavity without adding information
    hess = np.diag(hess_full)
    if np.any(np.abs(hess) < _SINGULAR_TOL) or not np.all(np.isfinite(hess)):
        return None
    hess_inv = np.diag(1.0 / hess)
    sigma_site = _sym(-alpha * (cov + hess_inv))
    mu_site = mu - grad / hess
    if not _finite(mu_site, sigma_site):
        return None
    return Site(mu_site, sigma_site, np.ones(m, bool))


# ---------------------------------------------------------------------------
# extended EP
# ---------------------------------------------------------------------------


def eep_update(
    cavity: Cavity, y, likelihood: Likelihood, alpha: float
) -> Optional[Site]:
    """Analytic linearisation of the measurement model at the cavity mean.

    Evaluates the measurement function and its Jacobians at (mu_cav, 0); the
    site is closed form and remains valid at alpha = 0.  Latent dimensions
    with zero Jacobian column are unidentified by the linearisation and get
    no site factor (marked inactive).
    """
    mu, cov = cavity.mu_cav, cavity.sigma_cav
    m = mu.shape[0]
    sigma0 = np.zeros(likelihood.noise_dim)
    h = np.atleast_1d(likelihood.measurement(mu, sigma0))
    jf, js = likelihood.jacobians(mu, sigma0)
    r = (js @ likelihood.noise_cov() @ js.T)[0, 0]
    v = likelihood.observed(y) - h[0]
    if not (math.isfinite(r) and math.isfinite(v)) or r < 0.0:
        return None
    row = jf[0]
    active = np.abs(row) > 1e-12 * max(1.0, float(np.max(np.abs(row))))
    if not active.any():
        return None
    idx = np.flatnonzero(active)
    ja = row[idx]
    cov_a = cov[np.ix_(idx, idx)]
    s_obs = r + alpha * (ja @ cov_a @ ja)
    if s_obs <= 0.0 or not math.isfinite(s_obs):
        return None
    if idx.size == 1:
        site_cov_a = np.array([[r / (ja[0] * ja[0])]])
    else:
        # rank-one information (single observation, several coupled latents):
        # the pseudo-inverse puts all finite variance along the Jacobian
        site_cov_a = np.linalg.pinv(np.outer(ja, ja) / r, hermitian=True)
    mu_a = mu[idx] + (site_cov_a + alpha * cov_a) @ ja * (v / s_obs)
    mu_site = np.zeros(m)
    sigma_site = np.eye(m)
    mu_site[idx] = mu_a
    sigma_site[np.ix_(idx, idx)] = _sym(site_cov_a)
    if not _finite(mu_site, sigma_site):
        return None
    return Site(mu_site, sigma_site, active)


# ---------------------------------------------------------------------------
# statistically linearised EP
# ---------------------------------------------------------------------------


def slep_update(
    cavity: Cavity,
    y,
    likelihood: Likelihood,
    alpha: float,
    cubature: CubatureRule,
) -> Optional[Site]:
    """Statistical linear regression of the measurement model over the cavity.

    Cubature supplies the predicted observation mean, its variance (including
    expected conditional noise), and the latent-observation cross-covariance;
    the regression gain plays the role of the Jacobian in the extended rule.
    """
    mu, cov = cavity.mu_cav, cavity.sigma_cav
    m = mu.shape[0]
    pts = sigma_points(mu, cov, cubature)
    cm, cv = likelihood.conditional_moments(pts)
    w = cubature.weights
    mu_obs = float(w @ cm)
    dm = cm - mu_obs
    s_obs = float(w @ (dm * dm) + w @ cv)
    cross = (pts - mu[:, None]) @ (w * dm)
    if not (math.isfinite(mu_obs) and math.isfinite(s_obs)) or not _finite(cross):
        return None
    scale = float(np.max(np.abs(cross)))
    active = np.abs(cross) > 1e-12 * max(1.0, scale)
    if not active.any():
        return None
    idx = np.flatnonzero(active)
    cov_a = cov[np.ix_(idx, idx)]
    ca = cross[idx]
    sol = np.linalg.solve(cov_a, ca)  # Sigma_cav^-1 C on the active block
    gain = sol  # transpose of the regression gain Omega
    s_tilde = s_obs + (alpha - 1.0) * float(ca @ sol)
    if s_tilde <= 0.0 or not math.isfinite(s_tilde):
        return None
    if idx.size == 1:
        om = gain[0]
        if abs(om) < _SINGULAR_TOL:
            return None
        info_inv = np.array([[s_tilde / (om * om)]])
        shift = info_inv @ np.array([om / s_tilde]) * (likelihood.observed(y) - mu_obs)
    else:
        info = np.outer(gain, gain) / s_tilde
        info_inv = np.linalg.pinv(info, hermitian=True)
        shift = info_inv @ gain * ((likelihood.observed(y) - mu_obs) / s_tilde)
    site_cov_a = -alpha * cov_a + info_inv
    mu_a = mu[idx] + shift
    mu_site = np.zeros(m)
    sigma_site = np.eye(m)
    mu_site[idx] = mu_a
    sigma_site[np.ix_(idx, idx)] = _sym(site_cov_a)
    if not _finite(mu_site, sigma_site):
        return None
    return Site(mu_site, sigma_site, active)


# ---------------------------------------------------------------------------
# natural-gradient variational inference
# ---------------------------------------------------------------------------


def cvi_update(
    posterior_marginal: GaussianMoments,
    y,
    likelihood: Likelihood,
    cubature: CubatureRule,
    previous_site: Optional[Site],
    damping: float,
) -> Optional[Site]:
    """Natural-gradient step on the expected log-likelihood.

    Differentiates E_q[log p(y|f)] with respect to the posterior marginal via
    the Gaussian derivative identities (cubature over q), then blends the
    resulting site with the previous one in natural parameters.  With no
    previous site the new site is taken undamped.
    """
    mu, cov = posterior_marginal.mean, posterior_marginal.cov
    m = mu.shape[0]
    pts = sigma_points(mu, cov, cubature)
    logp = likelihood.log_density(y, pts)
    if not np.all(np.isfinite(logp)):
        return None
    wl = cubature.weights * logp
    if m == 1:
        s = cov[0, 0]
        d = pts[0] - mu[0]
        grad = float(wl @ d) / s
        hess = np.array([float(wl @ (d * d / (s * s) - 1.0 / s))])
    else:
        cov_inv = np.linalg.inv(cov)
        delta = pts - mu[:, None]
        u = cov_inv @ delta
        grad = u @ wl
        total = float(wl.sum())
        hess_full = (u * wl) @ u.T - total * cov_inv
        hess = np.diag(hess_full).copy()
        grad = np.asarray(grad)
    hess = np.atleast_1d(hess)
    grad = np.atleast_1d(grad)
    if np.any(hess >= -1e-12) or not _finite(grad, hess):
        return None
    var_new = -1.0 / hess
    mu_new = mu - grad / hess
    prec_new = 1.0 / var_new
    shift_new = mu_new * prec_new
    if previous_site is not None and damping < 1.0:
        prec_prev = np.where(
            previous_site.active,
            1.0 / np.diag(previous_site.sigma_site),
            0.0,
        )
        shift_prev = np.where(
            previous_site.active,
            previous_site.mu_site * prec_prev,
            0.0,
        )
        prec = (1.0 - damping) * prec_prev + damping * prec_new
        shift = (1.0 - damping) * shift_prev + damping * shift_new
        if np.any(prec <= 0.0):
            return None
        var_new = 1.0 / prec
        mu_new = shift * var_new
    if not _finite(mu_new, var_new):
        return None
    return Site(mu_new, np.diag(var_new), np.ones(m, bool))


# ---------------------------------------------------------------------------
# diagnostics helpers
# ---------------------------------------------------------------------------


def site_natural_params(site: Optional[Site], dim: int) -> np.ndarray:
    """Stacked (precision-weighted mean, precision) diagonal, zeros if absent.

    Used to measure site movement between passes; inactive dimensions
    contribute zeros so appearing/disappearing factors register as change.
    """
    out = np.zeros(2 * dim)
    if site is None:
        return out
    if dim == 1:
        if site.active[0]:
            prec1 = 1.0 / site.sigma_site[0, 0]
            out[0] = site.mu_site[0] * prec1
            out[1] = prec1
        return out
    var = np.diag(site.sigma_site)
    prec = np.where(site.active, 1.0 / var, 0.0)
    out[:dim] = np.where(site.active, site.mu_site * prec, 0.0)
    out[dim:] = prec
    return out
