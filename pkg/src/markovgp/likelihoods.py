"""Observation models in two interchangeable forms.

Every model provides the probabilistic form p(y|f) (exact log densities, used by
moment matching, variational expectations and predictive densities) and the
continuous measurement form y = h(f, sigma) with analytic Jacobians (used by the
single-sweep linearisation rules). `conditional_moments` gives E[y|f], Cov[y|f]
for the additive-noise statistical linearisation path.

Latent layout: scalar models use f = (f,); the heteroscedastic model uses
f = (signal, noise_latent); the audio product model uses f = (sub_1..sub_c,
amp_1..amp_c). All models observe a scalar y per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr

LOG2PI = math.log(2.0 * math.pi)


def softplus(x, shift=0.0):
    """log(1 + exp(x - shift)), overflow safe, floored away from exact zero."""
    z = np.asarray(x, dtype=float) - shift
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) + 1e-10


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _binary01(y):
    """Accept labels in {0,1} or {-1,+1}; internally y=1 is the positive class."""
    y = float(y)
    if y in (1.0,):
        return 1.0
    if y in (0.0, -1.0):
        return 0.0
    raise ValueError(f"binary label must be one of {{0, 1, -1}}, got {y}")


def _as_points(f, m):
    """Latent input as an (m, N) array plus a flag for scalar input."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        f = f.reshape(1, 1)
        return f, True
    if f.ndim == 1:
        if f.shape[0] != m:
            raise ValueError(f"expected latent dim {m}, got {f.shape[0]}")
        return f[:, None], True
    return f, False


class Likelihood:
    obs_dim = 1
    noise_dim = 1

    # -- probabilistic form -------------------------------------------------

    def log_density(self, y, f):
        """log p(y|f); f may be (m,), scalar, or (m, N) for a batch of points."""
        f, scalar = _as_points(f, self.latent_dim)
        out = self._log_density(y, f)
        return out[0] if scalar else out

    # -- measurement form ---------------------------------------------------

    def measurement(self, f, sigma):
        f = np.atleast_1d(np.asarray(f, dtype=float))
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        mean, noise_scale = self._measurement_parts(f)
        return mean + noise_scale * sigma

    def jacobians(self, f, sigma):
        raise NotImplementedError

    def noise_cov(self):
        """Covariance of the noise vector sigma in y = h(f, sigma)."""
        return np.eye(1)

    # -- statistical linearisation ------------------------------------------

    def conditional_moments(self, f):
        """E[y|f] and Cov[y|f], vectorised over an (m, N) batch of latents."""
        f, scalar = _as_points(f, self.latent_dim)
        mean, var = self._conditional_moments(f)
        if scalar:
            return mean[0], var[0]
        return mean, var

    # -- predictive density ---------------------------------------------------

    def log_predictive(self, y, mean, cov, rule):
        """log int p(y|f) N(f|mean, cov) df via the cubature rule."""
        from .cubature import sigma_points

        pts = sigma_points(mean, cov, rule)
        logp = self._log_density(y, pts)
        hi = np.max(logp)
        if not np.isfinite(hi):
            return -np.inf
        total = float(np.sum(rule.weights * np.exp(logp - hi)))
        if total <= 0.0:
            return -np.inf
        return math.log(total) + hi

    def observed(self, y) -> float:
        """Observation on the measurement scale.

        Residual-based rules compare y against E[y|f]; subclasses with label
        conventions (e.g. Bernoulli with {-1,+1}) normalise here.
        """
        return float(y)

    # hook for conjugate closed forms (power-EP tilted moments); None means
    # "no closed form, use cubature"
    def exact_tilted(self, y, cav_mean, cav_cov, alpha):
        return None

    # hook for the joint evidence of several conditionally independent
    # observations sharing one latent Gaussian block; None means "no closed
    # form, use joint cubature"
    def block_log_predictive(self, y_vec, mean, cov):
        return None


@dataclass
class Gaussian(Likelihood):
    noise_variance: float = 1.0
    latent_dim = 1

    def _log_density(self, y, f):
        v = self.noise_variance
        return -0.5 * ((y - f[0]) ** 2 / v + LOG2PI + math.log(v))

    def _measurement_parts(self, f):
        return f[0], 1.0

    def jacobians(self, f, sigma):
        return np.array([[1.0]]), np.array([[1.0]])

    def noise_cov(self):
        return np.array([[self.noise_variance]])

    def _conditional_moments(self, f):
        return f[0], np.full_like(f[0], self.noise_variance)

    def log_predictive(self, y, mean, cov, rule):
        # conjugate closed form; keeps the Gaussian case free of cubature error
        m = np.atleast_1d(mean)[0]
        v = np.atleast_2d(cov)[0, 0] + self.noise_variance
        return -0.5 * ((y - m) ** 2 / v + LOG2PI + math.log(v))

    def exact_tilted(self, y, cav_mean, cav_cov, alpha):
        # tilted distribution N(f|m,S) p(y|f)^a is Gaussian: closed-form moments
        mu = float(np.atleast_1d(cav_mean)[0])
        s2 = float(np.atleast_2d(cav_cov)[0, 0])
        veff = self.noise_variance / alpha
        lz = (
            -0.5 * ((y - mu) ** 2 / (s2 + veff) + LOG2PI + math.log(s2 + veff))
            + 0.5 * (1.0 - alpha) * (LOG2PI + math.log(self.noise_variance))
            - 0.5 * math.log(alpha)
        )
        post_var = 1.0 / (1.0 / s2 + alpha / self.noise_variance)
        post_mean = post_var * (mu / s2 + alpha * y / self.noise_variance)
        return lz, np.array([post_mean]), np.array([[post_var]])

    def block_log_predictive(self, y_vec, mean, cov):
        # joint evidence of d independent-noise observations: multivariate
        # normal with the latent block covariance plus diagonal noise
        y_vec = np.asarray(y_vec, dtype=float)
        s = cov + self.noise_variance * np.eye(y_vec.size)
        sign, logdet = np.linalg.slogdet(2.0 * math.pi * s)
        if sign <= 0:
            return -np.inf
        v = y_vec - mean
        return -0.5 * (logdet + v @ np.linalg.solve(s, v))


@dataclass
class Poisson(Likelihood):
    """Counts with log intensity f: y ~ Po(exp f); h = exp(f) + exp(f/2) sigma."""

    latent_dim = 1

    def _log_density(self, y, f):
        if y < 0 or float(y) != int(y):
            raise ValueError(f"Poisson count must be a nonnegative integer, got {y}")
        return y * f[0] - np.exp(f[0]) - gammaln(y + 1.0)

    def _measurement_parts(self, f):
        return np.exp(f[0]), np.exp(0.5 * f[0])

    def jacobians(self, f, sigma):
        f0, s0 = float(np.atleast_1d(f)[0]), float(np.atleast_1d(sigma)[0])
        jf = math.exp(f0) + 0.5 * math.exp(0.5 * f0) * s0
        return np.array([[jf]]), np.array([[math.exp(0.5 * f0)]])

    def _conditional_moments(self, f):
        lam = np.exp(f[0])
        return lam, lam + 1e-8


@dataclass
class BernoulliLogit(Likelihood):
    """Binary labels through the logistic link psi(f) = 1/(1+e^-f)."""

    latent_dim = 1

    def observed(self, y) -> float:
        return _binary01(y)

    def _log_density(self, y, f):
        y = _binary01(y)
        z = f[0] if y == 1.0 else -f[0]
        # log psi(z) = -softplus(-z), written directly for stability
        return -(np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z))))

    def _link(self, f):
        return sigmoid(f)

    def _dlink(self, f):
        p = sigmoid(f)
        return p * (1.0 - p)

    def _measurement_parts(self, f):
        p = self._link(f[0])
        return p, np.sqrt(np.maximum(p * (1.0 - p), 1e-12))

    def jacobians(self, f, sigma):
        f0, s0 = float(np.atleast_1d(f)[0]), float(np.atleast_1d(sigma)[0])
        p = float(self._link(f0))
        dp = float(self._dlink(f0))
        g = math.sqrt(max(p * (1.0 - p), 1e-12))
        dg = dp * (1.0 - 2.0 * p) / (2.0 * g)
        return np.array([[dp + dg * s0]]), np.array([[g]])

    def _conditional_moments(self, f):
        p = self._link(f[0])
        return p, np.maximum(p * (1.0 - p), 1e-12)


@dataclass
class BernoulliProbit(BernoulliLogit):
    """Binary labels through the probit link Phi(f)."""

    def _log_density(self, y, f):
        y = _binary01(y)
        return log_ndtr(f[0] if y == 1.0 else -f[0])

    def _link(self, f):
        return ndtr(f)

    def _dlink(self, f):
        return np.exp(-0.5 * np.asarray(f, dtype=float) ** 2) / math.sqrt(2.0 * math.pi)


@dataclass
class HeteroscedasticGaussian(Likelihood):
    """Gaussian with latent mean f1 and latent noise scale phi(f2).

    y = f1 + phi(f2) sigma with phi the shifted softplus; the Jacobian w.r.t. f2
    vanishes at sigma = 0, so single-point linearisation never updates the noise
    latent directly.
    """

    shift: float = 0.5
    latent_dim = 2

    def _scale(self, f2):
        return softplus(f2, self.shift)

    def _log_density(self, y, f):
        s = self._scale(f[1])
        return -0.5 * ((y - f[0]) ** 2 / s**2 + LOG2PI) - np.log(s)

    def _measurement_parts(self, f):
        return f[0], self._scale(f[1])

    def jacobians(self, f, sigma):
        f = np.atleast_1d(np.asarray(f, dtype=float))
        s0 = float(np.atleast_1d(sigma)[0])
        dphi = float(sigmoid(f[1] - self.shift))
        return np.array([[1.0, dphi * s0]]), np.array([[float(self._scale(f[1]))]])

    def _conditional_moments(self, f):
        return f[0], self._scale(f[1]) ** 2


@dataclass
class ProductAudio(Likelihood):
    """Sum of subband/amplitude products: y = sum_i f_i^sub softplus(f_i^amp) + noise."""

    components: int = 3
    noise_variance: float = 0.1
    shift: float = 0.0

    @property
    def latent_dim(self):
        return 2 * self.components

    def _split(self, f):
        c = self.components
        return f[:c], f[c:]

    def _log_density(self, y, f):
        sub, amp = self._split(f)
        mean = np.sum(sub * softplus(amp, self.shift), axis=0)
        v = self.noise_variance
        return -0.5 * ((y - mean) ** 2 / v + LOG2PI + math.log(v))

    def _measurement_parts(self, f):
        sub, amp = self._split(f)
        return np.sum(sub * softplus(amp, self.shift), axis=0), 1.0

    def jacobians(self, f, sigma):
        f = np.atleast_1d(np.asarray(f, dtype=float))
        sub, amp = self._split(f)
        jf = np.concatenate([softplus(amp, self.shift), sub * sigmoid(amp - self.shift)])
        return jf[None, :], np.array([[1.0]])

    def noise_cov(self):
        return np.array([[self.noise_variance]])

    def _conditional_moments(self, f):
        sub, amp = self._split(f)
        mean = np.sum(sub * softplus(amp, self.shift), axis=0)
        return mean, np.full_like(mean, self.noise_variance)


def make_likelihood(name, **kwargs):
    """Build a likelihood from its config tag."""
    table = {
        "gaussian": Gaussian,
        "poisson": Poisson,
        "bernoulli-logit": BernoulliLogit,
        "bernoulli-probit": BernoulliProbit,
        "heteroscedastic": HeteroscedasticGaussian,
        "audio": ProductAudio,
    }
    if name not in table:
        raise ValueError(f"unknown likelihood {name!r}; expected one of {sorted(table)}")
    return table[name](**kwargs)
