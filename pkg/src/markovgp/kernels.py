"""GP kernels and their exact linear-Gaussian state-space representations.

Each supported kernel maps to a continuous-time model

    dx/dt = F x + L w,   f = H x,   w white with spectral density Qc,

whose stationary covariance Pinf satisfies F Pinf + Pinf F^T + L Qc L^T = 0, and
which discretises in closed form over a step dt as A = expm(F dt),
Q = Pinf - A Pinf A^T. Sums stack block-diagonally; products with an oscillatory
factor (Cosine, or the truncated-harmonic Periodic) use the Kronecker
quasi-periodic construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov
from scipy.special import gamma, ive


# ---------------------------------------------------------------------------
# kernel specifications


@dataclass(frozen=True)
class Matern12:
    variance: float = 1.0
    lengthscale: float = 1.0


@dataclass(frozen=True)
class Matern32:
    variance: float = 1.0
    lengthscale: float = 1.0


@dataclass(frozen=True)
class Matern52:
    variance: float = 1.0
    lengthscale: float = 1.0


@dataclass(frozen=True)
class Matern72:
    variance: float = 1.0
    lengthscale: float = 1.0


@dataclass(frozen=True)
class Cosine:
    """Pure oscillation kappa(tau) = variance * cos(2 pi tau / period)."""

    variance: float = 1.0
    period: float = 1.0


@dataclass(frozen=True)
class Periodic:
    """Truncated harmonic expansion of the exp-sine-squared kernel.

    kappa(tau) ~ sum_j q_j^2 cos(2 pi j tau / period), j = 0..harmonics, with
    q_j^2 proportional to the modified Bessel coefficients I_j(1/lengthscale^2)
    and normalised so the marginal variance is exactly `variance`.
    """

    variance: float = 1.0
    lengthscale: float = 1.0
    period: float = 1.0
    harmonics: int = 6


@dataclass(frozen=True)
class QuasiPeriodic:
    """Exponentially damped oscillation: Matern12(lengthscale) x Cosine(period)."""

    variance: float = 1.0
    lengthscale: float = 1.0
    period: float = 1.0


@dataclass(frozen=True)
class Sum:
    parts: tuple

    def __post_init__(self):
        if len(self.parts) < 2:
            raise ValueError(f"Sum needs >= 2 parts, got {len(self.parts)}")
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True)
class Product:
    left: object
    right: object


_MATERN_ORDER = {Matern12: 0, Matern32: 1, Matern52: 2, Matern72: 3}


def _validate(kernel):
    for name in ("variance", "lengthscale", "period"):
        v = getattr(kernel, name, None)
        if v is not None and not v > 0:
            raise ValueError(f"{type(kernel).__name__}.{name} must be > 0, got {v}")
    h = getattr(kernel, "harmonics", None)
    if h is not None and (int(h) != h or h < 1):
        raise ValueError(f"harmonics must be a positive integer, got {h}")


# ---------------------------------------------------------------------------
# state-space types


@dataclass(frozen=True, eq=False)
class ContinuousSSM:
    F: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    H: np.ndarray
    Pinf: np.ndarray
    _dt_cache: dict = field(default_factory=dict, repr=False)

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]


@dataclass(frozen=True)
class DiscreteTransition:
    A: np.ndarray
    Q: np.ndarray
    dt: float


# ---------------------------------------------------------------------------
# per-variant constructions


def _matern_ssm(p, variance, lengthscale):
    # nu = p + 1/2, lambda = sqrt(2 nu) / lengthscale, companion-form F
    s = p + 1
    lam = math.sqrt(2 * p + 1) / lengthscale
    F = np.diag(np.ones(s - 1), 1)
    F[-1, :] = [-math.comb(s, k) * lam ** (s - k) for k in range(s)]
    L = np.zeros((s, 1))
    L[-1, 0] = 1.0
    q = 2.0 * variance * math.sqrt(math.pi) * lam ** (2 * p + 1) * gamma(p + 1) / gamma(p + 0.5)
    Qc = np.array([[q]])
    H = np.zeros((1, s))
    H[0, 0] = 1.0
    Pinf = solve_continuous_lyapunov(F, -L @ Qc @ L.T)
    Pinf = 0.5 * (Pinf + Pinf.T)
    return ContinuousSSM(F, L, Qc, H, Pinf)


def _oscillator_blocks(kernel):
    """(angular frequency, variance) pairs for the purely oscillatory kernels."""
    if isinstance(kernel, Cosine):
        return [(2.0 * math.pi / kernel.period, kernel.variance)]
    if isinstance(kernel, Periodic):
        z = 1.0 / kernel.lengthscale**2
        js = np.arange(kernel.harmonics + 1)
        # ive(j, z) = I_j(z) exp(-z): the harmonic weights of exp(z cos theta)
        q2 = np.where(js == 0, 1.0, 2.0) * ive(js, z)
        q2 = kernel.variance * q2 / q2.sum()
        w0 = 2.0 * math.pi / kernel.period
        return [(w0 * j, q2[j]) for j in js]
    raise TypeError(f"{type(kernel).__name__} is not oscillatory")


def _oscillator_ssm(kernel):
    blocks = []
    for omega, var in _oscillator_blocks(kernel):
        F = np.array([[0.0, -omega], [omega, 0.0]])
        L = np.eye(2)
        Qc = np.zeros((2, 2))
        H = np.array([[1.0, 0.0]])
        Pinf = var * np.eye(2)
        blocks.append(ContinuousSSM(F, L, Qc, H, Pinf))
    return _sum_ssm(blocks)


def _sum_ssm(components):
    F = _block_diag([c.F for c in components])
    L = _block_diag([c.L for c in components])
    Qc = _block_diag([c.Qc for c in components])
    Pinf = _block_diag([c.Pinf for c in components])
    H = np.concatenate([c.H for c in components], axis=1)
    return ContinuousSSM(F, L, Qc, H, Pinf)


def _product_ssm(kernel):
    left, right = kernel.left, kernel.right
    if type(left) in _MATERN_ORDER and isinstance(right, (Cosine, Periodic)):
        base, osc = left, right
    elif type(right) in _MATERN_ORDER and isinstance(left, (Cosine, Periodic)):
        base, osc = right, left
    else:
        raise ValueError(
            f"unsupported kernel combination: Product({type(left).__name__}, "
            f"{type(right).__name__}); one factor must be Matern*, the other "
            f"Cosine or Periodic"
        )
    b = to_state_space(base)
    blocks = []
    for omega, var in _oscillator_blocks(osc):
        Fc = np.array([[0.0, -omega], [omega, 0.0]])
        sb = b.state_dim
        F = np.kron(b.F, np.eye(2)) + np.kron(np.eye(sb), Fc)
        L = np.kron(b.L, np.eye(2))
        Qc = np.kron(b.Qc, var * np.eye(2))
        H = np.kron(b.H, np.array([[1.0, 0.0]]))
        Pinf = np.kron(b.Pinf, var * np.eye(2))
        blocks.append(ContinuousSSM(F, L, Qc, H, Pinf))
    return _sum_ssm(blocks)


def _block_diag(mats):
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


# ---------------------------------------------------------------------------
# public operations


def to_state_space(kernel) -> ContinuousSSM:
    """Continuous state-space form (F, L, Qc, H, Pinf) of a kernel."""
    _validate(kernel)
    t = type(kernel)
    if t in _MATERN_ORDER:
        return _matern_ssm(_MATERN_ORDER[t], kernel.variance, kernel.lengthscale)
    if t in (Cosine, Periodic):
        return _oscillator_ssm(kernel)
    if t is QuasiPeriodic:
        return _product_ssm(
            Product(Matern12(kernel.variance, kernel.lengthscale), Cosine(1.0, kernel.period))
        )
    if t is Sum:
        return _sum_ssm([to_state_space(p) for p in kernel.parts])
    if t is Product:
        return _product_ssm(kernel)
    raise TypeError(f"unsupported kernel type {t.__name__}")


def stack_independent(ssms):
    """Independent latent processes: block-diagonal state, block-diagonal H (m x s)."""
    out = _sum_ssm(ssms)
    H = _block_diag([s.H for s in ssms])
    return ContinuousSSM(out.F, out.L, out.Qc, H, out.Pinf)


def discretize(ssm: ContinuousSSM, dt: float) -> DiscreteTransition:
    """Exact discrete transition over a step of length dt, cached per distinct dt."""
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    dt = float(dt)
    hit = ssm._dt_cache.get(dt)
    if hit is not None:
        return hit
    s = ssm.state_dim
    if dt == 0.0:
        trans = DiscreteTransition(np.eye(s), np.zeros((s, s)), 0.0)
    else:
        A = expm(ssm.F * dt)
        Q = ssm.Pinf - A @ ssm.Pinf @ A.T
        Q = 0.5 * (Q + Q.T)
        trans = DiscreteTransition(A, Q, dt)
    ssm._dt_cache[dt] = trans
    return trans


def stationary_prior(ssm: ContinuousSSM):
    """Initial state distribution (0, Pinf)."""
    return np.zeros(ssm.state_dim), ssm.Pinf.copy()


# ---------------------------------------------------------------------------
# covariance functions (needed for the spatial Gram matrices)


def kappa(kernel, tau):
    """Stationary covariance kappa(tau) of a kernel, vectorised over tau."""
    r = np.abs(np.asarray(tau, dtype=float))
    t = type(kernel)
    if t is Matern12:
        return kernel.variance * np.exp(-r / kernel.lengthscale)
    if t is Matern32:
        u = math.sqrt(3.0) * r / kernel.lengthscale
        return kernel.variance * (1.0 + u) * np.exp(-u)
    if t is Matern52:
        u = math.sqrt(5.0) * r / kernel.lengthscale
        return kernel.variance * (1.0 + u + u**2 / 3.0) * np.exp(-u)
    if t is Matern72:
        u = math.sqrt(7.0) * r / kernel.lengthscale
        return kernel.variance * (1.0 + u + 0.4 * u**2 + u**3 / 15.0) * np.exp(-u)
    if t is Cosine:
        return kernel.variance * np.cos(2.0 * math.pi * r / kernel.period)
    if t is Periodic:
        out = np.zeros_like(r)
        for omega, var in _oscillator_blocks(kernel):
            out += var * np.cos(omega * r)
        return out
    if t is QuasiPeriodic:
        return (
            kernel.variance
            * np.exp(-r / kernel.lengthscale)
            * np.cos(2.0 * math.pi * r / kernel.period)
        )
    if t is Sum:
        return sum(kappa(p, tau) for p in kernel.parts)
    if t is Product:
        return kappa(kernel.left, tau) * kappa(kernel.right, tau)
    raise TypeError(f"unsupported kernel type {t.__name__}")


def gram(kernel, x1, x2=None):
    """Gram matrix kappa(|x1_i - x2_j|) for scalar input locations."""
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = x1 if x2 is None else np.asarray(x2, dtype=float).ravel()
    return kappa(kernel, x1[:, None] - x2[None, :])


# ---------------------------------------------------------------------------
# trainable hyperparameters, stored in log form


def param_names(kernel):
    t = type(kernel)
    if t in _MATERN_ORDER or t in (Periodic, QuasiPeriodic):
        return ["log_variance", "log_lengthscale"]
    if t is Cosine:
        return ["log_variance"]
    if t is Sum:
        return [f"part{i}.{n}" for i, p in enumerate(kernel.parts) for n in param_names(p)]
    if t is Product:
        return [f"left.{n}" for n in param_names(kernel.left)] + [
            f"right.{n}" for n in param_names(kernel.right)
        ]
    raise TypeError(f"unsupported kernel type {t.__name__}")


def log_params(kernel):
    t = type(kernel)
    if t in _MATERN_ORDER or t in (Periodic, QuasiPeriodic):
        return np.log([kernel.variance, kernel.lengthscale])
    if t is Cosine:
        return np.log([kernel.variance])
    if t is Sum:
        return np.concatenate([log_params(p) for p in kernel.parts])
    if t is Product:
        return np.concatenate([log_params(kernel.left), log_params(kernel.right)])
    raise TypeError(f"unsupported kernel type {t.__name__}")


def with_log_params(kernel, values):
    values = np.asarray(values, dtype=float)
    if values.shape != (len(log_params(kernel)),):
        raise ValueError(
            f"expected {len(log_params(kernel))} parameters for "
            f"{type(kernel).__name__}, got shape {values.shape}"
        )
    t = type(kernel)
    if t in _MATERN_ORDER or t in (Periodic, QuasiPeriodic):
        return replace(kernel, variance=math.exp(values[0]), lengthscale=math.exp(values[1]))
    if t is Cosine:
        return replace(kernel, variance=math.exp(values[0]))
    if t is Sum:
        parts, i = [], 0
        for p in kernel.parts:
            k = len(log_params(p))
            parts.append(with_log_params(p, values[i : i + k]))
            i += k
        return Sum(tuple(parts))
    if t is Product:
        nl = len(log_params(kernel.left))
        return Product(
            with_log_params(kernel.left, values[:nl]),
            with_log_params(kernel.right, values[nl:]),
        )
    raise TypeError(f"unsupported kernel type {t.__name__}")
