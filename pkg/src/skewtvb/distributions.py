"""Densities, moments and samplers for the skew t family and its building blocks.

The skew t density used throughout the package is

    ST(z; mu, sigma2, delta, nu) = 2 t(z; mu, delta**2 + sigma2, nu) T(zt; nu + 1)

with ``zt = (z - mu) delta / sigma * sqrt((nu + 1) / (nu (delta**2 + sigma2) + (z - mu)**2))``.
It is the marginal of the hierarchy

    Lambda ~ Gamma(nu/2, rate=nu/2)
    u | Lambda ~ N+(0, 1/Lambda)
    e | u, Lambda ~ N(mu + delta u, sigma2/Lambda)

which :func:`sample_skew_t` draws from directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "SkewTParams",
    "TruncNormalMoments",
    "student_t_pdf",
    "student_t_logpdf",
    "student_t_cdf",
    "skew_t_pdf",
    "skew_t_logpdf",
    "skew_t_moments",
    "sample_skew_t",
    "trunc_normal_moments",
    "chi2_quantile",
]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_LOG_SQRT_PI = 0.5 * math.log(math.pi)


@dataclass(frozen=True)
class SkewTParams:
    """Location ``mu``, squared spread ``sigma2``, shape ``delta``, dof ``nu``."""

    mu: float = 0.0
    sigma2: float = 1.0
    delta: float = 0.0
    nu: float = 4.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")
        if not (math.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be positive and finite, got {self.nu}")
        if not (math.isfinite(self.mu) and math.isfinite(self.delta)):
            raise ValueError("mu and delta must be finite")


@dataclass(frozen=True)
class TruncNormalMoments:
    """First two raw moments of a normal variable truncated to [0, inf)."""

    mean: np.ndarray | float
    second_moment: np.ndarray | float


def _check_positive(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} must be positive and finite")


def _log_gamma_ratio(nu):
    # log Gamma((nu+1)/2) - log Gamma(nu/2); poch stays accurate for huge nu
    # where a difference of gammaln values would cancel catastrophically.
    return np.log(special.poch(np.asarray(nu, dtype=float) / 2.0, 0.5))


def student_t_logpdf(z, mu, sigma2, nu):
    """Log density of Student's t with location ``mu`` and squared scale ``sigma2``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    _check_positive("sigma2", sigma2)
    _check_positive("nu", nu)
    nu = np.asarray(nu, dtype=float)
    r2 = (z - mu) ** 2 / (nu * sigma2)
    return (
        _log_gamma_ratio(nu)
        - 0.5 * np.log(sigma2 * nu)
        - _LOG_SQRT_PI
        - 0.5 * (nu + 1.0) * np.log1p(r2)
    )


def student_t_pdf(z, mu, sigma2, nu):
    """Density of Student's t with location ``mu``, squared scale ``sigma2`` and dof ``nu``."""
    out = np.exp(student_t_logpdf(z, mu, sigma2, nu))
    return float(out) if out.ndim == 0 else out


def _student_t_lower_tail(a, nu):
    # P(T <= -a) for a >= 0, shaped like broadcast(atleast_1d(a), nu).
    a, nu = np.broadcast_arrays(np.atleast_1d(np.asarray(a, dtype=float)), nu)
    nu_flat = np.unique(nu)
    if nu_flat.size == 1 and nu_flat[0] == np.round(nu_flat[0]) and nu_flat[0] <= _MAX_SERIES_DOF:
        out = _lower_tail_integer_dof(a, int(nu_flat[0]))
        # The closed form is (1 - A)/2 with A -> 1, so relative accuracy decays
        # like 1e-16/tail; below 1e-8 the tail is redone with betainc.
        deep = out < 1e-8
        if deep.any():
            out[deep] = _lower_tail_betainc(a[deep], float(nu_flat[0]))
        return out
    return _lower_tail_betainc(a, nu)


_MAX_SERIES_DOF = 64


def _lower_tail_betainc(a, nu):
    # Regularized incomplete beta, evaluated directly as the tail (never as
    # 0.5 minus something) and with its argument kept at or below 1/2.
    a = np.atleast_1d(a)
    nu = np.broadcast_to(nu, a.shape)
    a2 = a * a
    out = np.empty(a.shape)
    near = a2 < nu
    far = ~near
    out[near] = 0.5 * special.betaincc(0.5, nu[near] / 2.0, a2[near] / (nu[near] + a2[near]))
    out[far] = 0.5 * special.betainc(nu[far] / 2.0, 0.5, nu[far] / (nu[far] + a2[far]))
    return out


def _lower_tail_integer_dof(a, nu):
    # Finite trigonometric series for P(|T| < a) with integer dof
    # (Abramowitz & Stegun 26.7.3 and 26.7.4).
    a = np.atleast_1d(a)
    r2 = nu + a * a
    c2 = nu / r2
    s = a / np.sqrt(r2)
    if nu % 2:
        if nu == 1:
            inner = np.zeros_like(a)
        else:
            term = np.sqrt(c2)
            inner = term.copy()
            for j in range(3, nu - 1, 2):
                term = term * c2 * (j - 1) / j
                inner += term
        central = (2.0 / math.pi) * (np.arctan(a / math.sqrt(nu)) + s * inner)
    else:
        term = np.ones_like(a)
        inner = term.copy()
        for j in range(2, nu - 1, 2):
            term = term * c2 * (j - 1) / j
            inner += term
        central = s * inner
    return 0.5 * (1.0 - central)


def student_t_cdf(z, nu):
    """CDF of the standard Student's t distribution with ``nu`` degrees of freedom."""
    _check_positive("nu", nu)
    z = np.asarray(z, dtype=float)
    if np.any(np.isnan(z)):
        raise ValueError("z must not be NaN")
    nu = np.asarray(nu, dtype=float)
    lower = _student_t_lower_tail(np.abs(z), nu).reshape(np.broadcast(z, nu).shape)
    out = np.where(z < 0, lower, 1.0 - lower)
    return float(out) if out.ndim == 0 else out


def _log_student_t_cdf(z, nu):
    lower = _student_t_lower_tail(np.abs(z), nu).reshape(np.shape(z))
    with np.errstate(divide="ignore"):
        return np.where(z < 0, np.log(lower), np.log1p(-lower))


def skew_t_logpdf(z, mu, sigma2, delta, nu):
    """Vectorised log density of the skew t distribution.

    All parameters broadcast against ``z``; the particle filter relies on
    this to evaluate every particle and measurement component at once.
    """
    z = np.asarray(z, dtype=float)
    _check_positive("sigma2", sigma2)
    _check_positive("nu", nu)
    nu = np.asarray(nu, dtype=float)
    delta = np.asarray(delta, dtype=float)
    d = z - mu
    scale2 = delta * delta + sigma2
    zt = d * delta / np.sqrt(sigma2) * np.sqrt((nu + 1.0) / (nu * scale2 + d * d))
    return math.log(2.0) + student_t_logpdf(z, mu, scale2, nu) + _log_student_t_cdf(zt, nu + 1.0)


def skew_t_pdf(z, p: SkewTParams):
    """Density of the skew t distribution with parameters ``p`` at ``z``."""
    out = np.exp(skew_t_logpdf(z, p.mu, p.sigma2, p.delta, p.nu))
    return float(out) if out.ndim == 0 else out


def skew_t_moments(p: SkewTParams) -> tuple[float, float]:
    """Mean and variance of the skew t distribution.

    Obtained from the hierarchy: with ``c = E[Lambda**-0.5] * sqrt(2/pi)``,
    ``mean = mu + delta c`` and
    ``var = (delta**2 + sigma2) nu / (nu - 2) - (delta c)**2``.

    Raises
    ------
    ValueError
        If ``nu <= 2``, where the variance does not exist.
    """
    if p.nu <= 2:
        raise ValueError(f"skew t variance is undefined for nu <= 2 (got nu={p.nu})")
    # E[Lambda^-1/2] = sqrt(nu/2) Gamma((nu-1)/2) / Gamma(nu/2)
    e_inv_sqrt = math.sqrt(p.nu / 2.0) / special.poch((p.nu - 1.0) / 2.0, 0.5)
    c = p.delta * e_inv_sqrt * _SQRT_2_OVER_PI
    mean = p.mu + c
    var = (p.delta**2 + p.sigma2) * p.nu / (p.nu - 2.0) - c * c
    return mean, var


def sample_skew_t(p: SkewTParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. skew t variates through the gamma / half-normal hierarchy."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    lam = rng.gamma(p.nu / 2.0, 2.0 / p.nu, size=n)
    inv_sqrt_lam = 1.0 / np.sqrt(lam)
    u = np.abs(rng.standard_normal(n)) * inv_sqrt_lam
    eps = rng.standard_normal(n) * inv_sqrt_lam
    return p.mu + p.delta * u + math.sqrt(p.sigma2) * eps


def trunc_normal_moments(m, s2) -> TruncNormalMoments:
    """E[u] and E[u**2] for ``u ~ N(m, s2)`` truncated to the nonnegative half-line.

    Vectorised over ``m`` and ``s2``. The inverse Mills ratio
    ``phi(t) / Phi(t)`` with ``t = m / sqrt(s2)`` is written as
    ``sqrt(2/pi) / erfcx(-t / sqrt(2))``, which neither underflows nor
    overflows for strongly negative ``t``.
    """
    m = np.asarray(m, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if np.any(~(s2 > 0)) or np.any(~np.isfinite(s2)):
        raise ValueError("s2 must be positive and finite")
    if np.any(~np.isfinite(m)):
        raise ValueError("m must be finite")
    mean, second = _trunc_moments(m, s2)
    if mean.ndim == 0:
        return TruncNormalMoments(float(mean), float(second))
    return TruncNormalMoments(mean, second)


def _trunc_moments(m, s2):
    # Unchecked array version used inside the variational iterations.
    s = np.sqrt(s2)
    t = m / s
    shift = t + _SQRT_2_OVER_PI / special.erfcx(-t / math.sqrt(2.0))
    second = 1.0 + t * shift
    # t + lam and 1 + t (t + lam) cancel badly for t << 0; a continued
    # fraction gives both directly there.
    far = t < -5.0
    if far.any():
        if t.ndim:
            x = -t[far]
            c, d = _cf_tail(x, 1), _cf_tail(x, 2)
            shift[far] = c
            second[far] = d / (x + d)
        else:
            x = -t
            c, d = _cf_tail(x, 1), _cf_tail(x, 2)
            shift, second = c, d / (x + d)
    return s * shift, s2 * second


def _cf_tail(x, start, terms=32):
    # start/(x + (start+1)/(x + (start+2)/(x + ...))), the tail of Laplace's
    # continued fraction (1 - Phi(x))/phi(x) = 1/(x + 1/(x + 2/(x + ...))).
    # For t = -x: t + phi(t)/Phi(t) = tail(x, 1) and
    # 1 + t (t + phi(t)/Phi(t)) = tail(x, 2) / (x + tail(x, 2)).
    acc = np.zeros_like(x)
    for j in range(start + terms, start - 1, -1):
        acc = j / (x + acc)
    return acc


def chi2_quantile(p: float, dof: int) -> float:
    """Inverse CDF of the chi-square distribution with ``dof`` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    return float(2.0 * special.gammaincinv(dof / 2.0, p))
