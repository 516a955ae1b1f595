"""Forward-pass estimators for linear models with heavy-tailed measurement noise.

Single-step functions transform a belief; the ``run_*`` helpers apply them
over a measurement sequence and return ``(filtered, predicted)`` lists
where ``predicted[k]`` is the belief about ``x[k]`` before ``y[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .distributions import SkewTParams, _trunc_moments, chi2_quantile, skew_t_logpdf, skew_t_moments
from .statespace import StateSpaceModel, _sqrt_psd

__all__ = [
    "GaussianBelief",
    "VbLatentState",
    "VbConfig",
    "ParticleSet",
    "FilterError",
    "DegeneracyError",
    "kf_predict",
    "kf_update",
    "kf_gated_update",
    "stvbf_step",
    "tvbf_step",
    "pf_init",
    "pf_step",
    "gaussian_noise_moments",
    "student_t_noise_shape",
    "run_kf",
    "run_kf_gated",
    "run_stvbf",
    "run_tvbf",
    "run_pf",
]


class FilterError(ArithmeticError):
    """A measurement update failed numerically."""


class DegeneracyError(FilterError):
    """Every particle weight underflowed."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class VbLatentState:
    """Diagonal variational quantities of one time step, one entry per measurement."""

    lambda_bar: np.ndarray
    u_bar: np.ndarray
    u_loc: np.ndarray
    u_cov: np.ndarray
    upsilon: np.ndarray
    psi: np.ndarray
    residual: np.ndarray


@dataclass(frozen=True)
class VbConfig:
    """Iteration limit and tolerance on the infinity-norm change of the state estimate."""

    max_iters: int = 30
    tol: float = 1e-2

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")


@dataclass
class ParticleSet:
    particles: np.ndarray
    log_weights: np.ndarray

    @property
    def N(self) -> int:
        return len(self.particles)

    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.log_weights.max())
        return w / w.sum()


def _sym(P):
    return 0.5 * (P + P.T)


def kf_predict(model: StateSpaceModel, b: GaussianBelief) -> GaussianBelief:
    A = model.A
    return GaussianBelief(A @ b.mean, _sym(A @ b.cov @ A.T + model.Q))


def _gain(P, C, noise_var, where=""):
    # K = P C^T S^-1 via a Cholesky solve of the innovation covariance.
    PCt = P @ C.T
    S = C @ PCt
    S.flat[:: S.shape[0] + 1] += noise_var
    chol, info = dpotrf(S, lower=True, clean=False, overwrite_a=True)
    if info != 0:
        raise FilterError(f"innovation covariance is not positive definite{where}")
    sol, _ = dpotrs(chol, PCt.T, lower=True)
    return sol.T


def kf_update(b: GaussianBelief, y, C, noise_mean, noise_cov) -> GaussianBelief:
    """Kalman measurement update with diagonal noise covariance ``noise_cov``.

    ``noise_cov`` holds the diagonal; ``noise_mean`` is subtracted from the
    innovation.
    """
    noise_cov = np.asarray(noise_cov, dtype=float)
    if np.any(noise_cov <= 0):
        raise ValueError("noise_cov entries must be positive")
    C = np.atleast_2d(C)
    K = _gain(b.cov, C, noise_cov)
    innov = y - C @ b.mean - noise_mean
    mean = b.mean + K @ innov
    cov = _sym(b.cov - K @ C @ b.cov)
    return GaussianBelief(mean, cov)


def kf_gated_update(b: GaussianBelief, y, C, noise_mean, noise_cov, gate_p: float = 0.99):
    """Kalman update after dropping components that fail a chi-square(1) gate.

    A component is dropped when its squared innovation divided by the
    matching innovation variance strictly exceeds the ``gate_p`` quantile.

    Returns
    -------
    belief : GaussianBelief
    kept : ndarray of bool
    """
    C = np.atleast_2d(C)
    noise_mean = np.broadcast_to(np.asarray(noise_mean, dtype=float), (C.shape[0],))
    noise_cov = np.broadcast_to(np.asarray(noise_cov, dtype=float), (C.shape[0],))
    innov = y - C @ b.mean - noise_mean
    s_diag = np.einsum("ij,jk,ik->i", C, b.cov, C) + noise_cov
    kept = innov**2 / s_diag <= chi2_quantile(gate_p, 1)
    if not kept.any():
        return GaussianBelief(b.mean.copy(), b.cov.copy()), kept
    post = kf_update(b, np.asarray(y)[kept], C[kept], noise_mean[kept], noise_cov[kept])
    return post, kept


def stvbf_step(model: StateSpaceModel, predicted: GaussianBelief, y, cfg: VbConfig = VbConfig()):
    """Skew t variational Bayes measurement update for one time step.

    Cycles the Gaussian state factor, the truncated-normal skewness factor
    and the gamma precision factor, starting from unit precisions and zero
    skewness offsets, until the state mean moves less than ``cfg.tol``
    (infinity norm) or ``cfg.max_iters`` cycles have run.

    Returns
    -------
    belief : GaussianBelief
    latent : VbLatentState
    iters : int
    """
    C, R, D, nu = model.C, model.R, model.Delta, model.nu
    x_p, P_p = predicted.mean, predicted.cov
    lam = np.ones(model.n_y)
    u_bar = np.zeros(model.n_y)
    innov0 = y - C @ x_p
    # Gains of the skewness factor do not depend on the iteration.
    k_u = D / (D * D + R)
    u_scale = 1.0 - k_u * D
    x_prev = None
    for it in range(1, cfg.max_iters + 1):
        K = _gain(P_p, C, R / lam, f" (VB iteration {it})")
        x = x_p + K @ (innov0 - D * u_bar)
        P = _sym(P_p - K @ C @ P_p)

        resid = y - C @ x
        u_loc = k_u * resid
        u_cov = u_scale / lam
        u_bar, upsilon = _trunc_moments(u_loc, u_cov)

        cpc = np.einsum("ij,jk,ik->i", C, P, C)
        psi = (resid * resid + cpc) / R + (D * D / R + 1.0) * upsilon - 2.0 * D * u_bar * resid / R
        lam = (nu + 2.0) / (nu + psi)

        if x_prev is not None and np.max(np.abs(x - x_prev)) < cfg.tol:
            break
        x_prev = x
    latent = VbLatentState(lam, u_bar, u_loc, u_cov, upsilon, psi, resid)
    return GaussianBelief(x, P), latent, it


def student_t_noise_shape(params: list[SkewTParams]):
    """Per-component mean and Student t shape ``(nu - 2)/nu * variance``."""
    mean = np.empty(len(params))
    shape = np.empty(len(params))
    for i, p in enumerate(params):
        m, v = skew_t_moments(p)
        mean[i] = m
        shape[i] = (p.nu - 2.0) / p.nu * v
    return mean, shape


def gaussian_noise_moments(params: list[SkewTParams]):
    """Per-component true mean and variance of the measurement noise."""
    mv = np.array([skew_t_moments(p) for p in params], dtype=float).reshape(-1, 2)
    return mv[:, 0], mv[:, 1]


def tvbf_step(
    model: StateSpaceModel,
    predicted: GaussianBelief,
    y,
    cfg: VbConfig = VbConfig(max_iters=10),
    noise_mean=None,
    noise_shape=None,
):
    """Student t variational Bayes measurement update for one time step.

    The noise is modelled as Student t with location ``noise_mean`` and
    diagonal shape ``noise_shape`` (both default to the values derived from
    the model's skew t parameters), with degrees of freedom ``model.nu``.

    Returns
    -------
    belief : GaussianBelief
    lambda_bar : ndarray
        Expected precision scale of each measurement component.
    iters : int
    """
    if noise_mean is None or noise_shape is None:
        m, s = student_t_noise_shape([model.noise_params(i) for i in range(model.n_y)])
        noise_mean = m if noise_mean is None else noise_mean
        noise_shape = s if noise_shape is None else noise_shape
    C, nu = model.C, model.nu
    x_p, P_p = predicted.mean, predicted.cov
    innov0 = y - noise_mean - C @ x_p
    lam = np.ones(model.n_y)
    x_prev = None
    for it in range(1, cfg.max_iters + 1):
        K = _gain(P_p, C, noise_shape / lam, f" (VB iteration {it})")
        x = x_p + K @ innov0
        P = _sym(P_p - K @ C @ P_p)
        resid = y - noise_mean - C @ x
        cpc = np.einsum("ij,jk,ik->i", C, P, C)
        psi = (resid * resid + cpc) / noise_shape
        lam = (nu + 1.0) / (nu + psi)
        if x_prev is not None and np.max(np.abs(x - x_prev)) < cfg.tol:
            break
        x_prev = x
    return GaussianBelief(x, P), lam, it


def pf_init(model: StateSpaceModel, N: int, rng: np.random.Generator) -> ParticleSet:
    """Particles drawn from the prior of ``x[1]`` with uniform weights."""
    if N < 1:
        raise ValueError("N must be >= 1")
    z = rng.standard_normal((N, model.n_x))
    particles = model.x0 + z @ _sqrt_psd(model.P0).T
    return ParticleSet(particles, np.full(N, -np.log(N)))


def _systematic_resample(w, rng):
    N = len(w)
    positions = (rng.random() + np.arange(N)) / N
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def pf_step(
    model: StateSpaceModel,
    ps: ParticleSet,
    y,
    rng: np.random.Generator,
    propagate: bool = True,
):
    """One bootstrap particle filter step.

    Particles are propagated through the dynamics (skipped for the first
    measurement, whose particles come from :func:`pf_init`), weighted by the
    skew t likelihood, and resampled systematically.

    Returns
    -------
    ParticleSet
        Resampled particles with uniform weights.
    estimate : ndarray
        Weighted mean before resampling.
    """
    X = ps.particles
    if propagate:
        X = X @ model.A.T + rng.standard_normal(X.shape) @ _sqrt_psd(model.Q).T
    resid = y - X @ model.C.T
    loglik = skew_t_logpdf(resid, 0.0, model.R, model.Delta, model.nu).sum(axis=1)
    logw = ps.log_weights + loglik
    top = logw.max()
    if not np.isfinite(top):
        raise DegeneracyError("all particle weights underflowed")
    w = np.exp(logw - top)
    w /= w.sum()
    estimate = w @ X
    idx = _systematic_resample(w, rng)
    N = len(X)
    return ParticleSet(X[idx], np.full(N, -np.log(N))), estimate


def _prior(model):
    return GaussianBelief(model.x0.copy(), model.P0.copy())


def run_kf(model: StateSpaceModel, ys, noise_mean=None, noise_var=None):
    """Kalman filter using the true noise mean and variance by default."""
    if noise_mean is None or noise_var is None:
        m, v = gaussian_noise_moments([model.noise_params(i) for i in range(model.n_y)])
        noise_mean = m if noise_mean is None else noise_mean
        noise_var = v if noise_var is None else noise_var
    filtered, predicted = [], []
    b = _prior(model)
    for k, y in enumerate(ys):
        if k:
            b = kf_predict(model, b)
        predicted.append(b)
        b = kf_update(b, y, model.C, noise_mean, noise_var)
        filtered.append(b)
    return filtered, predicted


def run_kf_gated(model: StateSpaceModel, ys, noise_mean=None, noise_var=None, gate_p: float = 0.99):
    if noise_mean is None or noise_var is None:
        m, v = gaussian_noise_moments([model.noise_params(i) for i in range(model.n_y)])
        noise_mean = m if noise_mean is None else noise_mean
        noise_var = v if noise_var is None else noise_var
    filtered, predicted = [], []
    b = _prior(model)
    for k, y in enumerate(ys):
        if k:
            b = kf_predict(model, b)
        predicted.append(b)
        b, _ = kf_gated_update(b, y, model.C, noise_mean, noise_var, gate_p)
        filtered.append(b)
    return filtered, predicted


def run_stvbf(model: StateSpaceModel, ys, cfg: VbConfig = VbConfig()):
    """Skew t VB filter over a sequence; also returns latent states and iteration counts."""
    filtered, predicted, latents, iters = [], [], [], []
    b = _prior(model)
    for k, y in enumerate(ys):
        if k:
            b = kf_predict(model, b)
        predicted.append(b)
        try:
            b, lat, n = stvbf_step(model, b, y, cfg)
        except FilterError as exc:
            raise FilterError(f"step {k}: {exc}") from exc
        filtered.append(b)
        latents.append(lat)
        iters.append(n)
    return filtered, predicted, latents, iters


def run_tvbf(model: StateSpaceModel, ys, cfg: VbConfig = VbConfig(max_iters=10), noise_mean=None, noise_shape=None):
    if noise_mean is None or noise_shape is None:
        m, s = student_t_noise_shape([model.noise_params(i) for i in range(model.n_y)])
        noise_mean = m if noise_mean is None else noise_mean
        noise_shape = s if noise_shape is None else noise_shape
    filtered, predicted = [], []
    b = _prior(model)
    for k, y in enumerate(ys):
        if k:
            b = kf_predict(model, b)
        predicted.append(b)
        b, _, _ = tvbf_step(model, b, y, cfg, noise_mean, noise_shape)
        filtered.append(b)
    return filtered, predicted


def run_pf(model: StateSpaceModel, ys, N: int, rng: np.random.Generator) -> np.ndarray:
    """Bootstrap particle filter; returns the ``(K, n_x)`` array of point estimates."""
    ps = pf_init(model, N, rng)
    out = np.empty((len(ys), model.n_x))
    for k, y in enumerate(ys):
        try:
            ps, out[k] = pf_step(model, ps, y, rng, propagate=k > 0)
        except DegeneracyError as exc:
            raise DegeneracyError(f"step {k}: {exc}") from exc
    return out
