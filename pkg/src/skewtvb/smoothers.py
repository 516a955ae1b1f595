"""Batch smoothers: RTS, gated RTS, and the Student t / skew t variational smoothers."""

from __future__ import annotations

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .distributions import _trunc_moments
from .filters import (
    FilterError,
    GaussianBelief,
    VbConfig,
    VbLatentState,
    _gain,
    _sym,
    gaussian_noise_moments,
    run_kf_gated,
    student_t_noise_shape,
)
from .statespace import StateSpaceModel

__all__ = ["rtss", "rtss_g", "stvbs", "tvbs", "kf_forward"]


def rtss(model: StateSpaceModel, filtered, predicted):
    """Rauch-Tung-Striebel backward pass.

    Parameters
    ----------
    filtered, predicted : list of GaussianBelief
        ``predicted[k]`` is the belief about ``x[k]`` before measurement ``k``.

    Returns
    -------
    list of GaussianBelief
        Smoothed beliefs; the last one is the last filtered belief.
    """
    if len(filtered) != len(predicted):
        raise ValueError("filtered and predicted sequences must be aligned")
    K = len(filtered)
    if K == 0:
        return []
    A = model.A
    out = [None] * K
    out[-1] = filtered[-1]
    for k in range(K - 2, -1, -1):
        f, p_next, s_next = filtered[k], predicted[k + 1], out[k + 1]
        # G = P_f A^T P_pred^-1, from P_pred G^T = A P_f (P_pred symmetric)
        chol, info = dpotrf(p_next.cov, lower=True, clean=False)
        if info != 0:
            raise FilterError(f"predicted covariance at step {k + 1} is not positive definite")
        Gt, _ = dpotrs(chol, A @ f.cov, lower=True)
        G = Gt.T
        mean = f.mean + G @ (s_next.mean - p_next.mean)
        cov = _sym(f.cov + G @ (s_next.cov - p_next.cov) @ Gt)
        out[k] = GaussianBelief(mean, cov)
    return out


def kf_forward(model: StateSpaceModel, ys, noise_mean, noise_var):
    """Kalman forward pass with per-step noise moments.

    ``noise_mean`` and ``noise_var`` are ``(K, n_y)`` arrays (or broadcast
    to that shape), which lets the variational smoothers feed their current
    skewness offsets and precision scales through one code path.
    """
    K = len(ys)
    noise_mean = np.broadcast_to(noise_mean, (K, model.n_y))
    noise_var = np.broadcast_to(noise_var, (K, model.n_y))
    A, C, Q = model.A, model.C, model.Q
    filtered, predicted = [], []
    x, P = model.x0, model.P0
    for k in range(K):
        if k:
            x = A @ x
            P = _sym(A @ P @ A.T + Q)
        predicted.append(GaussianBelief(x, P))
        try:
            G = _gain(P, C, noise_var[k])
        except FilterError as exc:
            raise FilterError(f"step {k}: {exc}") from exc
        x = x + G @ (ys[k] - C @ x - noise_mean[k])
        P = _sym(P - G @ C @ P)
        filtered.append(GaussianBelief(x, P))
    return filtered, predicted


def _max_change(new, old):
    return max(float(np.max(np.abs(a.mean - b.mean))) for a, b in zip(new, old))


def stvbs(model: StateSpaceModel, ys, cfg: VbConfig = VbConfig()):
    """Skew t variational Bayes smoother.

    Each outer iteration runs a Kalman filter and RTS pass with the current
    skewness offsets ``Delta u_bar[k]`` and precision-scaled noise
    ``R / lambda_bar[k]``, then refreshes the truncated-normal and gamma
    factors of every time step from the smoothed beliefs. Stops when no
    smoothed mean moves by ``cfg.tol`` or more (infinity norm), or after
    ``cfg.max_iters`` outer iterations.

    Returns
    -------
    smoothed : list of GaussianBelief
    latents : list of VbLatentState
    iters : int
    """
    ys = np.asarray(ys, dtype=float)
    K = len(ys)
    if K < 1:
        raise ValueError("need at least one measurement")
    C, R, D, nu = model.C, model.R, model.Delta, model.nu
    lam = np.ones((K, model.n_y))
    u_bar = np.zeros((K, model.n_y))
    k_u = D / (D * D + R)
    u_scale = 1.0 - k_u * D
    prev = None
    for it in range(1, cfg.max_iters + 1):
        filtered, predicted = kf_forward(model, ys, D * u_bar, R / lam)
        smoothed = rtss(model, filtered, predicted)

        xs = np.array([b.mean for b in smoothed])
        Ps = np.array([b.cov for b in smoothed])
        resid = ys - xs @ C.T
        u_loc = k_u * resid
        u_cov = u_scale / lam
        u_bar, upsilon = _trunc_moments(u_loc, u_cov)
        cpc = np.einsum("ij,kjl,il->ki", C, Ps, C)
        psi = (resid * resid + cpc) / R + (D * D / R + 1.0) * upsilon - 2.0 * D * u_bar * resid / R
        lam = (nu + 2.0) / (nu + psi)

        if prev is not None and _max_change(smoothed, prev) < cfg.tol:
            break
        prev = smoothed
    latents = [
        VbLatentState(lam[k], u_bar[k], u_loc[k], u_cov[k], upsilon[k], psi[k], resid[k])
        for k in range(K)
    ]
    return smoothed, latents, it


def tvbs(
    model: StateSpaceModel,
    ys,
    cfg: VbConfig = VbConfig(max_iters=10),
    noise_mean=None,
    noise_shape=None,
):
    """Student t variational Bayes smoother.

    Same outer loop as :func:`stvbs` without the skewness factor; the noise
    is Student t with location ``noise_mean``, diagonal shape
    ``noise_shape`` and the model's degrees of freedom.

    Returns
    -------
    smoothed : list of GaussianBelief
    iters : int
    """
    if noise_mean is None or noise_shape is None:
        m, s = student_t_noise_shape([model.noise_params(i) for i in range(model.n_y)])
        noise_mean = m if noise_mean is None else noise_mean
        noise_shape = s if noise_shape is None else noise_shape
    ys = np.asarray(ys, dtype=float)
    K = len(ys)
    if K < 1:
        raise ValueError("need at least one measurement")
    C, nu = model.C, model.nu
    lam = np.ones((K, model.n_y))
    prev = None
    for it in range(1, cfg.max_iters + 1):
        filtered, predicted = kf_forward(model, ys, noise_mean, noise_shape / lam)
        smoothed = rtss(model, filtered, predicted)
        xs = np.array([b.mean for b in smoothed])
        Ps = np.array([b.cov for b in smoothed])
        resid = ys - noise_mean - xs @ C.T
        cpc = np.einsum("ij,kjl,il->ki", C, Ps, C)
        psi = (resid * resid + cpc) / noise_shape
        lam = (nu + 1.0) / (nu + psi)
        if prev is not None and _max_change(smoothed, prev) < cfg.tol:
            break
        prev = smoothed
    return smoothed, it


def rtss_g(model: StateSpaceModel, ys, noise_mean=None, noise_var=None, gate_p: float = 0.99):
    """Gated Kalman filter forward pass followed by an RTS backward pass."""
    if noise_mean is None or noise_var is None:
        m, v = gaussian_noise_moments([model.noise_params(i) for i in range(model.n_y)])
        noise_mean = m if noise_mean is None else noise_mean
        noise_var = v if noise_var is None else noise_var
    filtered, predicted = run_kf_gated(model, ys, noise_mean, noise_var, gate_p)
    return rtss(model, filtered, predicted)
