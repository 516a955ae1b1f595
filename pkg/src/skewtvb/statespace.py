"""Linear state-space models with skew t measurement noise, and their simulation.

    x[k+1] = A x[k] + w[k],        w[k] ~ N(0, Q)
    y[k]   = C x[k] + e[k],        e[k]_i ~ ST(0, R_ii, Delta_ii, nu_i)
    x[1]   ~ N(x0, P0)

``R``, ``Delta`` and ``nu`` are stored as vectors holding the diagonals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import SkewTParams, sample_skew_t

__all__ = [
    "ModelError",
    "StateSpaceModel",
    "Trajectory",
    "simulate",
    "PseudorangeScenario",
    "synthetic_constellation",
    "pseudorange_rows",
    "build_pseudorange_model",
    "simulate_pseudorange",
    "EARTH_RADIUS",
    "ORBIT_RADIUS",
]

EARTH_RADIUS = 6_371_000.0
ORBIT_RADIUS = 26_600_000.0


class ModelError(ValueError):
    """A model or scenario violates one of its invariants."""


def _is_psd(M, tol=1e-10):
    if not np.allclose(M, M.T, rtol=0, atol=tol * max(1.0, np.abs(M).max())):
        return False
    return np.linalg.eigvalsh(M).min() >= -tol * max(1.0, np.abs(M).max())


def _as_diag(v, name, n):
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        if np.any(v - np.diag(np.diag(v))):
            raise ModelError(f"{name} must be diagonal")
        v = np.diag(v).copy()
    v = np.atleast_1d(v)
    if v.shape == (1,) and n > 1:
        v = np.full(n, v[0])
    if v.shape != (n,):
        raise ModelError(f"{name} must have {n} diagonal entries, got shape {v.shape}")
    return v


@dataclass
class StateSpaceModel:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Delta: np.ndarray
    nu: np.ndarray
    x0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        n_y = self.C.shape[0]
        self.R = _as_diag(self.R, "R", n_y)
        self.Delta = _as_diag(self.Delta, "Delta", n_y)
        self.nu = _as_diag(self.nu, "nu", n_y)
        self.validate()

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def validate(self):
        """Raise :class:`ModelError` naming the first violated invariant."""
        n_x, n_y = self.n_x, self.n_y
        shapes = {
            "A": (self.A.shape, (n_x, n_x)),
            "C": (self.C.shape, (n_y, n_x)),
            "Q": (self.Q.shape, (n_x, n_x)),
            "x0": (self.x0.shape, (n_x,)),
            "P0": (self.P0.shape, (n_x, n_x)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ModelError(f"{name} has shape {got}, expected {want}")
        for name in ("A", "C", "Q", "R", "Delta", "nu", "x0", "P0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} contains non-finite entries")
        if not _is_psd(self.Q):
            raise ModelError("Q must be symmetric positive semidefinite")
        if not _is_psd(self.P0):
            raise ModelError("P0 must be symmetric positive semidefinite")
        if np.any(self.R <= 0):
            raise ModelError("R must have strictly positive diagonal entries")
        if np.any(self.nu <= 0):
            raise ModelError("nu must be entrywise positive")

    def noise_params(self, i: int) -> SkewTParams:
        """Skew t parameters of measurement component ``i``."""
        return SkewTParams(0.0, float(self.R[i]), float(self.Delta[i]), float(self.nu[i]))

    def with_noise(self, R=None, Delta=None, nu=None) -> "StateSpaceModel":
        return StateSpaceModel(
            self.A, self.C, self.Q,
            self.R if R is None else R,
            self.Delta if Delta is None else Delta,
            self.nu if nu is None else nu,
            self.x0, self.P0,
        )


@dataclass
class Trajectory:
    states: np.ndarray
    measurements: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.measurements):
            raise ValueError("states and measurements must have equal length")

    @property
    def K(self) -> int:
        return len(self.states)


def _sqrt_psd(M):
    # Symmetric square root; works for singular covariances (e.g. a constant bias state).
    w, V = np.linalg.eigh(M)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate(model: StateSpaceModel, K: int, rng: np.random.Generator) -> Trajectory:
    """Draw a state trajectory and measurements of length ``K``.

    Draw order is fixed (initial state, process noise, then measurement
    noise component by component), so a seeded stream reproduces the
    trajectory bit for bit.
    """
    model.validate()
    if K < 0:
        raise ValueError("K must be nonnegative")
    n_x, n_y = model.n_x, model.n_y
    if K == 0:
        return Trajectory(np.empty((0, n_x)), np.empty((0, n_y)))
    x = np.empty((K, n_x))
    x[0] = model.x0 + _sqrt_psd(model.P0) @ rng.standard_normal(n_x)
    w = rng.standard_normal((K - 1, n_x)) @ _sqrt_psd(model.Q).T
    for k in range(1, K):
        x[k] = model.A @ x[k - 1] + w[k - 1]
    e = np.column_stack([sample_skew_t(model.noise_params(i), K, rng) for i in range(n_y)])
    return Trajectory(x, x @ model.C.T + e)


def synthetic_constellation(azimuth_offset: float = 0.0) -> np.ndarray:
    """Eight satellite positions in a local east-north-up frame centred at the receiver.

    Satellite ``j`` sits at azimuth ``offset + 45 j`` degrees and elevation
    ``(15, 35, 55, 75)[j % 4]`` degrees, at the range where it meets the
    orbital sphere of radius :data:`ORBIT_RADIUS` around the Earth's centre.
    """
    sats = []
    for j in range(8):
        az = math.radians(azimuth_offset + 45.0 * j)
        el = math.radians((15.0, 35.0, 55.0, 75.0)[j % 4])
        d = np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])
        b = EARTH_RADIUS * math.sin(el)
        rho = -b + math.sqrt(b * b + ORBIT_RADIUS**2 - EARTH_RADIUS**2)
        sats.append(rho * d)
    return np.array(sats)


@dataclass
class PseudorangeScenario:
    """Static-constellation pseudorange positioning with a constant clock bias.

    Positions are metres in a local frame whose origin is the nominal
    receiver position; ``q`` is the horizontal process-noise standard
    deviation per step.
    """

    satellites: np.ndarray = field(default_factory=synthetic_constellation)
    q: float = 10.0
    noise: SkewTParams = field(default_factory=lambda: SkewTParams(0.0, 1.0, 5.0, 4.0))
    K: int = 100
    bias_prior_std: float = 0.75
    pos_prior_std: float = 10.0
    vertical_std: float = 0.5
    receiver: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.satellites = np.atleast_2d(np.asarray(self.satellites, dtype=float))
        self.receiver = np.asarray(self.receiver, dtype=float)
        if self.satellites.shape[0] < 4 or self.satellites.shape[1] != 3:
            raise ModelError(
                f"need at least 4 satellites as rows of 3-vectors, got shape {self.satellites.shape}"
            )
        if not self.q >= 0:
            raise ModelError(f"q must be nonnegative, got {self.q}")
        if self.K < 0:
            raise ModelError("K must be nonnegative")
        if not (self.bias_prior_std > 0 and self.pos_prior_std > 0):
            raise ModelError("prior standard deviations must be positive")


def pseudorange_rows(scenario: PseudorangeScenario, linearization_point) -> np.ndarray:
    """Jacobian of ``||s_i - p|| + b`` with respect to ``(p, b)``.

    Row ``i`` is ``[-u_i, 1]`` with ``u_i`` the unit vector from the
    receiver towards satellite ``i``.
    """
    p = np.asarray(linearization_point, dtype=float)[:3]
    los = scenario.satellites - p
    ranges = np.linalg.norm(los, axis=1)
    if np.any(ranges <= 0):
        raise ModelError("linearization point coincides with a satellite")
    return np.column_stack([-los / ranges[:, None], np.ones(len(ranges))])


def build_pseudorange_model(scenario: PseudorangeScenario) -> StateSpaceModel:
    """Four-state random walk (position, clock bias) linearised at the prior mean."""
    n_sat = scenario.satellites.shape[0]
    if n_sat < 4:
        raise ModelError("at least 4 satellites are needed for observability")
    q2 = scenario.q**2
    p2 = scenario.pos_prior_std**2
    x0 = np.concatenate([scenario.receiver, [0.0]])
    nz = scenario.noise
    return StateSpaceModel(
        A=np.eye(4),
        C=pseudorange_rows(scenario, x0),
        Q=np.diag([q2, q2, scenario.vertical_std**2, 0.0]),
        R=np.full(n_sat, nz.sigma2),
        Delta=np.full(n_sat, nz.delta),
        nu=np.full(n_sat, nz.nu),
        x0=x0,
        P0=np.diag([p2, p2, p2, scenario.bias_prior_std**2]),
    )


def simulate_pseudorange(
    scenario: PseudorangeScenario,
    model: StateSpaceModel,
    rng: np.random.Generator,
    noise_sampler=None,
) -> Trajectory:
    """Simulate exact pseudoranges and return them as linearised residuals.

    The states follow the model's random walk; measurements are the
    nonlinear ``||s_i - p_k|| + b_k + e`` minus the constant part of the
    linearisation, so that they are directly usable with ``model.C``.
    ``noise_sampler(n, rng)`` replaces the skew t noise when given.
    """
    K = scenario.K
    n_y = model.n_y
    if K == 0:
        return Trajectory(np.empty((0, model.n_x)), np.empty((0, n_y)))
    x = np.empty((K, model.n_x))
    x[0] = model.x0 + _sqrt_psd(model.P0) @ rng.standard_normal(model.n_x)
    w = rng.standard_normal((K - 1, model.n_x)) @ _sqrt_psd(model.Q).T
    for k in range(1, K):
        x[k] = model.A @ x[k - 1] + w[k - 1]
    if noise_sampler is None:
        e = np.column_stack([sample_skew_t(model.noise_params(i), K, rng) for i in range(n_y)])
    else:
        e = noise_sampler((K, n_y), rng)
    sats = scenario.satellites
    ranges = np.linalg.norm(sats[None, :, :] - x[:, None, :3], axis=2)
    y = ranges + x[:, 3:4] + e
    x_lin = model.x0
    rho0 = np.linalg.norm(sats - x_lin[:3], axis=1)
    offset = rho0 - model.C[:, :3] @ x_lin[:3]
    return Trajectory(x, y - offset)
