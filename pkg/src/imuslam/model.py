"""Continuous and discrete error-state dynamics for the IMU/landmark filter.

Error-state layout (dimension ``15 + 3n`` for ``n`` estimated landmarks)::

    [0:3]    attitude error (vector part of the multiplicative error quaternion)
    [3:6]    position error (m)
    [6:9]    velocity error (m/s)
    [9:12]   gyro bias error (rad/s)
    [12:15]  accelerometer bias error (m/s^2)
    [15:]    landmark position errors, 3 per estimated landmark (m)

The IMU model adds bias and noise to the physical quantities:
``omega = gyro_reading + b_g + eps_g`` and
``r_ddot = A(q) (accel_reading + b_a + eps_a) - g``.

Two discretizations are provided.  The exact one treats the continuous
dynamics as constant over the step and evaluates the matrix exponential in
closed form (transition) and by the Van Loan augmented exponential (process
noise).  The ``legacy_*`` functions reproduce the truncated closed forms
that drop the bias-to-position couplings; they exist for cross-checking and
for the CLI's ``--paper-mode`` switch and are not used by the filter by
default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .rotation import quat_normalize, quat_propagate, rotation_matrix, skew

__all__ = [
    "NoiseSpec",
    "ImuSample",
    "ModelConstants",
    "FilterState",
    "DiscreteModel",
    "continuous_jacobians",
    "nominal_imu",
    "state_transition",
    "process_noise",
    "legacy_state_transition",
    "legacy_process_noise",
    "discretize",
    "propagate_nonlinear",
]

GRAVITY_DEFAULT = np.array([0.0, 0.0, -9.81])

_SMALL_THETA = 0.05


@dataclass(frozen=True)
class NoiseSpec:
    """Continuous white-noise intensities of the IMU error model.

    ``sigma_g``/``sigma_a`` drive the gyro and accelerometer white noise,
    ``sigma_bg``/``sigma_ba`` the corresponding bias random walks.  All are
    isotropic, in SI units per sqrt(s).
    """

    sigma_g: float
    sigma_bg: float
    sigma_a: float
    sigma_ba: float

    def __post_init__(self) -> None:
        for name in ("sigma_g", "sigma_bg", "sigma_a", "sigma_ba"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")

    def density_matrix(self) -> np.ndarray:
        """12x12 diagonal spectral density of [eps_g, eps_bg, eps_a, eps_ba]."""
        d = np.concatenate(
            [
                np.full(3, self.sigma_g**2),
                np.full(3, self.sigma_bg**2),
                np.full(3, self.sigma_a**2),
                np.full(3, self.sigma_ba**2),
            ]
        )
        return np.diag(d)


@dataclass(frozen=True)
class ImuSample:
    """One timestamped IMU reading: gyro (rad/s) and accelerometer (m/s^2)."""

    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))
        if not (np.isfinite(self.t) and np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.accel))):
            raise ValueError("IMU sample has non-finite values")


@dataclass(frozen=True)
class ModelConstants:
    """Run-wide physical constants (currently just gravity, inertial frame)."""

    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_DEFAULT.copy())

    def __post_init__(self) -> None:
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))


@dataclass
class FilterState:
    """Full estimate: pose, velocity, IMU biases and the landmark map.

    ``anchors`` are landmarks whose inertial position was fixed by the
    first observation and are not estimated; ``landmarks`` are estimated
    and occupy the error-state tail in insertion order.
    """

    q: np.ndarray
    r: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    anchors: Dict[Any, np.ndarray] = field(default_factory=dict)
    landmarks: Dict[Any, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.r = np.asarray(self.r, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.bg = np.asarray(self.bg, dtype=float)
        self.ba = np.asarray(self.ba, dtype=float)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    @property
    def dim(self) -> int:
        """Error-state dimension, 15 + 3n."""
        return 15 + 3 * len(self.landmarks)

    def landmark_ids(self) -> list:
        return list(self.landmarks.keys())

    def landmark_slice(self, lm_id: Any) -> slice:
        """Error-state column range of an estimated landmark."""
        idx = list(self.landmarks.keys()).index(lm_id)
        return slice(15 + 3 * idx, 18 + 3 * idx)

    def position_of(self, lm_id: Any) -> np.ndarray:
        if lm_id in self.anchors:
            return self.anchors[lm_id]
        return self.landmarks[lm_id]

    def copy(self) -> "FilterState":
        return FilterState(
            q=self.q.copy(),
            r=self.r.copy(),
            v=self.v.copy(),
            bg=self.bg.copy(),
            ba=self.ba.copy(),
            anchors={k: p.copy() for k, p in self.anchors.items()},
            landmarks={k: p.copy() for k, p in self.landmarks.items()},
        )


@dataclass(frozen=True)
class DiscreteModel:
    """One-step transition ``Phi`` and process-noise covariance ``Q`` over ``dt``."""

    Phi: np.ndarray
    Q: np.ndarray
    dt: float


# ---------------------------------------------------------------------------
# SO(3) transition integrals
#
# _gamma(m, phi) = sum_k [phi x]^k / (k + m)!  for a rotation vector phi,
# evaluated in closed form.  gamma0 is the Rodrigues exponential; gamma1..3
# are its successive time integrals (with phi = -omega * t, the attitude
# error transition is gamma0 and its integrals scale as t^m * gamma_m).
# ---------------------------------------------------------------------------


def _gamma_coeffs(theta: float, m: int) -> tuple[float, float, float]:
    """Scalar coefficients (c0, c1, c2) so that gamma_m = c0 I + c1 [phi x] + c2 [phi x]^2."""
    t2 = theta * theta
    if theta < _SMALL_THETA:
        # Series to theta^4.  The trig forms of the higher integrals lose
        # precision to cancellation for small theta; the series stays below
        # ~1e-11 absolute error up to the switch point.
        if m == 0:
            return 1.0, 1.0 - t2 / 6.0 * (1.0 - t2 / 20.0), 0.5 - t2 / 24.0 * (1.0 - t2 / 30.0)
        if m == 1:
            return 1.0, 0.5 - t2 / 24.0 * (1.0 - t2 / 30.0), 1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0)
        if m == 2:
            return 0.5, 1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0), 1.0 / 24.0 - t2 / 720.0 * (1.0 - t2 / 56.0)
        if m == 3:
            return 1.0 / 6.0, 1.0 / 24.0 - t2 / 720.0 * (1.0 - t2 / 56.0), 1.0 / 120.0 - t2 / 5040.0 * (1.0 - t2 / 72.0)
    s, c = np.sin(theta), np.cos(theta)
    if m == 0:
        return 1.0, s / theta, (1.0 - c) / t2
    if m == 1:
        return 1.0, (1.0 - c) / t2, (theta - s) / (t2 * theta)
    if m == 2:
        return 0.5, (theta - s) / (t2 * theta), (c - 1.0 + 0.5 * t2) / (t2 * t2)
    if m == 3:
        return 1.0 / 6.0, (c - 1.0 + 0.5 * t2) / (t2 * t2), (s - theta + theta * t2 / 6.0) / (t2 * t2 * theta)
    raise ValueError(f"unsupported gamma order {m}")


def _gamma(m: int, phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    c0, c1, c2 = _gamma_coeffs(theta, m)
    px = skew(phi)
    return c0 * np.eye(3) + c1 * px + c2 * (px @ px)


# Gauss-Legendre rule on [0, 1]; exact to machine precision for the
# process-noise integrands at filter step sizes.
_QUAD_NODES, _QUAD_WEIGHTS = np.polynomial.legendre.leggauss(6)
_QUAD_NODES = 0.5 * (_QUAD_NODES + 1.0)
_QUAD_WEIGHTS = 0.5 * _QUAD_WEIGHTS


# ---------------------------------------------------------------------------
# Continuous linearized dynamics
# ---------------------------------------------------------------------------


def continuous_jacobians(
    q_nom: np.ndarray, omega_nom: np.ndarray, a_nom: np.ndarray, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Error-state dynamics matrices (F, G) at a nominal operating point.

    ``omega_nom``/``a_nom`` are the nominal body rate and specific-force
    (bias-compensated IMU averages); ``n`` is the number of estimated
    landmarks, whose rows and columns of F are identically zero.
    """
    omega_nom = np.asarray(omega_nom, dtype=float)
    a_nom = np.asarray(a_nom, dtype=float)
    A = rotation_matrix(q_nom)
    d = 15 + 3 * n

    F = np.zeros((d, d))
    F[0:3, 0:3] = -skew(omega_nom)
    F[0:3, 9:12] = 0.5 * np.eye(3)
    F[3:6, 6:9] = np.eye(3)
    F[6:9, 0:3] = -2.0 * A @ skew(a_nom)
    F[6:9, 12:15] = A

    G = np.zeros((d, 12))
    G[0:3, 0:3] = 0.5 * np.eye(3)
    G[6:9, 6:9] = A
    G[9:12, 3:6] = np.eye(3)
    G[12:15, 9:12] = np.eye(3)
    return F, G


def nominal_imu(
    samples: Sequence[ImuSample], bg_hat: np.ndarray, ba_hat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bias-compensated nominal rate and specific force over one filter window.

    The window mean is a trapezoidal time-weighted average of the samples
    (a single sample is returned as-is).  The bias estimates are added
    back per the sensor model, giving the nominal physical quantities.
    """
    if len(samples) == 0:
        raise ValueError("IMU window is empty")
    bg_hat = np.asarray(bg_hat, dtype=float)
    ba_hat = np.asarray(ba_hat, dtype=float)
    if len(samples) == 1:
        return bg_hat + samples[0].gyro, ba_hat + samples[0].accel
    t = np.array([s.t for s in samples])
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("IMU sample timestamps must be strictly increasing")
    gyro = np.stack([s.gyro for s in samples])
    accel = np.stack([s.accel for s in samples])
    span = t[-1] - t[0]
    w_mean = np.trapz(gyro, t, axis=0) / span
    a_mean = np.trapz(accel, t, axis=0) / span
    return bg_hat + w_mean, ba_hat + a_mean


# ---------------------------------------------------------------------------
# Exact discretization
# ---------------------------------------------------------------------------


def _core_transition(omega_bar: np.ndarray, a_bar: np.ndarray, A_nom: np.ndarray, dt: float) -> np.ndarray:
    """Closed-form exp(F dt) of the 15-dim core error state."""
    phi = -np.asarray(omega_bar, dtype=float) * dt
    theta = float(np.linalg.norm(phi))
    px = skew(phi)
    px2 = px @ px
    I3 = np.eye(3)

    def gm(m: int) -> np.ndarray:
        c0, c1, c2 = _gamma_coeffs(theta, m)
        return c0 * I3 + c1 * px + c2 * px2

    g0 = gm(0)
    g1 = dt * gm(1)          # integral of g0
    g2 = dt * dt * gm(2)     # double integral
    g3 = dt**3 * gm(3)       # triple integral
    Aax = A_nom @ skew(a_bar)

    P = np.eye(15)
    P[0:3, 0:3] = g0
    P[0:3, 9:12] = 0.5 * g1
    P[3:6, 0:3] = -2.0 * Aax @ g2
    P[3:6, 6:9] = dt * I3
    P[3:6, 9:12] = -Aax @ g3
    P[3:6, 12:15] = 0.5 * dt * dt * A_nom
    P[6:9, 0:3] = -2.0 * Aax @ g1
    P[6:9, 9:12] = -Aax @ g2
    P[6:9, 12:15] = dt * A_nom
    return P


def state_transition(
    omega_bar: np.ndarray, a_bar: np.ndarray, A_nom: np.ndarray, dt: float, n: int
) -> np.ndarray:
    """Exact one-step transition of the error state, landmark block identity.

    The 15x15 core block is the closed-form matrix exponential of the
    continuous dynamics held constant over ``dt``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    d = 15 + 3 * n
    Phi = np.eye(d)
    Phi[:15, :15] = _core_transition(omega_bar, a_bar, A_nom, dt)
    return Phi


def _core_noise_vanloan(
    omega_bar: np.ndarray, a_bar: np.ndarray, A_nom: np.ndarray, dt: float, noise: NoiseSpec
) -> np.ndarray:
    """Exact 15x15 process-noise covariance via the Van Loan augmented exponential."""
    F = np.zeros((15, 15))
    F[0:3, 0:3] = -skew(omega_bar)
    F[0:3, 9:12] = 0.5 * np.eye(3)
    F[3:6, 6:9] = np.eye(3)
    F[6:9, 0:3] = -2.0 * A_nom @ skew(a_bar)
    F[6:9, 12:15] = A_nom

    G = np.zeros((15, 12))
    G[0:3, 0:3] = 0.5 * np.eye(3)
    G[6:9, 6:9] = A_nom
    G[9:12, 3:6] = np.eye(3)
    G[12:15, 9:12] = np.eye(3)

    GSG = G @ noise.density_matrix() @ G.T
    C = np.zeros((30, 30))
    C[:15, :15] = -F
    C[:15, 15:] = GSG
    C[15:, 15:] = F.T
    E = expm(C * dt)
    Q = E[15:, 15:].T @ E[:15, 15:]
    return 0.5 * (Q + Q.T)


def _core_noise_quadrature(
    omega_bar: np.ndarray, a_bar: np.ndarray, A_nom: np.ndarray, dt: float, noise: NoiseSpec
) -> np.ndarray:
    """Same integral as the Van Loan construction, evaluated by fixed-order
    Gauss-Legendre quadrature of the closed-form transition; the integrand
    is a low-degree trig polynomial at filter step sizes, so the rule is
    exact to round-off.  This is the filter's throughput path; tests pin
    its agreement with the Van Loan reference.
    """
    omega_bar = np.asarray(omega_bar, dtype=float)
    tau = _QUAD_NODES * dt
    wts = _QUAD_WEIGHTS * dt
    wn = float(np.linalg.norm(omega_bar))
    thetas = wn * tau

    # gamma coefficients per node (series/trig branch chosen per node)
    coeff = np.empty((4, 3, tau.size))
    for j, th in enumerate(thetas):
        for m in range(4):
            coeff[m, :, j] = _gamma_coeffs(float(th), m)

    px = skew(-omega_bar)  # [phi x] / tau
    px2 = px @ px
    I3 = np.eye(3)
    T = tau[:, None, None]

    def gm_batch(m: int) -> np.ndarray:
        c0 = coeff[m, 0][:, None, None]
        c1 = (coeff[m, 1] * tau)[:, None, None]       # phi = -omega * tau
        c2 = (coeff[m, 2] * tau * tau)[:, None, None]
        return c0 * I3 + c1 * px + c2 * px2

    G0 = gm_batch(0)
    G1 = gm_batch(1)
    G2 = gm_batch(2)
    G3 = gm_batch(3)
    B = A_nom @ skew(a_bar)

    L = np.zeros((tau.size, 15, 12))
    L[:, 0:3, 0:3] = 0.5 * G0
    L[:, 0:3, 3:6] = 0.5 * T * G1
    L[:, 3:6, 0:3] = -np.matmul(B, T * T * G2)
    L[:, 3:6, 3:6] = -np.matmul(B, T * T * T * G3)
    L[:, 3:6, 6:9] = T * A_nom
    L[:, 3:6, 9:12] = 0.5 * T * T * A_nom
    L[:, 6:9, 0:3] = -np.matmul(B, T * G1)
    L[:, 6:9, 3:6] = -np.matmul(B, T * T * G2)
    L[:, 6:9, 6:9] = A_nom
    L[:, 6:9, 9:12] = T * A_nom
    L[:, 9:12, 3:6] = I3
    L[:, 12:15, 9:12] = I3

    dens = np.repeat(
        [noise.sigma_g**2, noise.sigma_bg**2, noise.sigma_a**2, noise.sigma_ba**2], 3
    )
    Lw = L * np.sqrt(dens)[None, None, :] * np.sqrt(wts)[:, None, None]
    Q = np.tensordot(Lw, Lw, axes=([0, 2], [0, 2]))
    return 0.5 * (Q + Q.T)


def process_noise(
    omega_bar: np.ndarray,
    a_bar: np.ndarray,
    A_nom: np.ndarray,
    dt: float,
    noise: NoiseSpec,
    n: int,
    method: str = "vanloan",
) -> np.ndarray:
    """Discrete process-noise covariance, exact for piecewise-constant dynamics.

    Landmark rows and columns are exactly zero; the core block is the
    integral of the propagated noise density, computed either by the Van
    Loan augmented exponential (reference) or by quadrature of the
    closed-form transition (equal to round-off, faster).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    d = 15 + 3 * n
    Q = np.zeros((d, d))
    if method == "vanloan":
        Q[:15, :15] = _core_noise_vanloan(omega_bar, a_bar, A_nom, dt, noise)
    elif method == "quadrature":
        Q[:15, :15] = _core_noise_quadrature(omega_bar, a_bar, A_nom, dt, noise)
    else:
        raise ValueError(f"unknown process-noise method {method!r}")
    return Q


# ---------------------------------------------------------------------------
# Legacy truncated closed forms (cross-check / --paper-mode only)
# ---------------------------------------------------------------------------


def legacy_state_transition(
    omega_bar: np.ndarray, a_bar: np.ndarray, A_nom: np.ndarray, dt: float, n: int
) -> np.ndarray:
    """Truncated transition that ignores every bias-to-position coupling.

    Kept verbatim for comparison runs: the position row has no
    self-coupling (its diagonal block is zero), attitude feeds velocity
    only, and the accelerometer-bias and landmark blocks are identity.
    Not used by the default filter.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    phi = -np.asarray(omega_bar, dtype=float) * dt
    g1 = dt * _gamma(1, phi)
    g2 = dt * dt * _gamma(2, phi)
    Aax = A_nom @ skew(a_bar)

    d = 15 + 3 * n
    Phi = np.zeros((d, d))
    Phi[0:3, 0:3] = _gamma(0, phi)
    Phi[0:3, 9:12] = 0.5 * g1
    Phi[3:6, 6:9] = dt * np.eye(3)
    Phi[6:9, 0:3] = -Aax @ g1
    Phi[6:9, 9:12] = 0.5 * g2
    Phi[9:12, 9:12] = np.eye(3)
    Phi[12:15, 12:15] = np.eye(3)
    for k in range(n):
        Phi[15 + 3 * k : 18 + 3 * k, 15 + 3 * k : 18 + 3 * k] = np.eye(3)
    return Phi


def legacy_process_noise(
    omega_bar: np.ndarray,
    a_bar: np.ndarray,
    A_nom: np.ndarray,
    dt: float,
    noise: NoiseSpec,
    n: int,
) -> np.ndarray:
    """Closed-form noise covariance truncated to third order in |omega| dt.

    Matches the exact integral of the truncated transition model to the
    truncation order; see tests for the quadrature cross-check.  The
    velocity variance keeps its accelerometer white-noise floor and the
    velocity-position cross term so the assembled matrix stays usable.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    sg2 = noise.sigma_g**2
    sbg2 = noise.sigma_bg**2
    sa2 = noise.sigma_a**2
    sba2 = noise.sigma_ba**2
    wx = skew(omega_bar)
    wx2 = wx @ wx
    I3 = np.eye(3)
    Aa = A_nom @ np.asarray(a_bar, dtype=float)
    Aax = skew(Aa)          # [A a x]
    Awx = skew(A_nom @ np.asarray(omega_bar, dtype=float))
    t = dt

    q_att = (sg2 / 4.0 * t + sbg2 / 12.0 * t**3) * I3 + sbg2 / 240.0 * t**5 * wx2
    q_pos = sa2 / 3.0 * t**3 * I3
    M = Aax @ Awx
    q_vel = (
        sa2 * t * I3
        + sbg2 / 80.0 * t**5 * I3
        - sg2 / 12.0 * t**3 * (Aax @ Aax)
        + sbg2 / 2016.0 * t**7 * wx2
        - sg2 / 240.0 * t**5 * (M @ M.T)
    )
    q_vel_att = (
        sbg2 * (t**4 / 32.0 * I3 + t**5 / 240.0 * wx + t**6 / 576.0 * wx2)
        - sg2 * A_nom @ skew(a_bar) @ (t**2 / 8.0 * I3 + t**3 / 24.0 * wx + t**4 / 96.0 * wx2)
    )
    q_vel_pos = sa2 / 2.0 * t**2 * I3
    q_bg_att = sbg2 * (t**2 / 4.0 * I3 + t**3 / 12.0 * wx + t**4 / 48.0 * wx2)
    q_bg_vel = sbg2 * (t**3 / 12.0 * I3 + t**4 / 48.0 * wx + t**5 / 240.0 * wx2)

    d = 15 + 3 * n
    Q = np.zeros((d, d))
    Q[0:3, 0:3] = q_att
    Q[3:6, 3:6] = q_pos
    Q[6:9, 6:9] = q_vel
    Q[6:9, 0:3] = q_vel_att
    Q[0:3, 6:9] = q_vel_att.T
    Q[6:9, 3:6] = q_vel_pos
    Q[3:6, 6:9] = q_vel_pos.T
    Q[9:12, 0:3] = q_bg_att
    Q[0:3, 9:12] = q_bg_att.T
    Q[9:12, 6:9] = q_bg_vel
    Q[6:9, 9:12] = q_bg_vel.T
    Q[9:12, 9:12] = sbg2 * t * I3
    Q[12:15, 12:15] = sba2 * t * I3
    return Q


def discretize(
    omega_bar: np.ndarray,
    a_bar: np.ndarray,
    A_nom: np.ndarray,
    dt: float,
    noise: NoiseSpec,
    n: int,
    legacy: bool = False,
    q_method: str = "vanloan",
) -> DiscreteModel:
    """Bundle transition and noise covariance for one filter step."""
    if legacy:
        Phi = legacy_state_transition(omega_bar, a_bar, A_nom, dt, n)
        Q = legacy_process_noise(omega_bar, a_bar, A_nom, dt, noise, n)
    else:
        Phi = state_transition(omega_bar, a_bar, A_nom, dt, n)
        Q = process_noise(omega_bar, a_bar, A_nom, dt, noise, n, method=q_method)
    return DiscreteModel(Phi=Phi, Q=Q, dt=dt)


# ---------------------------------------------------------------------------
# Nonlinear propagation
# ---------------------------------------------------------------------------


def propagate_nonlinear(
    state: FilterState,
    samples: Sequence[ImuSample],
    constants: ModelConstants,
    dt: float,
) -> FilterState:
    """Propagate the nominal state through one IMU window with zero noise.

    Attitude integrates the averaged body rate exactly; velocity and
    position use a midpoint rule (specific force rotated at the half-step
    attitude).  Biases and landmarks are constant.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    omega_bar, a_bar = nominal_imu(samples, state.bg, state.ba)

    q_mid = quat_propagate(state.q, omega_bar, 0.5 * dt)
    acc = rotation_matrix(q_mid) @ a_bar - constants.gravity

    out = state.copy()
    out.q = quat_propagate(state.q, omega_bar, dt)
    out.v = state.v + acc * dt
    out.r = state.r + state.v * dt + 0.5 * acc * dt * dt
    return out
