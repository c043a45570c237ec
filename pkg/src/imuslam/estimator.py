"""Adaptive error-state Kalman filter over the IMU/landmark model.

The filter estimates only the deviation from a nominal trajectory; the
attitude deviation is the vector part of a small quaternion that is
recombined multiplicatively with the nominal quaternion after every
update.  Measurement noise is re-estimated online from a sliding window
of innovation outer products.

Module-level functions implement the individual filter operations on
explicit ``(state, P)`` pairs; :class:`SlamFilter` wires them into the
per-epoch cycle and keeps the run-level diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (
    DiscreteModel,
    FilterState,
    ImuSample,
    ModelConstants,
    NoiseSpec,
    discretize,
    nominal_imu,
    propagate_nonlinear,
)
from .observation import (
    LandmarkObservation,
    block_covariance,
    canonical_ids,
    observation_jacobian,
    predict_observations,
)
from .rotation import (
    error_quat,
    orientation_error,
    quat_product,
    rotation_matrix,
    skew,
)

__all__ = [
    "SingularInnovationError",
    "DuplicateLandmarkError",
    "ResidualWindow",
    "kalman_gain",
    "innovate",
    "predict",
    "initialize",
    "augment_landmark",
    "adapt_noise",
    "SlamFilter",
    "StepDiagnostics",
]


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance is not positive definite even after regularization."""


class DuplicateLandmarkError(ValueError):
    """Attempt to augment a landmark id that is already in the map."""


# ---------------------------------------------------------------------------
# Residual window for measurement-noise adaptation
# ---------------------------------------------------------------------------


class ResidualWindow:
    """Sliding window of innovation vectors with a running outer-product sum.

    The windowed mean ``W = (1/w) sum rho_i rho_i^T`` over the last ``w``
    residuals is maintained recursively (add the newest outer product,
    drop the oldest); the recursion is algebraically identical to the
    batch average, which tests verify to 1e-10.  The window is keyed to a
    fixed visible-landmark layout and must be reset whenever the layout
    changes.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = int(capacity)
        self.layout_key: Optional[tuple] = None
        self._buf: Optional[np.ndarray] = None
        self._sum: Optional[np.ndarray] = None
        self._count = 0
        self._head = 0

    @property
    def count(self) -> int:
        return min(self._count, self.capacity)

    @property
    def full(self) -> bool:
        return self._count >= self.capacity

    def reset(self, layout_key: tuple, dim: int) -> None:
        self.layout_key = layout_key
        self._buf = np.zeros((self.capacity, dim))
        self._sum = np.zeros((dim, dim))
        self._count = 0
        self._head = 0

    def push(self, residual: np.ndarray) -> None:
        if self._buf is None:
            raise RuntimeError("window not initialized; call reset() first")
        residual = np.asarray(residual, dtype=float)
        old = self._buf[self._head]
        if self._count >= self.capacity:
            self._sum -= np.outer(old, old)
        self._sum += np.outer(residual, residual)
        self._buf[self._head] = residual
        self._head = (self._head + 1) % self.capacity
        self._count += 1

    def mean_outer(self) -> np.ndarray:
        """Recursively maintained ``(1/w) sum rho rho^T`` over the stored residuals."""
        if self._sum is None:
            raise RuntimeError("window not initialized")
        return self._sum / self.capacity

    def batch_mean_outer(self) -> np.ndarray:
        """Recomputed from the raw buffer; oracle for the recursive estimate."""
        if self._buf is None:
            raise RuntimeError("window not initialized")
        k = self.count
        rows = self._buf[:k] if self._count <= self.capacity else self._buf
        return (rows.T @ rows) / self.capacity


# ---------------------------------------------------------------------------
# Filter operations
# ---------------------------------------------------------------------------


_TINY = np.finfo(float).tiny


def _spd_solve(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve S X = B for symmetric positive-definite S with jitter escalation."""
    S = 0.5 * (S + S.T)
    try:
        c = cho_factor(S, lower=True, check_finite=False)
        return cho_solve(c, B, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(S) / S.shape[0], _TINY)
    jitter = 1e-12 * scale
    for _ in range(4):
        try:
            c = cho_factor(S + jitter * np.eye(S.shape[0]), lower=True, check_finite=False)
            return cho_solve(c, B, check_finite=False)
        except np.linalg.LinAlgError:
            jitter *= 100.0
    raise SingularInnovationError("innovation covariance not positive definite")


def kalman_gain(P_minus: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Gain ``K = P- H^T (H P- H^T + R)^{-1}`` via a Cholesky solve."""
    PHt = P_minus @ H.T
    S = H @ PHt + R
    return _spd_solve(S, PHt.T).T


@dataclass
class InnovationInfo:
    """Bookkeeping from one measurement update."""

    residual: np.ndarray
    correction_norm: float
    delta_clamped: bool


def innovate(
    state: FilterState,
    P_minus: np.ndarray,
    q_bar: np.ndarray,
    z: np.ndarray,
    h_pred: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
) -> tuple[FilterState, np.ndarray, InnovationInfo]:
    """Measurement update with multiplicative quaternion recombination.

    The a-priori attitude deviation is taken against the nominal
    quaternion ``q_bar``; after the linear update the deviation vector is
    recombined with scalar ``sqrt(1 - |dqv|^2)`` and multiplied onto
    ``q_bar``.  All other states update additively.  The covariance uses
    the Joseph form and is symmetrized.

    A deviation that reaches unit norm is scaled back to just inside the
    sphere and flagged; diagnostics must surface it, the update does not
    abort.
    """
    residual = z - h_pred
    K = kalman_gain(P_minus, H, R)
    dx = K @ residual

    dqv = error_quat(state.q, q_bar)[:3] + dx[0:3]
    clamped = False
    nrm = np.linalg.norm(dqv)
    if nrm >= 1.0:
        dqv *= (1.0 - 1e-9) / nrm
        clamped = True
    dq = np.empty(4)
    dq[:3] = dqv
    dq[3] = np.sqrt(max(1.0 - dqv @ dqv, 0.0))

    out = state.copy()
    out.q = quat_product(q_bar, dq)
    out.r = state.r + dx[3:6]
    out.v = state.v + dx[6:9]
    out.bg = state.bg + dx[9:12]
    out.ba = state.ba + dx[12:15]
    for k, lm_id in enumerate(state.landmarks):
        out.landmarks[lm_id] = state.landmarks[lm_id] + dx[15 + 3 * k : 18 + 3 * k]

    IKH = np.eye(P_minus.shape[0]) - K @ H
    P = IKH @ P_minus @ IKH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    info = InnovationInfo(residual=residual, correction_norm=float(np.linalg.norm(dx)), delta_clamped=clamped)
    return out, P, info


def predict(
    state: FilterState,
    P: np.ndarray,
    model: DiscreteModel,
    samples: Sequence[ImuSample],
    constants: ModelConstants,
) -> tuple[FilterState, np.ndarray, np.ndarray]:
    """Time update: nonlinear state propagation and block-structured covariance push.

    Only the 15-dim core of ``Phi`` is non-identity, so the landmark
    block of ``P`` is untouched and the cross block is a single product.
    Returns the propagated state, covariance and the next nominal
    quaternion (the propagated attitude itself).
    """
    state_minus = propagate_nonlinear(state, samples, constants, model.dt)
    core = model.Phi[:15, :15]
    P_min = P.copy()
    P11 = core @ P[:15, :15] @ core.T + model.Q[:15, :15]
    P_min[:15, :15] = 0.5 * (P11 + P11.T)
    if P.shape[0] > 15:
        P12 = core @ P[:15, 15:]
        P_min[:15, 15:] = P12
        P_min[15:, :15] = P12.T
    return state_minus, P_min, state_minus.q.copy()


def initialize(
    first_obs: LandmarkObservation,
    anchor_ids: Sequence[Any],
    R0: Union[float, Dict[Any, np.ndarray]],
) -> tuple[FilterState, np.ndarray]:
    """Start the filter from the first observation epoch.

    The body frame is taken coincident with the inertial frame, so pose,
    velocity and biases start at zero with zero covariance.  Observed
    anchors are fixed at their measured positions; every other observed
    landmark enters the estimated map at its measurement with covariance
    taken from ``R0`` (a per-id 3x3 block map, or a scalar sigma applied
    isotropically).
    """
    if len(first_obs.entries) == 0:
        raise ValueError("cannot initialize from an empty observation")
    missing = [a for a in anchor_ids if a not in first_obs.entries]
    if missing:
        raise ValueError(f"anchor ids not present in the first observation: {missing}")
    if len(anchor_ids) < 1:
        raise ValueError("at least one anchor id is required")

    anchors = {a: first_obs.entries[a].copy() for a in anchor_ids}
    landmarks = {
        i: z.copy() for i, z in first_obs.entries.items() if i not in anchors
    }
    state = FilterState(
        q=np.array([0.0, 0.0, 0.0, 1.0]),
        r=np.zeros(3),
        v=np.zeros(3),
        bg=np.zeros(3),
        ba=np.zeros(3),
        anchors=anchors,
        landmarks=landmarks,
    )
    P = np.zeros((state.dim, state.dim))
    for k, lm_id in enumerate(landmarks):
        blk = slice(15 + 3 * k, 18 + 3 * k)
        if isinstance(R0, dict):
            P[blk, blk] = np.asarray(R0[lm_id], dtype=float)
        else:
            P[blk, blk] = (float(R0) ** 2) * np.eye(3)
    return state, P


def augment_landmark(
    state: FilterState,
    P: np.ndarray,
    q_bar: np.ndarray,
    new_id: Any,
    z_new: np.ndarray,
    R_new: np.ndarray,
) -> tuple[FilterState, np.ndarray]:
    """Append a newly observed landmark to the state and covariance.

    Position from the observation inverse kinematics,
    ``rho = A(q_bar) z + r``; the new covariance row is the first-order
    propagation ``J P`` with ``J = [-2 A [z x], I, 0]`` and corner
    ``A R_new A^T + J P J^T``, which keeps the joint matrix PSD.
    """
    if new_id in state.anchors or new_id in state.landmarks:
        raise DuplicateLandmarkError(f"landmark {new_id!r} already in the map")
    z_new = np.asarray(z_new, dtype=float)
    A = rotation_matrix(q_bar)
    d = state.dim

    J = np.zeros((3, d))
    J[:, 0:3] = -2.0 * A @ skew(z_new)
    J[:, 3:6] = np.eye(3)
    row = J @ P
    corner = A @ np.asarray(R_new, dtype=float) @ A.T + row @ J.T

    out = state.copy()
    out.landmarks[new_id] = A @ z_new + state.r

    P_out = np.zeros((d + 3, d + 3))
    P_out[:d, :d] = P
    P_out[d:, :d] = row
    P_out[:d, d:] = row.T
    P_out[d:, d:] = 0.5 * (corner + corner.T)
    return out, P_out


def adapt_noise(
    window: ResidualWindow,
    H: np.ndarray,
    P_minus: np.ndarray,
    R_prior: np.ndarray,
    eig_floor: float = 1e-6,
) -> np.ndarray:
    """Windowed estimate of the measurement covariance.

    ``R = W - H P- H^T`` with ``W`` the windowed residual outer-product
    mean; the difference can be indefinite at finite window length, so it
    is projected to the nearest PSD matrix with eigenvalues clamped at
    ``eig_floor``.  An under-filled window returns the prior unchanged.
    """
    if not window.full:
        return R_prior
    W = window.mean_outer()
    R = W - H @ P_minus @ H.T
    R = 0.5 * (R + R.T)
    try:
        # Fast path: eigenvalues already at or above the floor.
        np.linalg.cholesky(R - eig_floor * np.eye(R.shape[0]))
        return R
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(R)
        return (vecs * np.maximum(vals, eig_floor)) @ vecs.T


# ---------------------------------------------------------------------------
# Per-epoch orchestration
# ---------------------------------------------------------------------------


@dataclass
class StepDiagnostics:
    """Per-epoch filter telemetry."""

    t: float
    updated: bool
    n_landmarks: int
    trace_P: float
    residual_norm: float = np.nan
    innovation_dim: int = 0
    delta_clamped: bool = False
    augmented_ids: tuple = ()
    position_error: float = np.nan
    attitude_error: float = np.nan


@dataclass
class HygieneStats:
    """Run-level numerical health, updated every step (eigenvalues sampled)."""

    max_quat_norm_dev: float = 0.0
    max_P_asymmetry: float = 0.0
    min_P_eigenvalue: float = np.inf
    clamped_epochs: int = 0


class SlamFilter:
    """Single-writer filter instance: one predict/update cycle per IMU epoch.

    Instances share nothing; a Monte Carlo harness may run many in
    parallel.  Measurement noise starts from the configured prior and is
    replaced by the windowed estimate from the next epoch onward once the
    residual window fills.
    """

    def __init__(
        self,
        state: FilterState,
        P: np.ndarray,
        noise: NoiseSpec,
        constants: ModelConstants,
        r_prior_sigma: float,
        window_len: int = 100,
        adapt_r: bool = True,
        r_eig_floor: float = 1e-6,
        r_prior_per_id: Optional[Dict[Any, float]] = None,
        legacy_discretization: bool = False,
        eig_check_interval: int = 25,
    ):
        self.state = state
        self.P = P
        self.q_bar = state.q.copy()
        self.noise = noise
        self.constants = constants
        self.r_prior_sigma = float(r_prior_sigma)
        self.r_prior_per_id = dict(r_prior_per_id) if r_prior_per_id else None
        self.adapt_r = adapt_r
        self.r_eig_floor = r_eig_floor
        self.legacy = legacy_discretization
        self.window = ResidualWindow(window_len)
        self.R_hat: Optional[np.ndarray] = None
        self.hygiene = HygieneStats()
        self._eig_interval = max(int(eig_check_interval), 1)
        self._step_count = 0
        self.t = 0.0

    # -- helpers -----------------------------------------------------------

    def _sigma_for(self, lm_id: Any) -> float:
        if self.r_prior_per_id is not None and lm_id in self.r_prior_per_id:
            return self.r_prior_per_id[lm_id]
        return self.r_prior_sigma

    def _prior_R(self, ids: list) -> np.ndarray:
        return block_covariance([self._sigma_for(i) for i in ids])

    def _current_R(self, ids: list) -> np.ndarray:
        key = tuple(ids)
        if self.window.layout_key != key:
            self.window.reset(key, 3 * len(ids))
            self.R_hat = None
        if self.R_hat is not None:
            return self.R_hat
        return self._prior_R(ids)

    def _track_hygiene(self) -> None:
        q = self.state.q
        dev = abs(np.sqrt(q @ q) - 1.0)
        asym = float(np.max(np.abs(self.P - self.P.T)))
        h = self.hygiene
        h.max_quat_norm_dev = max(h.max_quat_norm_dev, dev)
        h.max_P_asymmetry = max(h.max_P_asymmetry, asym)
        if self._step_count % self._eig_interval == 0:
            w = np.linalg.eigvalsh(0.5 * (self.P + self.P.T))
            h.min_P_eigenvalue = min(h.min_P_eigenvalue, float(w[0]))

    # -- main cycle ---------------------------------------------------------

    def step(
        self,
        samples: Sequence[ImuSample],
        dt: float,
        obs: Optional[LandmarkObservation] = None,
        reference: Optional[tuple] = None,
    ) -> StepDiagnostics:
        """One filter epoch: always predict, update/adapt/augment when observed.

        ``reference`` may carry a ``(q_true, r_true)`` pair for error
        diagnostics; it never feeds back into the estimate.
        """
        omega_bar, a_bar = nominal_imu(samples, self.state.bg, self.state.ba)
        A_nom = rotation_matrix(self.state.q)
        model = discretize(
            omega_bar, a_bar, A_nom, dt, self.noise, self.state.n_landmarks, legacy=self.legacy
        )
        self.state, self.P, self.q_bar = predict(
            self.state, self.P, model, samples, self.constants
        )
        self.t += dt
        self._step_count += 1

        diag = StepDiagnostics(
            t=self.t,
            updated=False,
            n_landmarks=self.state.n_landmarks,
            trace_P=float(np.trace(self.P)),
        )

        if obs is not None:
            known = [i for i in obs.ids() if i in self.state.anchors or i in self.state.landmarks]
            new = [i for i in obs.ids() if i not in self.state.anchors and i not in self.state.landmarks]
            if known:
                ids = canonical_ids(self.state, known)
                z = obs.stacked(ids)
                h_pred = predict_observations(self.state, ids)
                H = observation_jacobian(self.state, ids)
                R = self._current_R(ids)
                P_minus = self.P
                self.state, self.P, info = innovate(
                    self.state, P_minus, self.q_bar, z, h_pred, H, R
                )
                self.window.push(info.residual)
                if self.adapt_r and self.window.full:
                    self.R_hat = adapt_noise(
                        self.window, H, P_minus, self._prior_R(ids), self.r_eig_floor
                    )
                diag.updated = True
                diag.residual_norm = float(np.linalg.norm(info.residual))
                diag.innovation_dim = len(info.residual)
                diag.delta_clamped = info.delta_clamped
                if info.delta_clamped:
                    self.hygiene.clamped_epochs += 1
            for lm_id in new:
                self.state, self.P = augment_landmark(
                    self.state,
                    self.P,
                    self.state.q,
                    lm_id,
                    obs.entries[lm_id],
                    (self._sigma_for(lm_id) ** 2) * np.eye(3),
                )
            if new:
                # Layout will change next epoch; drop the stale window now.
                self.window.layout_key = None
                self.R_hat = None
            diag.augmented_ids = tuple(new)
            diag.n_landmarks = self.state.n_landmarks
            diag.trace_P = float(np.trace(self.P))

        if reference is not None:
            q_true, r_true = reference
            diag.attitude_error = orientation_error(self.state.q, q_true)
            diag.position_error = float(np.linalg.norm(self.state.r - r_true))

        self._track_hygiene()
        return diag
