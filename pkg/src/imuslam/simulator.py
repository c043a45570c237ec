"""Synthetic ground truth and sensor streams for closed-loop filter runs.

Trajectories are analytic (hover, circle, or a clamped cubic spline
through via-points) with attitude from smooth Euler-angle profiles, so
body rates and inertial accelerations come from derivatives of the
curve, never from numerical differencing.  IMU samples carry the window
average of the continuous signals (integrating-sensor semantics) plus
discretely sampled noise scaled so the stream statistics match the
filter's continuous noise densities: white noise std ``sigma / sqrt(dt)``
per sample, bias random-walk increments ``sigma_b * sqrt(dt)`` between
windows.

Everything is a pure function of ``(config, seed)``; two builds of the
same scenario are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .model import GRAVITY_DEFAULT, ImuSample, NoiseSpec
from .observation import LandmarkObservation

__all__ = [
    "LandmarkSpec",
    "ScenarioConfig",
    "TruthSample",
    "Trajectory",
    "Scenario",
    "build_trajectory",
    "generate_trajectory",
    "synthesize_imu",
    "synthesize_observations",
    "build_scenario",
]

# Gauss-Legendre nodes/weights on [0, 1]; window averages of the smooth
# truth signals are exact to machine precision at the rates used here.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True)
class LandmarkSpec:
    """Catalog entry: inertial position plus whether it anchors the map.

    ``sigma_p`` pins this landmark's measurement noise; when None it is
    drawn once per scenario from the configured range.
    """

    id: Any
    position: np.ndarray
    anchor: bool = False
    sigma_p: Optional[float] = None
    visible_from_s: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if self.sigma_p is not None and self.sigma_p <= 0.0:
            raise ValueError("sigma_p must be positive when given")
        if self.anchor and self.visible_from_s > 0.0:
            raise ValueError("anchors must be visible from the first epoch")


@dataclass
class ScenarioConfig:
    """Everything that determines a simulated run, independent of the filter."""

    trajectory: dict
    landmarks: List[LandmarkSpec]
    noise: NoiseSpec
    imu_rate_hz: float = 20.0
    obs_rate_hz: float = 20.0
    bias_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_p_range: Tuple[float, float] = (0.1, 0.25)
    max_range_m: Optional[float] = None
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_DEFAULT.copy())
    seed: int = 0
    duration_s: float = 120.0

    def __post_init__(self) -> None:
        self.bias_g = np.asarray(self.bias_g, dtype=float)
        self.bias_a = np.asarray(self.bias_a, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.imu_rate_hz <= 0.0 or self.obs_rate_hz <= 0.0:
            raise ValueError("sensor rates must be positive")
        if self.duration_s <= 0.0:
            raise ValueError("duration must be positive")
        lo, hi = self.sigma_p_range
        if lo <= 0.0 or hi < lo:
            raise ValueError("sigma_p_range must satisfy 0 < lo <= hi")
        ids = [lm.id for lm in self.landmarks]
        if len(ids) != len(set(ids)):
            raise ValueError("landmark ids must be unique")

    @property
    def anchor_ids(self) -> list:
        return [lm.id for lm in self.landmarks if lm.anchor]


@dataclass(frozen=True)
class TruthSample:
    """Ground-truth kinematic state at one instant."""

    t: float
    q: np.ndarray
    r: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    accel_inertial: np.ndarray


# ---------------------------------------------------------------------------
# Vectorized quaternion helpers (arrays of shape (N, 4), [x, y, z, w])
# ---------------------------------------------------------------------------


def _qmul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    av, aw = a[..., :3], a[..., 3:4]
    bv, bw = b[..., :3], b[..., 3:4]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., :3] = aw * bv + bw * av - np.cross(av, bv)
    out[..., 3] = (aw * bw)[..., 0] - np.sum(av * bv, axis=-1)
    return out


def _rotmat_batch(q: np.ndarray) -> np.ndarray:
    v, w = q[..., :3], q[..., 3]
    N = q.shape[0]
    Vx = np.zeros((N, 3, 3))
    Vx[:, 0, 1] = -v[:, 2]
    Vx[:, 0, 2] = v[:, 1]
    Vx[:, 1, 0] = v[:, 2]
    Vx[:, 1, 2] = -v[:, 0]
    Vx[:, 2, 0] = -v[:, 1]
    Vx[:, 2, 1] = v[:, 0]
    outer = np.einsum("ni,nj->nij", v, v)
    eye = np.broadcast_to(np.eye(3), (N, 3, 3))
    return (
        (2.0 * w * w - 1.0)[:, None, None] * eye
        + 2.0 * w[:, None, None] * Vx
        + 2.0 * outer
    )


# ---------------------------------------------------------------------------
# Trajectory construction
# ---------------------------------------------------------------------------


class _PositionCurve:
    def position(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def acceleration(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _Hover(_PositionCurve):
    def __init__(self, position: np.ndarray):
        self._r = np.asarray(position, dtype=float)

    def position(self, t):
        return np.broadcast_to(self._r, (len(t), 3)).copy()

    def velocity(self, t):
        return np.zeros((len(t), 3))

    def acceleration(self, t):
        return np.zeros((len(t), 3))


class _Circle(_PositionCurve):
    def __init__(self, center, radius: float, rate: float, phase: float = 0.0):
        self._c = np.asarray(center, dtype=float)
        self._R = float(radius)
        self._w = float(rate)
        self._p = float(phase)

    def position(self, t):
        a = self._w * t + self._p
        out = np.empty((len(t), 3))
        out[:, 0] = self._c[0] + self._R * np.cos(a)
        out[:, 1] = self._c[1] + self._R * np.sin(a)
        out[:, 2] = self._c[2]
        return out

    def velocity(self, t):
        a = self._w * t + self._p
        out = np.empty((len(t), 3))
        out[:, 0] = -self._R * self._w * np.sin(a)
        out[:, 1] = self._R * self._w * np.cos(a)
        out[:, 2] = 0.0
        return out

    def acceleration(self, t):
        a = self._w * t + self._p
        w2R = self._R * self._w**2
        out = np.empty((len(t), 3))
        out[:, 0] = -w2R * np.cos(a)
        out[:, 1] = -w2R * np.sin(a)
        out[:, 2] = 0.0
        return out


class _WaypointSpline(_PositionCurve):
    """C2 cubic through via-points, clamped to zero velocity at both ends."""

    def __init__(self, points: np.ndarray, times: np.ndarray):
        points = np.asarray(points, dtype=float)
        times = np.asarray(times, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 2:
            raise ValueError("waypoint mode needs at least 2 via-points of dimension 3")
        if len(times) != len(points) or np.any(np.diff(times) <= 0.0):
            raise ValueError("via-point times must be strictly increasing, one per point")
        self._spline = CubicSpline(times, points, axis=0, bc_type="clamped")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)

    def position(self, t):
        return self._spline(t)

    def velocity(self, t):
        return self._d1(t)

    def acceleration(self, t):
        return self._d2(t)


class _EulerProfile:
    """Smooth roll/pitch/yaw sinusoids with analytic rates, zero at t = 0.

    An optional constant yaw rate superimposes a steady heading sweep;
    sustained rotation decorrelates body-frame sensor biases from
    inertial-frame disturbances, which is what makes the accelerometer
    bias cleanly observable in closed loop.
    """

    def __init__(
        self,
        amplitudes_rad: Sequence[float],
        frequencies_hz: Sequence[float],
        yaw_rate: float = 0.0,
    ):
        self._amp = np.asarray(amplitudes_rad, dtype=float)
        self._w = 2.0 * np.pi * np.asarray(frequencies_hz, dtype=float)
        self._yaw_rate = float(yaw_rate)
        if self._amp.shape != (3,) or self._w.shape != (3,):
            raise ValueError("attitude profile needs 3 amplitudes and 3 frequencies")

    def angles(self, t: np.ndarray) -> np.ndarray:
        out = self._amp * np.sin(np.outer(t, self._w))
        out[:, 2] += self._yaw_rate * t
        return out

    def rates(self, t: np.ndarray) -> np.ndarray:
        out = self._amp * self._w * np.cos(np.outer(t, self._w))
        out[:, 2] += self._yaw_rate
        return out


class Trajectory:
    """Analytic ground-truth curve: pose, velocity, body rate at any time."""

    def __init__(self, curve: _PositionCurve, profile: _EulerProfile):
        self._curve = curve
        self._profile = profile

    def position(self, t: np.ndarray) -> np.ndarray:
        return self._curve.position(np.atleast_1d(np.asarray(t, dtype=float)))

    def velocity(self, t: np.ndarray) -> np.ndarray:
        return self._curve.velocity(np.atleast_1d(np.asarray(t, dtype=float)))

    def acceleration(self, t: np.ndarray) -> np.ndarray:
        return self._curve.acceleration(np.atleast_1d(np.asarray(t, dtype=float)))

    def quaternion(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        roll, pitch, yaw = self._profile.angles(t).T
        half = 0.5
        qx = np.zeros((len(t), 4))
        qx[:, 0] = np.sin(half * roll)
        qx[:, 3] = np.cos(half * roll)
        qy = np.zeros((len(t), 4))
        qy[:, 1] = np.sin(half * pitch)
        qy[:, 3] = np.cos(half * pitch)
        qz = np.zeros((len(t), 4))
        qz[:, 2] = np.sin(half * yaw)
        qz[:, 3] = np.cos(half * yaw)
        # A(q) = Rz(yaw) Ry(pitch) Rx(roll) under the package convention.
        return _qmul_batch(qx, _qmul_batch(qy, qz))

    def omega_body(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        roll, pitch, _ = self._profile.angles(t).T
        droll, dpitch, dyaw = self._profile.rates(t).T
        sr, cr = np.sin(roll), np.cos(roll)
        sp, cp = np.sin(pitch), np.cos(pitch)
        out = np.empty((len(t), 3))
        out[:, 0] = droll - dyaw * sp
        out[:, 1] = dpitch * cr + dyaw * cp * sr
        out[:, 2] = dyaw * cp * cr - dpitch * sr
        return out

    def rotation_matrices(self, t: np.ndarray) -> np.ndarray:
        return _rotmat_batch(self.quaternion(t))

    def sample(self, t: float) -> TruthSample:
        ta = np.array([float(t)])
        return TruthSample(
            t=float(t),
            q=self.quaternion(ta)[0],
            r=self.position(ta)[0],
            v=self.velocity(ta)[0],
            omega=self.omega_body(ta)[0],
            accel_inertial=self.acceleration(ta)[0],
        )


def build_trajectory(config: ScenarioConfig) -> Trajectory:
    """Construct the analytic trajectory described by ``config.trajectory``."""
    spec = config.trajectory
    kind = spec.get("kind", "hover")
    att = spec.get("attitude", {})
    att_kind = att.get("kind", "fixed")
    if att_kind == "fixed":
        profile = _EulerProfile([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    elif att_kind == "euler_sine":
        amps = np.deg2rad(att["amplitudes_deg"])
        profile = _EulerProfile(
            amps,
            att["frequencies_hz"],
            yaw_rate=np.deg2rad(att.get("yaw_rate_dps", 0.0)),
        )
    else:
        raise ValueError(f"unknown attitude profile kind {att_kind!r}")

    if kind == "hover":
        curve: _PositionCurve = _Hover(spec.get("position", [0.0, 0.0, 0.0]))
    elif kind == "circle":
        curve = _Circle(
            spec.get("center", [0.0, 0.0, 0.0]),
            spec["radius"],
            spec["rate"],
            spec.get("phase", 0.0),
        )
    elif kind == "waypoints":
        curve = _WaypointSpline(np.asarray(spec["points"]), np.asarray(spec["times"]))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return Trajectory(curve, profile)


def generate_trajectory(config: ScenarioConfig, rate_hz: Optional[float] = None) -> List[TruthSample]:
    """Sample the ground truth at a fixed rate (defaults to the IMU rate)."""
    traj = build_trajectory(config)
    rate = rate_hz if rate_hz is not None else config.imu_rate_hz
    n = int(round(config.duration_s * rate))
    times = np.arange(n + 1) / rate
    q = traj.quaternion(times)
    r = traj.position(times)
    v = traj.velocity(times)
    w = traj.omega_body(times)
    a = traj.acceleration(times)
    return [
        TruthSample(t=float(times[k]), q=q[k], r=r[k], v=v[k], omega=w[k], accel_inertial=a[k])
        for k in range(n + 1)
    ]


# ---------------------------------------------------------------------------
# Sensor synthesis
# ---------------------------------------------------------------------------


def _window_averages(
    traj: Trajectory, gravity: np.ndarray, n_steps: int, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Exact window means of body rate and specific force for every IMU epoch."""
    starts = np.arange(n_steps) * dt
    nodes = (starts[:, None] + _GL_NODES[None, :] * dt).ravel()
    omega = traj.omega_body(nodes)
    A = _rotmat_batch(traj.quaternion(nodes))
    acc = traj.acceleration(nodes) + gravity
    force_body = np.einsum("nji,nj->ni", A, acc)

    w = _GL_WEIGHTS
    omega_avg = np.einsum("nkj,k->nj", omega.reshape(n_steps, 5, 3), w)
    force_avg = np.einsum("nkj,k->nj", force_body.reshape(n_steps, 5, 3), w)
    return omega_avg, force_avg


def _bias_walk(rng: np.random.Generator, b0: np.ndarray, sigma: float, dt: float, n: int) -> np.ndarray:
    """Piecewise-constant bias history over n windows, walking between windows."""
    steps = sigma * np.sqrt(dt) * rng.standard_normal((n, 3))
    out = np.empty((n, 3))
    out[0] = b0
    if n > 1:
        out[1:] = b0 + np.cumsum(steps[:-1], axis=0)
    return out


def synthesize_imu(
    traj: Trajectory, config: ScenarioConfig, rng: np.random.Generator
) -> tuple[List[ImuSample], np.ndarray, np.ndarray]:
    """IMU stream over the run plus the true bias histories.

    Sample k (timestamped at the window end) carries the window average
    of the continuous signals with the sensor model inverted:
    ``gyro = omega - b_g - eps_g`` and ``accel = A^T (r_ddot + g) - b_a - eps_a``.
    Returns (samples, bias_g_history, bias_a_history), histories per window.
    """
    dt = 1.0 / config.imu_rate_hz
    n = int(round(config.duration_s * config.imu_rate_hz))
    omega_avg, force_avg = _window_averages(traj, config.gravity, n, dt)

    bg = _bias_walk(rng, config.bias_g, config.noise.sigma_bg, dt, n)
    ba = _bias_walk(rng, config.bias_a, config.noise.sigma_ba, dt, n)
    eps_g = (config.noise.sigma_g / np.sqrt(dt)) * rng.standard_normal((n, 3))
    eps_a = (config.noise.sigma_a / np.sqrt(dt)) * rng.standard_normal((n, 3))

    gyro = omega_avg - bg - eps_g
    accel = force_avg - ba - eps_a
    samples = [
        ImuSample(t=(k + 1) * dt, gyro=gyro[k], accel=accel[k]) for k in range(n)
    ]
    return samples, bg, ba


def synthesize_observations(
    traj: Trajectory,
    config: ScenarioConfig,
    rng: np.random.Generator,
    sigma_p: Dict[Any, float],
    visibility: Optional[Callable[[float], Sequence[Any]]] = None,
) -> List[LandmarkObservation]:
    """Landmark observation stream at the sensor rate (epoch 0 included).

    Each entry is the body-frame landmark position plus isotropic
    Gaussian noise with the landmark's own sigma.  ``visibility`` may
    restrict the id set per epoch; the default sees everything.
    """
    n_epochs = int(round(config.duration_s * config.obs_rate_hz)) + 1
    dt = 1.0 / config.obs_rate_hz
    times = np.arange(n_epochs) * dt
    A = _rotmat_batch(traj.quaternion(times))
    r = traj.position(times)

    out = []
    for k in range(n_epochs):
        t = float(times[k])
        if visibility is not None:
            ids = set(visibility(t))
        else:
            ids = {lm.id for lm in config.landmarks if t >= lm.visible_from_s - 1e-12}
        entries = {}
        for lm in config.landmarks:
            if lm.id not in ids:
                continue
            z = A[k].T @ (lm.position - r[k])
            if config.max_range_m is not None and np.linalg.norm(z) > config.max_range_m:
                continue
            z = z + sigma_p[lm.id] * rng.standard_normal(3)
            entries[lm.id] = z
        out.append(LandmarkObservation(t=t, entries=entries))
    return out


# ---------------------------------------------------------------------------
# Scenario bundle
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """One fully synthesized run: truth, sensor streams and their true statistics."""

    config: ScenarioConfig
    trajectory: Trajectory
    imu: List[ImuSample]
    observations: List[LandmarkObservation]
    sigma_p: Dict[Any, float]
    bias_g_history: np.ndarray
    bias_a_history: np.ndarray

    def true_measurement_covariance(self, ids: Sequence[Any]) -> np.ndarray:
        blocks = np.repeat([self.sigma_p[i] ** 2 for i in ids], 3)
        return np.diag(blocks)

    def obs_stride(self) -> int:
        return int(round(self.config.imu_rate_hz / self.config.obs_rate_hz))


def build_scenario(
    config: ScenarioConfig,
    visibility: Optional[Callable[[float], Sequence[Any]]] = None,
) -> Scenario:
    """Deterministically synthesize all streams for ``(config, config.seed)``.

    Draw order is fixed (per-landmark sigmas, bias walks, IMU noise,
    observation noise) so identical configs are bit-identical.
    """
    stride = config.imu_rate_hz / config.obs_rate_hz
    if abs(stride - round(stride)) > 1e-9 or stride < 1.0 - 1e-9:
        raise ValueError("imu_rate_hz must be an integer multiple of obs_rate_hz")
    rng = np.random.default_rng(config.seed)
    traj = build_trajectory(config)
    lo, hi = config.sigma_p_range
    # One draw per landmark regardless of overrides keeps the stream
    # layout identical across configs that differ only in pinned sigmas.
    drawn = {lm.id: float(rng.uniform(lo, hi)) for lm in config.landmarks}
    sigma_p = {
        lm.id: (lm.sigma_p if lm.sigma_p is not None else drawn[lm.id])
        for lm in config.landmarks
    }
    imu, bg_hist, ba_hist = synthesize_imu(traj, config, rng)
    obs = synthesize_observations(traj, config, rng, sigma_p, visibility)
    return Scenario(
        config=config,
        trajectory=traj,
        imu=imu,
        observations=obs,
        sigma_p=sigma_p,
        bias_g_history=bg_hist,
        bias_a_history=ba_hist,
    )
