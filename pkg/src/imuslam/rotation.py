"""Quaternion and rotation-matrix algebra.

Conventions used throughout the package:

* A quaternion is a length-4 ndarray ``[qx, qy, qz, qw]`` (vector part
  first, scalar part last) and is kept unit-norm.
* ``A(q)`` is the direction-cosine matrix of the body frame with respect
  to the inertial frame, so an inertial vector ``u`` maps to the body
  frame as ``A(q).T @ u``.
* Products compose so that ``A(quat_product(q1, q2)) == A(q1) @ A(q2)``.
* Body angular rate ``omega`` drives the attitude as a rotation about
  the body-frame axis ``omega / |omega|``.

All functions are pure and allocate their results; inputs are never
mutated.  These run inside the filter loop, so validation is kept to a
single finiteness test per input.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "IDENTITY_QUATERNION",
    "skew",
    "quat_conjugate",
    "quat_normalize",
    "quat_product",
    "rotation_matrix",
    "small_angle_matrix",
    "quat_propagate",
    "error_quat",
    "orientation_error",
]

IDENTITY_QUATERNION = np.array([0.0, 0.0, 0.0, 1.0])

# Below this rotation angle (rad) trig coefficient ratios switch to their
# Taylor series to avoid 0/0.
_SMALL_ANGLE = 1e-6


def _as_quat(q, name: str = "quaternion") -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"{name} must be a length-4 array, got shape {q.shape}")
    s = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
    if not s < np.inf:  # catches NaN and inf in one comparison
        raise ValueError(f"{name} has non-finite components: {q}")
    return q


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v x]`` such that ``skew(v) @ u == np.cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    """Conjugate: vector part negated, scalar part kept."""
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = _as_quat(q)
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / n


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw product a (x) b, no normalization."""
    a0, a1, a2, a3 = a
    b0, b1, b2, b3 = b
    return np.array(
        [
            a3 * b0 + b3 * a0 - (a1 * b2 - a2 * b1),
            a3 * b1 + b3 * a1 - (a2 * b0 - a0 * b2),
            a3 * b2 + b3 * a2 - (a0 * b1 - a1 * b0),
            a3 * b3 - (a0 * b0 + a1 * b1 + a2 * b2),
        ]
    )


def quat_product(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Compose rotations: returns ``q2 (x) q1`` so that ``A(result) == A(q1) @ A(q2)``.

    Both inputs must be unit quaternions; the result is renormalized.
    """
    q1 = _as_quat(q1, "q1")
    q2 = _as_quat(q2, "q2")
    out = _quat_mul(q2, q1)
    return out / np.sqrt(out @ out)


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Direction-cosine matrix A(q) of the body frame w.r.t. the inertial frame."""
    q = _as_quat(q)
    x, y, z, w = q
    d = 2.0 * w * w - 1.0
    return np.array(
        [
            [d + 2.0 * x * x, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), d + 2.0 * y * y, 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), d + 2.0 * z * z],
        ]
    )


def small_angle_matrix(dqv: np.ndarray) -> np.ndarray:
    """First-order rotation matrix ``I + 2 [dqv x]`` for a small error quaternion.

    Only valid for ``|dqv| < 0.5``; beyond that the linearization is
    meaningless and a ValueError is raised.
    """
    dqv = np.asarray(dqv, dtype=float)
    if not np.all(np.isfinite(dqv)):
        raise ValueError("dqv has non-finite components")
    if np.linalg.norm(dqv) >= 0.5:
        raise ValueError("small-angle matrix requested for |dqv| >= 0.5")
    x, y, z = dqv
    return np.array(
        [[1.0, -2.0 * z, 2.0 * y], [2.0 * z, 1.0, -2.0 * x], [-2.0 * y, 2.0 * x, 1.0]]
    )


def quat_propagate(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Rotate ``q`` by the constant body rate ``omega`` held for ``dt`` seconds.

    Closed-form solution of ``dq/dt = 0.5 * [omega; 0] (x) q``: a rotation
    of angle ``|omega| * dt`` about ``omega / |omega|``.  Falls back to a
    Taylor expansion of the trig coefficients for tiny angles, and is
    exactly norm-preserving (result renormalized).
    """
    q = _as_quat(q)
    w0, w1, w2 = float(omega[0]), float(omega[1]), float(omega[2])
    s = w0 * w0 + w1 * w1 + w2 * w2
    if not s < np.inf:
        raise ValueError("omega has non-finite components")
    if dt < 0.0:
        raise ValueError("dt must be non-negative")

    wn = np.sqrt(s)
    half = 0.5 * wn * dt
    if wn * dt < _SMALL_ANGLE:
        # cos(half) and sin(half)/wn to 4th order; removes the 1/wn singularity.
        c = 1.0 - 0.5 * half * half
        s_over_w = 0.5 * dt * (1.0 - half * half / 6.0)
    else:
        c = np.cos(half)
        s_over_w = np.sin(half) / wn
    delta = np.array([s_over_w * w0, s_over_w * w1, s_over_w * w2, c])
    out = _quat_mul(delta, q)
    return out / np.sqrt(out @ out)


def error_quat(q: np.ndarray, q_nom: np.ndarray) -> np.ndarray:
    """Multiplicative error ``dq = q (x) q_nom*`` with scalar part canonicalized >= 0."""
    q = _as_quat(q, "q")
    q_nom = _as_quat(q_nom, "q_nom")
    dq = _quat_mul(q, quat_conjugate(q_nom))
    if dq[3] < 0.0:
        dq = -dq
    return dq / np.sqrt(dq @ dq)


def orientation_error(q_hat: np.ndarray, q_ref: np.ndarray) -> float:
    """Rotation angle (rad) between two attitudes: ``2 asin |vec(q_hat* (x) q_ref)|``.

    Symmetric in its arguments and invariant under a sign flip of either
    (quaternion double cover).  Returns a value in ``[0, pi]``.
    """
    q_hat = _as_quat(q_hat, "q_hat")
    q_ref = _as_quat(q_ref, "q_ref")
    d = _quat_mul(quat_conjugate(q_hat), q_ref)
    s = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / np.sqrt(d @ d)
    return 2.0 * float(np.arcsin(min(s, 1.0)))
