"""Landmark observation model: predictions and error-state sensitivity.

A landmark at inertial position ``rho`` is seen in the body frame as
``p = A(q).T @ (rho - r)``.  One epoch stacks the body-frame positions of
the observed landmarks, anchors first, then estimated landmarks in state
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Sequence

import numpy as np

from .model import FilterState
from .rotation import rotation_matrix, skew

__all__ = [
    "LandmarkObservation",
    "MissingLandmarkError",
    "canonical_ids",
    "predict_observations",
    "observation_jacobian",
    "block_covariance",
]


class MissingLandmarkError(KeyError):
    """An observed landmark id is neither an anchor nor an estimated landmark."""


@dataclass(frozen=True)
class LandmarkObservation:
    """One epoch of landmark measurements: body-frame positions keyed by id."""

    t: float
    entries: Dict[Any, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean = {}
        for lm_id, z in self.entries.items():
            z = np.asarray(z, dtype=float)
            if z.shape != (3,) or not np.all(np.isfinite(z)):
                raise ValueError(f"observation of landmark {lm_id!r} is not a finite 3-vector")
            clean[lm_id] = z
        object.__setattr__(self, "entries", clean)

    def ids(self) -> list:
        return list(self.entries.keys())

    def stacked(self, ids: Sequence[Any]) -> np.ndarray:
        return np.concatenate([self.entries[i] for i in ids])


def canonical_ids(state: FilterState, ids: Sequence[Any]) -> list:
    """Sort observed ids into measurement order: anchors first, then map order."""
    anchor_part = [i for i in state.anchors if i in ids]
    map_part = [i for i in state.landmarks if i in ids]
    known = set(anchor_part) | set(map_part)
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise MissingLandmarkError(f"landmark ids not in the filter map: {unknown}")
    return anchor_part + map_part


def predict_observations(state: FilterState, ids: Sequence[Any]) -> np.ndarray:
    """Stacked body-frame landmark predictions, rows ordered as ``ids``."""
    At = rotation_matrix(state.q).T
    out = np.empty(3 * len(ids))
    for k, lm_id in enumerate(ids):
        if lm_id in state.anchors:
            rho = state.anchors[lm_id]
        elif lm_id in state.landmarks:
            rho = state.landmarks[lm_id]
        else:
            raise MissingLandmarkError(f"unknown landmark id {lm_id!r}")
        out[3 * k : 3 * k + 3] = At @ (rho - state.r)
    return out


def observation_jacobian(state: FilterState, ids: Sequence[Any]) -> np.ndarray:
    """Sensitivity of the stacked observation w.r.t. the error state.

    Row block for landmark i is ``[2 [p_i x], -A.T, 0, 0, 0, ...]`` where
    ``p_i = A.T (rho_i - r)`` is the body-frame prediction, with ``+A.T``
    in the landmark's own columns when it is estimated (anchors contribute
    no landmark columns).
    """
    At = rotation_matrix(state.q).T
    d = state.dim
    lm_index = {lm_id: k for k, lm_id in enumerate(state.landmarks)}
    H = np.zeros((3 * len(ids), d))
    for k, lm_id in enumerate(ids):
        if lm_id in state.anchors:
            rho = state.anchors[lm_id]
            lm_col = None
        elif lm_id in lm_index:
            rho = state.landmarks[lm_id]
            lm_col = 15 + 3 * lm_index[lm_id]
        else:
            raise MissingLandmarkError(f"unknown landmark id {lm_id!r}")
        p_hat = At @ (rho - state.r)
        rows = slice(3 * k, 3 * k + 3)
        H[rows, 0:3] = 2.0 * skew(p_hat)
        H[rows, 3:6] = -At
        if lm_col is not None:
            H[rows, lm_col : lm_col + 3] = At
    return H


def block_covariance(sigmas: Sequence[float]) -> np.ndarray:
    """Isotropic per-landmark measurement covariance, stacked block-diagonal."""
    m = len(sigmas)
    R = np.zeros((3 * m, 3 * m))
    for k, s in enumerate(sigmas):
        R[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = (s * s) * np.eye(3)
    return R
