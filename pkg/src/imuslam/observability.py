"""Observability analysis of the linearized error-state system.

The filter dynamics are treated as piecewise constant: each segment
contributes a pair ``(F, H)`` and an observability matrix stacked from
``H``, ``H F``, ``H F^2``, ...  Full rank (``3n + 15``) means every error
state is recoverable from the landmark outputs over that segment.

For three anchor landmarks the rank condition reduces to a geometric one:
the matrix built from the two normalized anchor baselines,
``Pi = [e1 x]^2 + [e2 x]^2``, is full rank exactly when the anchors are
not collinear.  ``mro_reduction_check`` reproduces the block-triangular
reduction behind that equivalence by literal row operations and verifies
the resulting diagonal blocks numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .rotation import skew

__all__ = [
    "DegenerateGeometryError",
    "SegmentModel",
    "ObservabilityReport",
    "PiReport",
    "StrippedReport",
    "build_observability",
    "rank_test",
    "pi_condition",
    "stripped_observability",
    "mro_reduction_check",
]

DEFAULT_RANK_KAPPA = 100.0


class DegenerateGeometryError(ValueError):
    """Anchor geometry does not admit the requested construction."""


@dataclass(frozen=True)
class SegmentModel:
    """Constant linearization of one time segment: dynamics F, observation H."""

    F: np.ndarray
    H: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        F = np.asarray(self.F, dtype=float)
        H = np.asarray(self.H, dtype=float)
        if F.shape[0] != F.shape[1] or H.shape[1] != F.shape[0]:
            raise ValueError(
                f"inconsistent segment dimensions: F {F.shape}, H {H.shape}"
            )
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "H", H)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def n_landmarks(self) -> int:
        return (self.dim - 15) // 3


@dataclass
class ObservabilityReport:
    """Numeric rank verdict with the full spectrum for auditability."""

    rank: int
    required: int
    singular_values: np.ndarray
    observable: bool
    threshold: float
    kappa: float

    def to_dict(self) -> dict:
        return {
            "rank": int(self.rank),
            "required": int(self.required),
            "observable": bool(self.observable),
            "threshold": float(self.threshold),
            "kappa": float(self.kappa),
            "singular_values": [float(s) for s in self.singular_values],
        }


@dataclass
class PiReport:
    """Geometric full-rank test on the anchor-baseline matrix."""

    Pi: np.ndarray
    full_rank: bool
    det: float
    cross_norm: float
    tol: float

    def to_dict(self) -> dict:
        return {
            "full_rank": bool(self.full_rank),
            "det": float(self.det),
            "baseline_cross_norm": float(self.cross_norm),
            "tol": float(self.tol),
        }


@dataclass
class StrippedReport:
    """Joint rank over several segments plus the per-segment surrogate check."""

    segments: List[ObservabilityReport]
    stacked: ObservabilityReport
    null_inclusion: List[bool]
    valid_surrogate: bool

    def to_dict(self) -> dict:
        return {
            "segments": [s.to_dict() for s in self.segments],
            "stacked": self.stacked.to_dict(),
            "null_inclusion": [bool(b) for b in self.null_inclusion],
            "valid_surrogate": bool(self.valid_surrogate),
        }


def _numeric_rank(sv: np.ndarray, shape: tuple, kappa: float) -> tuple[int, float]:
    if sv.size == 0 or sv[0] == 0.0:
        return 0, 0.0
    thr = sv[0] * max(shape) * np.finfo(float).eps * kappa
    return int(np.sum(sv > thr)), float(thr)


def _stack_blocks(seg: SegmentModel, order: int, balance: bool) -> np.ndarray:
    blocks = []
    B = seg.H.copy()
    for _ in range(order):
        blk = B
        if balance:
            nrm = np.linalg.norm(blk)
            if nrm > 0.0:
                blk = blk / nrm
        blocks.append(blk)
        B = B @ seg.F
    return np.vstack(blocks)


def build_observability(
    seg: SegmentModel, order: Optional[int] = None, balance: bool = True
) -> np.ndarray:
    """Stack ``[H; H F; H F^2; ...]`` for one segment.

    ``order`` is the number of stacked blocks; the definition uses
    ``3n + 15`` of them, but the numeric rank saturates much earlier, so
    by default blocks are added only until the rank is unchanged for
    three consecutive powers (capped at the definition).  Each block is
    normalized by its Frobenius norm when ``balance`` is set, which keeps
    mixed units from skewing the spectrum; scaling rows never changes the
    rank.
    """
    full_order = seg.dim
    if order is not None:
        if order < 1:
            raise ValueError("order must be >= 1")
        return _stack_blocks(seg, order, balance)

    blocks = []
    B = seg.H.copy()
    prev_rank = -1
    stable = 0
    for _ in range(full_order):
        blk = B
        if balance:
            nrm = np.linalg.norm(blk)
            if nrm > 0.0:
                blk = blk / nrm
        blocks.append(blk)
        O = np.vstack(blocks)
        sv = np.linalg.svd(O, compute_uv=False)
        rank, _ = _numeric_rank(sv, O.shape, DEFAULT_RANK_KAPPA)
        if rank == prev_rank:
            stable += 1
            if stable >= 3:
                break
        else:
            stable = 0
            prev_rank = rank
        B = B @ seg.F
    return np.vstack(blocks)


def rank_test(
    O: np.ndarray, n: int, kappa: float = DEFAULT_RANK_KAPPA
) -> ObservabilityReport:
    """SVD rank of an observability matrix against the ``3n + 15`` requirement."""
    sv = np.linalg.svd(np.asarray(O, dtype=float), compute_uv=False)
    rank, thr = _numeric_rank(sv, O.shape, kappa)
    required = 3 * n + 15
    return ObservabilityReport(
        rank=rank,
        required=required,
        singular_values=sv,
        observable=(rank == required),
        threshold=thr,
        kappa=kappa,
    )


def pi_condition(
    p1: np.ndarray, p2: np.ndarray, p3: np.ndarray, tol: float = 1e-9
) -> PiReport:
    """Anchor-alignment test: ``Pi`` is full rank iff the three points span a plane.

    ``p1, p2, p3`` are the anchor positions in the vehicle frame; the
    baselines are normalized before building ``Pi``, so the verdict is
    scale-free.  Reports both ``|det Pi|`` and ``|e1 x e2|`` so borderline
    geometry is auditable.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    d1 = p1 - p3
    d2 = p2 - p3
    n1 = np.linalg.norm(d1)
    n2 = np.linalg.norm(d2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise DegenerateGeometryError("anchor points coincide; baselines undefined")
    e1 = d1 / n1
    e2 = d2 / n2
    E1 = skew(e1)
    E2 = skew(e2)
    Pi = E1 @ E1 + E2 @ E2
    det = float(np.linalg.det(Pi))
    cross = float(np.linalg.norm(np.cross(e1, e2)))
    return PiReport(
        Pi=Pi,
        full_rank=(abs(det) > tol and cross > tol),
        det=det,
        cross_norm=cross,
        tol=tol,
    )


def stripped_observability(
    segs: Sequence[SegmentModel], kappa: float = DEFAULT_RANK_KAPPA
) -> StrippedReport:
    """Stack per-segment observability matrices and test the joint rank.

    The stacked matrix is a valid stand-in for the total observability
    matrix when every segment's null space is contained in the null space
    of its dynamics; that inclusion is evaluated per segment from SVD
    null bases (trivially satisfied for full-rank segments).
    """
    if len(segs) == 0:
        raise ValueError("at least one segment is required")
    dim = segs[0].dim
    for s in segs:
        if s.dim != dim:
            raise ValueError("all segments must share the state dimension")
    n = segs[0].n_landmarks

    seg_reports: List[ObservabilityReport] = []
    inclusion: List[bool] = []
    mats = []
    for s in segs:
        O = build_observability(s)
        rep = rank_test(O, n, kappa)
        seg_reports.append(rep)
        mats.append(O)

        if rep.rank == dim:
            inclusion.append(True)
            continue
        _, sv, Vt = np.linalg.svd(O)
        null_basis = Vt[rep.rank :].T
        F_scale = np.linalg.norm(s.F, 2)
        resid = np.linalg.norm(s.F @ null_basis, 2)
        inclusion.append(resid <= max(F_scale, 1.0) * 1e-9)

    stacked = np.vstack(mats)
    stacked_rep = rank_test(stacked, n, kappa)
    return StrippedReport(
        segments=seg_reports,
        stacked=stacked_rep,
        null_inclusion=inclusion,
        valid_surrogate=all(inclusion),
    )


# ---------------------------------------------------------------------------
# Literal row-operation reduction for the three-anchor case
# ---------------------------------------------------------------------------


def _unskew(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def mro_reduction_check(seg: SegmentModel, tol: float = 1e-9) -> bool:
    """Execute the three-anchor row reduction and verify its block structure.

    The reduction combines rows of ``H``, ``H F`` and ``H F^2`` (anchor
    rows first) into a block-triangular matrix whose diagonal blocks are
    ``{2 Pi, -A^T, -A^T, Pi, -I, A^T, ...}``; the sign of the
    accelerometer-bias block follows from the row products rather than
    the published summary.  Returns True when the diagonals match, the
    upper triangle vanishes and the reduction preserved the stacked rank.
    Collinear anchors make the reduction inapplicable and raise
    :class:`DegenerateGeometryError`.
    """
    H = seg.H
    F = seg.F
    m = H.shape[0] // 3
    n = seg.n_landmarks
    r = m - n
    if r != 3:
        raise ValueError(f"reduction requires exactly 3 anchors, inferred {r}")

    # Geometry recovered from the H blocks themselves.
    p_hat = [_unskew(H[3 * i : 3 * i + 3, 0:3]) / 2.0 for i in range(3)]
    At = -H[0:3, 3:6]
    d1 = p_hat[0] - p_hat[2]
    d2 = p_hat[1] - p_hat[2]
    n1, n2 = np.linalg.norm(d1), np.linalg.norm(d2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise DegenerateGeometryError("anchor projections coincide")
    e1, e2 = d1 / n1, d2 / n2
    if np.linalg.norm(np.cross(e1, e2)) < 1e-6:
        raise DegenerateGeometryError("collinear anchors: reduction inapplicable")
    E1 = skew(e1)
    E2 = skew(e2)
    Pi = E1 @ E1 + E2 @ E2

    HF = H @ F
    HF2 = HF @ F

    def blk(M: np.ndarray, i: int) -> np.ndarray:
        return M[3 * i : 3 * i + 3]

    # Anchor-difference rows, then the baseline-weighted recombination.
    row_pi2 = (E1 / n1) @ (blk(H, 0) - blk(H, 2)) + (E2 / n2) @ (blk(H, 1) - blk(H, 2))
    row_h1 = blk(H, 0)
    row_pi = (E1 / n1) @ (blk(HF, 0) - blk(HF, 2)) + (E2 / n2) @ (blk(HF, 1) - blk(HF, 2))
    row_hf1 = blk(HF, 0) - skew(p_hat[0]) @ np.linalg.solve(Pi, row_pi)
    row_hf2_1 = blk(HF2, 0)
    lm_rows = [blk(H, 3 + k) for k in range(n)]

    reduced = np.vstack([row_pi2, row_h1, row_hf1, row_pi, row_hf2_1] + lm_rows)

    scale = max(1.0, float(np.max(np.abs(reduced))))
    atol = tol * scale

    expected_diag = [2.0 * Pi, -At, -At, Pi, -np.eye(3)] + [At] * n
    for b, want in enumerate(expected_diag):
        got = reduced[3 * b : 3 * b + 3, 3 * b : 3 * b + 3]
        if not np.allclose(got, want, atol=atol):
            return False
        upper = reduced[3 * b : 3 * b + 3, 3 * b + 3 :]
        if upper.size and np.max(np.abs(upper)) > atol:
            return False

    stack = np.vstack([H, HF, HF2])
    rank_before = rank_test(stack, n).rank
    rank_after = rank_test(reduced, n).rank
    return rank_after == rank_before == reduced.shape[0]
