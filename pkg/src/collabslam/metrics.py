"""Trajectory and map accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose


class InsufficientPosesError(ValueError):
    """Trajectory alignment needs at least 3 pose pairs."""


class InsufficientPointsError(ValueError):
    """Map error needs non-empty clouds."""


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid (R, t), no scale, mapping src onto dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


@dataclass
class AteResult:
    rmse_cm: float
    errors: np.ndarray      # per-pose translation error vectors after alignment
    rotation: np.ndarray
    translation: np.ndarray


def compute_ate(est, gt) -> AteResult:
    """RMSE of translations (cm) after rigid alignment of est onto gt."""
    est_t = np.array([p.t if isinstance(p, Pose) else p for p in est], dtype=float)
    gt_t = np.array([p.t if isinstance(p, Pose) else p for p in gt], dtype=float)
    if est_t.shape != gt_t.shape:
        raise ValueError("trajectories must pair up")
    if len(est_t) < 3:
        raise InsufficientPosesError(f"need >= 3 poses, got {len(est_t)}")
    R, t = umeyama_alignment(est_t, gt_t)
    aligned = est_t @ R.T + t
    errors = aligned - gt_t
    rmse = float(np.sqrt(np.mean(np.sum(errors**2, axis=1))))
    return AteResult(rmse * 100.0, errors, R, t)


def aggregate_ate(trajectories) -> float:
    """RMSE (cm) over the concatenated per-robot aligned errors."""
    errs = [compute_ate(est, gt).errors for est, gt in trajectories]
    all_err = np.concatenate(errs, axis=0)
    return float(np.sqrt(np.mean(np.sum(all_err**2, axis=1)))) * 100.0


def compute_map_rmse(est_points: np.ndarray, gt_points: np.ndarray,
                     transform: Pose | None = None) -> float:
    """RMSE (cm) of nearest-neighbor distances from the estimated cloud to the
    reference cloud, after applying the given gauge transform to the estimate
    (identity when None)."""
    est_points = np.asarray(est_points, dtype=float).reshape(-1, 3)
    gt_points = np.asarray(gt_points, dtype=float).reshape(-1, 3)
    if est_points.shape[0] == 0 or gt_points.shape[0] == 0:
        raise InsufficientPointsError("clouds must be non-empty")
    if transform is not None:
        est_points = transform.apply(est_points)
    d, _ = cKDTree(gt_points).query(est_points, workers=-1)
    return float(np.sqrt(np.mean(d**2))) * 100.0
