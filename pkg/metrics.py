"""
metrics.py -- Pointwise mesh quality metrics mu(T) and their first derivatives.

T is the weighted Jacobian A W^-1, tau = det T, |.| the Frobenius norm:

    mu2 = |T|^2 / (2 tau) - 1          shape, 2D only, barrier
    mu7 = |T - T^-t|^2                 shape + size
    mu9 = tau |T - T^-t|^2             shape + size, barrier

Infeasible inputs (tau <= 0 for barrier metrics, singular T for mu7) give
math.inf rather than an exception so line searches can react uniformly.
"""

import math
from enum import Enum

import numpy as np


class MetricId(str, Enum):
    SHAPE2 = "mu2"
    SHAPE_SIZE7 = "mu7"
    SHAPE_SIZE9 = "mu9"

    @property
    def is_barrier(self) -> bool:
        return self in (MetricId.SHAPE2, MetricId.SHAPE_SIZE9)


def metric_from_name(name: str) -> MetricId:
    try:
        return MetricId(str(name).strip().lower())
    except ValueError:
        valid = ", ".join(m.value for m in MetricId)
        raise ValueError(f"unknown metric {name!r} (expected one of: {valid})") from None


def _prepare(metric_id, T) -> tuple[MetricId, np.ndarray]:
    metric_id = MetricId(metric_id)
    T = np.asarray(T, dtype=float)
    if T.ndim < 2 or T.shape[-1] != T.shape[-2]:
        raise ValueError(f"T must be a (..., d, d) array, got shape {T.shape}")
    d = T.shape[-1]
    if d not in (2, 3):
        raise ValueError(f"T must be 2x2 or 3x3, got {d}x{d}")
    if metric_id is MetricId.SHAPE2 and d != 2:
        raise ValueError("mu2 is defined for 2D only")
    return metric_id, T


def _feasible_mask(metric_id: MetricId, tau: np.ndarray) -> np.ndarray:
    if metric_id.is_barrier:
        return np.isfinite(tau) & (tau > 0)
    return np.isfinite(tau) & (tau != 0)


def eval_metric_batch(metric_id, T) -> np.ndarray:
    """Metric values for an array of matrices (..., d, d) -> (...)."""
    metric_id, T = _prepare(metric_id, T)
    tau = np.linalg.det(T)
    out = np.full(tau.shape, np.inf)
    ok = _feasible_mask(metric_id, tau)
    if not ok.any():
        return out
    Tk, tk = T[ok], tau[ok]
    if metric_id is MetricId.SHAPE2:
        out[ok] = np.sum(Tk * Tk, axis=(-2, -1)) / (2.0 * tk) - 1.0
        return out
    M = Tk - np.swapaxes(np.linalg.inv(Tk), -1, -2)
    mu7 = np.sum(M * M, axis=(-2, -1))
    out[ok] = mu7 if metric_id is MetricId.SHAPE_SIZE7 else tk * mu7
    return out


def metric_grad_batch(metric_id, T) -> np.ndarray:
    """dmu/dT for an array of matrices; infeasible entries are filled with inf."""
    metric_id, T = _prepare(metric_id, T)
    tau = np.linalg.det(T)
    out = np.full(T.shape, np.inf)
    ok = _feasible_mask(metric_id, tau)
    if not ok.any():
        return out
    Tk, tk = T[ok], tau[ok]
    Tinv_t = np.swapaxes(np.linalg.inv(Tk), -1, -2)
    t_b = tk[..., None, None]
    if metric_id is MetricId.SHAPE2:
        fro2 = np.sum(Tk * Tk, axis=(-2, -1))[..., None, None]
        out[ok] = Tk / t_b - fro2 / (2.0 * t_b) * Tinv_t
        return out
    M = Tk - Tinv_t
    # d|T - T^-t|^2 / dT = 2 (M + T^-t M^t T^-t)
    grad7 = 2.0 * (M + Tinv_t @ np.swapaxes(M, -1, -2) @ Tinv_t)
    if metric_id is MetricId.SHAPE_SIZE7:
        out[ok] = grad7
        return out
    mu7 = np.sum(M * M, axis=(-2, -1))[..., None, None]
    out[ok] = t_b * mu7 * Tinv_t + t_b * grad7
    return out


def eval_metric(metric_id, T) -> float:
    T = np.asarray(T, dtype=float)
    if T.ndim != 2:
        raise ValueError(f"T must be a single d x d matrix, got shape {T.shape}")
    value = float(eval_metric_batch(metric_id, T[None])[0])
    return value if math.isfinite(value) else math.inf


def metric_grad(metric_id, T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim != 2:
        raise ValueError(f"T must be a single d x d matrix, got shape {T.shape}")
    return metric_grad_batch(metric_id, T[None])[0]


def is_feasible(metric_id, T) -> bool:
    return math.isfinite(eval_metric(metric_id, T))
