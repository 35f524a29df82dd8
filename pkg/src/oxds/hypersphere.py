"""Geometry on the unit hypersphere.

Unit vectors are plain 1-D ``float64`` numpy arrays. All functions are pure.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import AntipodalInputs, DimensionMismatch, EmptyInput, ZeroVector

EPS_NORM = 1e-12
EPS_ANGLE = 1e-6


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    if v.shape[0] < 2:
        raise DimensionMismatch(f"vectors need at least 2 components, got {v.shape[0]}")
    return v


def _check_same_dim(u: np.ndarray, v: np.ndarray) -> None:
    if u.shape != v.shape:
        raise DimensionMismatch(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")


def normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    >>> normalize([3.0, 4.0])
    array([0.6, 0.8])
    """
    v = _as_vector(v)
    n = np.linalg.norm(v)
    if not n > eps:
        raise ZeroVector(f"cannot normalize vector of norm {n:g}")
    return v / n


def normalize_rows(m, eps: float = EPS_NORM) -> np.ndarray:
    """Row-wise :func:`normalize` for a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D array, got shape {m.shape}")
    n = np.linalg.norm(m, axis=1)
    if m.shape[0] and not np.all(n > eps):
        bad = int(np.argmin(n))
        raise ZeroVector(f"row {bad} has norm {n[bad]:g}")
    return m / n[:, None]


def cosine_distance(u, v) -> float:
    """``1 - <u, v>`` clamped to ``[0, 2]``."""
    u = _as_vector(u)
    v = _as_vector(v)
    _check_same_dim(u, v)
    return float(min(2.0, max(0.0, 1.0 - float(np.dot(u, v)))))


def _omega(u: np.ndarray, v: np.ndarray) -> float:
    # atan2 form stays accurate near 0 and pi, where arccos of the dot product does not.
    return float(2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v)))


def angle(u, v) -> float:
    """Geodesic angle between two unit vectors, in radians."""
    u = _as_vector(u)
    v = _as_vector(v)
    _check_same_dim(u, v)
    return _omega(u, v)


def slerp(p0, p1, lam: float, eps_angle: float = EPS_ANGLE) -> np.ndarray:
    """Spherical linear interpolation from ``p0`` (``lam=0``) to ``p1`` (``lam=1``).

    Near-parallel inputs fall back to normalized linear interpolation.
    Antipodal inputs have no unique geodesic and raise :class:`AntipodalInputs`.
    """
    p0 = _as_vector(p0)
    p1 = _as_vector(p1)
    _check_same_dim(p0, p1)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return p0.copy()
    if lam == 1.0:
        return p1.copy()
    omega = _omega(p0, p1)
    if omega > np.pi - eps_angle:
        raise AntipodalInputs(f"inputs are antipodal (angle {omega:.9f} rad)")
    if omega < eps_angle:
        return normalize((1.0 - lam) * p0 + lam * p1)
    sin_omega = np.sin(omega)
    return (np.sin((1.0 - lam) * omega) / sin_omega) * p0 + (np.sin(lam * omega) / sin_omega) * p1


def spherical_average(vs: Sequence) -> np.ndarray:
    """Arithmetic mean of unit vectors, projected back onto the sphere.

    Renormalizing does not change any cosine ranking against the result, and
    keeps the output usable as a slerp endpoint.
    """
    if len(vs) == 0:
        raise EmptyInput("cannot average an empty list of vectors")
    rows = [_as_vector(v) for v in vs]
    for r in rows[1:]:
        _check_same_dim(rows[0], r)
    # Sorting each column fixes the summation order, so the result is exactly
    # invariant to the order of ``vs``.
    total = np.sort(np.vstack(rows), axis=0).sum(axis=0)
    return normalize(total / len(rows))
