"""Linearly parameterized transformation families ``T(x|phi) = J(x) phi``."""
from __future__ import annotations

from enum import Enum

import numpy as np
import scipy.linalg

from .errors import DegenerateConfiguration, InputError


class ModelKind(str, Enum):
    SIMILARITY2D = "similarity2d"
    AFFINE2D = "affine2d"
    SCALE_TRANSLATE3D = "scale_translate3d"
    ZROT_SCALE3D = "zrot_scale3d"

    @property
    def n_phi(self) -> int:
        return 4 if self is ModelKind.SIMILARITY2D else 6

    @property
    def n_d(self) -> int:
        return 2 if self in (ModelKind.SIMILARITY2D, ModelKind.AFFINE2D) else 3

    @property
    def min_matches(self) -> int:
        return 3 if self is ModelKind.AFFINE2D else 2

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise InputError(f"unknown model kind {value!r} (expected one of {names})") from None


def as_points(points, n_d: int | None = None) -> np.ndarray:
    """Validate a point set and return it as a float ``(n, n_d)`` array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise InputError(f"expected a non-empty (n, n_d) array, got shape {arr.shape}")
    if arr.shape[1] not in (2, 3):
        raise InputError(f"points must be 2D or 3D, got dimension {arr.shape[1]}")
    if n_d is not None and arr.shape[1] != n_d:
        raise InputError(f"point dimension {arr.shape[1]} does not match model dimension {n_d}")
    if not np.all(np.isfinite(arr)):
        raise InputError("point coordinates must be finite")
    return arr


def jacobians(kind, points) -> np.ndarray:
    """Stacked Jacobians, shape ``(n, n_d, n_phi)``. Column order follows the
    parameter vector layout of each family."""
    kind = ModelKind.parse(kind)
    x = as_points(np.atleast_2d(points), kind.n_d)
    n = x.shape[0]
    J = np.zeros((n, kind.n_d, kind.n_phi))
    if kind is ModelKind.SIMILARITY2D:
        # [x1 -x2 1 0; x2 x1 0 1]
        J[:, 0, 0] = x[:, 0]
        J[:, 0, 1] = -x[:, 1]
        J[:, 0, 2] = 1.0
        J[:, 1, 0] = x[:, 1]
        J[:, 1, 1] = x[:, 0]
        J[:, 1, 3] = 1.0
    elif kind is ModelKind.AFFINE2D:
        # [x1 x2 0 0 1 0; 0 0 x1 x2 0 1]
        J[:, 0, 0] = x[:, 0]
        J[:, 0, 1] = x[:, 1]
        J[:, 0, 4] = 1.0
        J[:, 1, 2] = x[:, 0]
        J[:, 1, 3] = x[:, 1]
        J[:, 1, 5] = 1.0
    elif kind is ModelKind.SCALE_TRANSLATE3D:
        for a in range(3):
            J[:, a, a] = x[:, a]
            J[:, a, 3 + a] = 1.0
    else:
        # [x1 -x2 0 1 0 0; x2 x1 0 0 1 0; 0 0 x3 0 0 1]
        J[:, 0, 0] = x[:, 0]
        J[:, 0, 1] = -x[:, 1]
        J[:, 0, 3] = 1.0
        J[:, 1, 0] = x[:, 1]
        J[:, 1, 1] = x[:, 0]
        J[:, 1, 4] = 1.0
        J[:, 2, 2] = x[:, 2]
        J[:, 2, 5] = 1.0
    return J


def jacobian(kind, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("jacobian expects a single point")
    return jacobians(kind, x[None, :])[0]


def _check_phi(kind: ModelKind, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (kind.n_phi,):
        raise InputError(f"{kind.value} expects {kind.n_phi} parameters, got shape {phi.shape}")
    return phi


def apply(kind, phi, x) -> np.ndarray:
    """Transform one point or an ``(n, n_d)`` array of points."""
    kind = ModelKind.parse(kind)
    phi = _check_phi(kind, phi)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return jacobian(kind, x) @ phi
    return jacobians(kind, x) @ phi


def normal_equations(kind, X, Y, pairs):
    """Accumulate ``sum J_i^T J_i`` and ``sum J_i^T y_j`` over matched pairs."""
    kind = ModelKind.parse(kind)
    X = as_points(X, kind.n_d)
    Y = as_points(Y, kind.n_d)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    J = jacobians(kind, X[pairs[:, 0]])
    A = np.einsum("kdi,kdj->ij", J, J)
    b = np.einsum("kdi,kd->i", J, Y[pairs[:, 1]])
    return A, b


def solve_phi(kind, X, Y, pairs) -> np.ndarray:
    """Least-squares parameters mapping matched model points onto scene points."""
    A, b = normal_equations(kind, X, Y, pairs)
    delta = 1e-10 * float(np.max(np.diag(A)))
    if not delta > 0.0 or np.linalg.eigvalsh(A)[0] <= delta:
        raise DegenerateConfiguration("matched model points do not determine the transformation")
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)


def residual(kind, phi, X, Y, pairs) -> float:
    """``sum ||y_j - T(x_i|phi)||^2`` over the pairs."""
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    diff = Y[pairs[:, 1]] - apply(kind, phi, X[pairs[:, 0]])
    return float(np.sum(diff * diff))
