"""Reduction of the point-matching energy to a low-dimensional variable.

With ``p = vec(P)`` (row concatenation of the ``n_x x n_y`` correspondence
matrix) the energy after eliminating the transformation is

    E(p) = rho^T p - (Gamma p)^T mat(Xi p)^{-1} (Gamma p)

Column ``(i, j)`` of ``rho``, ``Gamma`` and ``Xi`` is ``||y_j||^2``,
``J(x_i)^T y_j`` and ``vec(J(x_i)^T J(x_i))``. Rows of ``Xi`` that are constant
(they only ever contribute ``c * n_p``) or duplicate another row up to scale are
dropped, giving ``Xi2``. A QR factorization ``[Xi2^T, Gamma^T, rho] = Q R``
turns ``E`` into a function of ``u' = Q^T p``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .assignment import Correspondence
from .errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    InfeasibleCardinality,
    OutsideConcavityRegion,
)
from .transform_models import ModelKind, as_points, jacobians

ROW_TOL = 1e-9
RANK_TOL = 1e-10
PSD_TOL = 1e-10

__all__ = [
    "Correspondence",
    "XiRowMap",
    "ReducedObjective",
    "select_xi_rows",
    "build_reduction",
    "reconstruct_matrix",
    "energy_p",
    "energy_u",
    "energy_shifted",
]


@dataclass(frozen=True)
class XiRowMap:
    """Which rows of ``Xi`` survive and how to rebuild the full matrix.

    Entry ``e`` of the flattened ``n_phi x n_phi`` matrix is either
    ``const[e] * n_p`` (when ``source[e] == -1``) or ``scale[e] * xi2[source[e]]``.
    """

    kept_rows: np.ndarray
    source: np.ndarray
    scale: np.ndarray
    const: np.ndarray
    n_phi: int

    @property
    def m(self) -> int:
        return len(self.kept_rows)


def select_xi_rows(row_values: np.ndarray, tol: float = ROW_TOL) -> XiRowMap:
    """Detect constant and proportional rows of ``Xi``.

    ``row_values`` has shape ``(n_x, n_phi**2)``: column ``r`` holds row ``r`` of
    ``Xi`` restricted to one scene index (the row does not depend on ``j``).
    Rows are scanned in order so the first member of each proportional class is
    the one kept.
    """
    n_x, n_e = row_values.shape
    n_phi = int(round(np.sqrt(n_e)))
    kept: list[int] = []
    source = np.full(n_e, -1, dtype=np.int64)
    scale = np.zeros(n_e)
    const = np.zeros(n_e)
    for r in range(n_e):
        a = row_values[:, r]
        norm_a = np.linalg.norm(a)
        mean = a.mean()
        if norm_a == 0.0 or np.linalg.norm(a - mean) <= tol * norm_a:
            const[r] = mean
            continue
        for k, kr in enumerate(kept):
            b = row_values[:, kr]
            s = float(a @ b) / float(b @ b)
            if np.linalg.norm(a - s * b) <= tol * norm_a:
                source[r] = k
                scale[r] = s
                break
        else:
            source[r] = len(kept)
            scale[r] = 1.0
            kept.append(r)
    return XiRowMap(np.array(kept, dtype=np.int64), source, scale, const, n_phi)


@dataclass
class ReducedObjective:
    """Precomputed reduction for one pair of point sets.

    ``R`` is stored with its columns in the original ``[Xi2, Gamma, rho]``
    order, so ``Q @ R`` reproduces the stacked matrix; ``perm`` and ``R_tri``
    give the upper-triangular factor of the column-pivoted QR.

    The solver works in coordinates ``u`` of the affine hull of the feasible
    images ``Q^T p``: ``u' = basis @ u + offset``. The hull is all of the
    ``u'``-space unless every matching must use every model (or scene) point,
    in which case the fixed row (column) sums remove dimensions. ``Qw`` is
    ``Q @ basis``, so ``Qw^T p`` gives ``u`` directly. ``v0`` lives in ``u``
    coordinates.
    """

    X: np.ndarray
    Y: np.ndarray
    kind: ModelKind
    n_p: int
    rho: np.ndarray
    Gamma: np.ndarray
    Xi2: np.ndarray
    row_map: XiRowMap
    Q: np.ndarray
    R: np.ndarray
    R_tri: np.ndarray
    perm: np.ndarray
    dropped_columns: np.ndarray
    basis: np.ndarray = field(default=None)
    offset: np.ndarray = field(default=None)
    v0: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.basis is None:
            self.basis = np.eye(self.Q.shape[1])
        if self.offset is None:
            self.offset = np.zeros(self.Q.shape[1])
        self.Qw = np.ascontiguousarray(self.Q @ self.basis)
        if self.v0 is None:
            self.v0 = np.zeros(self.n_u)

    @property
    def n_x(self) -> int:
        return self.X.shape[0]

    @property
    def n_y(self) -> int:
        return self.Y.shape[0]

    @property
    def n_u(self) -> int:
        """Dimension of the working coordinates."""
        return self.basis.shape[1]

    @property
    def rank(self) -> int:
        """Numerical rank of the stacked matrix (columns of ``Q``)."""
        return self.Q.shape[1]

    def to_full(self, u) -> np.ndarray:
        """``u'`` for working coordinates ``u`` (not shifted by ``v0``)."""
        return self.basis @ np.asarray(u, dtype=float) + self.offset

    @property
    def m_xi2(self) -> int:
        return self.row_map.m

    @property
    def n_phi(self) -> int:
        return self.kind.n_phi

    @property
    def stacked(self) -> np.ndarray:
        """``[Xi2^T, Gamma^T, rho]``, shape ``(n_x n_y, m + n_phi + 1)``."""
        return np.column_stack([self.Xi2.T, self.Gamma.T, self.rho])

    def split(self, r: np.ndarray):
        """Split ``R^T u'`` (or ``stacked^T p``) into its Xi2, Gamma and rho parts."""
        m, n = self.m_xi2, self.n_phi
        return r[:m], r[m : m + n], r[m + n]

    def cost_vector(self, d: np.ndarray) -> np.ndarray:
        """Per-pair coefficients of the linear functional ``p -> d^T u(p)``."""
        return self.Qw @ d


def build_reduction(X, Y, kind, n_p: int) -> ReducedObjective:
    kind = ModelKind.parse(kind)
    X = as_points(X, kind.n_d)
    Y = as_points(Y, kind.n_d)
    n_x, n_y = X.shape[0], Y.shape[0]
    n_p = int(n_p)
    if n_p < kind.min_matches:
        raise InfeasibleCardinality(f"{kind.value} needs n_p >= {kind.min_matches}, got {n_p}")
    if n_p > min(n_x, n_y):
        raise InfeasibleCardinality(f"n_p={n_p} exceeds min(n_x, n_y)={min(n_x, n_y)}")

    J = jacobians(kind, X)  # (n_x, n_d, n_phi)
    n_phi = kind.n_phi
    JtJ = np.einsum("idk,idl->ikl", J, J).reshape(n_x, n_phi * n_phi)
    row_map = select_xi_rows(JtJ)

    rho = np.tile(np.sum(Y * Y, axis=1), n_x)
    Gamma = np.einsum("idk,jd->kij", J, Y).reshape(n_phi, n_x * n_y)
    Xi2 = np.repeat(JtJ[:, row_map.kept_rows].T, n_y, axis=1)

    A = np.column_stack([Xi2.T, Gamma.T, rho])
    Qf, Rf, perm = scipy.linalg.qr(A, mode="economic", pivoting=True)
    sv = np.linalg.svd(Rf, compute_uv=False)
    rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv[0] > 0 else 0
    if rank < n_phi + 1:
        raise DegenerateGeometry(f"stacked reduction matrix has rank {rank} < n_phi + 1 = {n_phi + 1}")
    Q = np.ascontiguousarray(Qf[:, :rank])
    R_tri = Rf[:rank]
    R = np.empty_like(R_tri)
    R[:, perm] = R_tri
    basis, offset = _feasible_hull(Q, n_x, n_y, n_p)
    return ReducedObjective(
        X=X, Y=Y, kind=kind, n_p=n_p, rho=rho, Gamma=Gamma, Xi2=Xi2, row_map=row_map,
        Q=Q, R=R, R_tri=R_tri, perm=perm, dropped_columns=np.sort(perm[rank:]),
        basis=basis, offset=offset,
    )


def _feasible_hull(Q, n_x: int, n_y: int, n_p: int):
    """Orthonormal basis and offset of the affine hull of ``{Q^T p}``.

    The affine hull of the matchings with exactly ``n_p`` pairs is cut out by
    ``1^T p = n_p``, plus unit row sums when ``n_p = n_x`` and unit column sums
    when ``n_p = n_y``.
    """
    n_u = Q.shape[1]
    eye_x, eye_y = np.eye(n_x), np.eye(n_y)
    rows = []
    if n_p == n_x:
        rows.append(np.kron(eye_x, np.ones(n_y)))
    if n_p == n_y:
        rows.append(np.kron(np.ones(n_x), eye_y))
    if not rows:
        rows.append(np.ones((1, n_x * n_y)))
    A = np.vstack(rows)
    # Q projected onto the null space of A
    QN = Q - np.linalg.lstsq(A, A @ Q, rcond=None)[0]
    _, sv, Vt = np.linalg.svd(QN, full_matrices=False)
    r = int(np.sum(sv > RANK_TOL * max(sv[0], 1e-300)))
    if r == n_u:
        return np.eye(n_u), np.zeros(n_u)
    basis = Vt[:r].T
    p0 = np.zeros(n_x * n_y)
    p0[np.arange(n_p) * n_y + np.arange(n_p)] = 1.0
    u0 = Q.T @ p0
    return basis, u0 - basis @ (basis.T @ u0)


def reconstruct_matrix(red_or_map, xi2_values, n_p: float | None = None) -> np.ndarray:
    """Symmetric ``n_phi x n_phi`` matrix from kept-row values.

    Constant entries contribute ``c * n_p``; pass ``n_p=0`` for the direction
    part of an affine matrix pencil.
    """
    if isinstance(red_or_map, ReducedObjective):
        rm = red_or_map.row_map
        if n_p is None:
            n_p = red_or_map.n_p
    else:
        rm = red_or_map
        if n_p is None:
            raise ValueError("n_p is required when passing a bare row map")
    xi2_values = np.asarray(xi2_values, dtype=float)
    if xi2_values.shape != (rm.m,):
        raise ValueError(f"expected {rm.m} values, got shape {xi2_values.shape}")
    ext = np.append(xi2_values, 0.0)
    flat = rm.scale * ext[rm.source] + rm.const * n_p
    M = flat.reshape(rm.n_phi, rm.n_phi)
    return 0.5 * (M + M.T)


def psd_margin(M: np.ndarray) -> float:
    """Smallest eigenvalue minus the scale-relative definiteness threshold."""
    n = M.shape[0]
    delta = PSD_TOL * max(np.trace(M) / n, 0.0)
    return float(np.linalg.eigvalsh(M)[0] - delta) if delta > 0 else -np.inf


def _quadratic_energy(M, g, rho, exc):
    if psd_margin(M) <= 0.0:
        raise exc("reconstructed matrix is not positive definite")
    c = scipy.linalg.cho_factor(M)
    return float(rho - g @ scipy.linalg.cho_solve(c, g))


def energy_p(red: ReducedObjective, corr) -> float:
    """Energy of a correspondence (or of a dense, possibly relaxed ``p``)."""
    if isinstance(corr, Correspondence):
        idx = corr.flat_indices(red.n_y)
        rho = red.rho[idx].sum()
        g = red.Gamma[:, idx].sum(axis=1)
        xi = red.Xi2[:, idx].sum(axis=1)
    else:
        p = np.asarray(corr, dtype=float)
        rho, g, xi = red.rho @ p, red.Gamma @ p, red.Xi2 @ p
    return _quadratic_energy(reconstruct_matrix(red, xi), g, rho, DegenerateConfiguration)


def psi_matrix(red: ReducedObjective, u_prime) -> np.ndarray:
    """``mat((R^T u')_{Xi2})``; positive definite exactly on the concavity region."""
    xi, _, _ = red.split(red.R.T @ np.asarray(u_prime, dtype=float))
    return reconstruct_matrix(red, xi)


def energy_u(red: ReducedObjective, u_prime) -> float:
    xi, g, rho = red.split(red.R.T @ np.asarray(u_prime, dtype=float))
    return _quadratic_energy(reconstruct_matrix(red, xi), g, rho, OutsideConcavityRegion)


def energy_shifted(red: ReducedObjective, u) -> float:
    """Energy at working coordinates ``u`` measured from ``red.v0``."""
    return energy_u(red, red.to_full(np.asarray(u, dtype=float) + red.v0))


def in_psi(red: ReducedObjective, u) -> bool:
    """Whether the shifted point ``u`` lies in the concavity region."""
    return psd_margin(psi_matrix(red, red.to_full(np.asarray(u, dtype=float) + red.v0))) > 0.0
