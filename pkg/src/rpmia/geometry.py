"""Concavity-region line search and the expanding polytope kept in polar form.

The polytope ``D = co(generators)`` always contains the origin in its interior.
Its facets ``{u : d^T u = 1}`` are tracked as the vertices ``d`` of the polar
``D0 = {v : g^T v <= 1 for every generator g}``. Adding a generator ``z`` to
``D`` intersects the polar with ``{v : z^T v <= 1}``; new polar vertices are
where cut edges cross that hyperplane. Two polar vertices share an edge iff
their active generator sets share ``n_u - 1`` members.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, kernel, njit
from .errors import (
    DegenerateVertex,
    IllConditionedSimplex,
    InteriorPointInvalid,
    NoOpCut,
    NotExtendable,
    OutsideConcavityRegion,
)
from .objective import ReducedObjective, psd_margin, reconstruct_matrix

log = logging.getLogger(__name__)

ACTIVE_TOL = 1e-8
BISECT_RTOL = 1e-6
BISECT_MAX_ITER = 60
BOUNDARY_BACKOFF = 1e-9
DEFAULT_T_CAP = 1e6
COND_LIMIT = 1e12


def active_tol(g_norm, d_norm):
    return ACTIVE_TOL * (1.0 + g_norm * d_norm)


# --------------------------------------------------------------------------
# line search inside the concavity region


def pencil_boundary(M0: np.ndarray, Md: np.ndarray, t_cap: float = DEFAULT_T_CAP) -> float:
    """``sup{t >= 0 : M0 + t Md > 0}`` for positive definite ``M0``, capped."""
    try:
        L = np.linalg.cholesky(M0)
    except np.linalg.LinAlgError:
        raise InteriorPointInvalid("base matrix of the pencil is not positive definite") from None
    Li = np.linalg.inv(L)
    S = Li @ Md @ Li.T
    lam = np.linalg.eigvalsh(0.5 * (S + S.T))[0]
    if lam >= 0.0:
        return t_cap
    return min(-1.0 / lam, t_cap)


def ray_pencil(red: ReducedObjective, d):
    """Matrices ``M0`` (at the origin of the shifted frame) and ``Md`` with
    ``mat(...)(t d) = M0 + t Md``."""
    xi0, _, _ = red.split(red.R.T @ red.to_full(red.v0))
    xid, _, _ = red.split(red.R.T @ (red.basis @ np.asarray(d, dtype=float)))
    return reconstruct_matrix(red, xi0), reconstruct_matrix(red, xid, n_p=0.0)


def ray_boundary(red: ReducedObjective, d, t_cap: float = DEFAULT_T_CAP) -> float:
    """Largest step ``t`` along ``d`` that keeps ``t d`` in the concavity region."""
    d = np.asarray(d, dtype=float)
    if not np.any(d):
        raise ValueError("direction must be non-zero")
    M0, Md = ray_pencil(red, d)
    if psd_margin(M0) <= 0.0:
        raise InteriorPointInvalid("translation origin lies outside the concavity region")
    return pencil_boundary(M0, Md, t_cap)


def extend_along_ray(f, gamma: float, t_max: float, rtol: float = BISECT_RTOL,
                     max_iter: int = BISECT_MAX_ITER) -> float:
    """Largest ``t`` in ``[1, t_max]`` with ``f(t) >= gamma`` for ``f`` concave
    on the ray and ``f(1) >= gamma``. ``f`` may raise ``OutsideConcavityRegion``,
    which counts as falling below the level."""

    def above(t):
        try:
            return f(t) >= gamma
        except OutsideConcavityRegion:
            return False

    if t_max <= 1.0:
        return 1.0
    if above(t_max):
        return float(t_max)
    lo, hi = 1.0, float(t_max)
    for _ in range(max_iter):
        if hi - lo <= rtol * lo:
            break
        mid = 0.5 * (lo + hi)
        if above(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _ray_energy(red: ReducedObjective, d):
    r0 = red.R.T @ red.to_full(red.v0)
    rd = red.R.T @ (red.basis @ d)
    xi0, g0, rho0 = red.split(r0)
    xid, gd, rhod = red.split(rd)
    M0 = reconstruct_matrix(red, xi0)
    Md = reconstruct_matrix(red, xid, n_p=0.0)

    def f(t):
        M = M0 + t * Md
        if psd_margin(M) <= 0.0:
            raise OutsideConcavityRegion("ray left the concavity region")
        g = g0 + t * gd
        return float(rho0 + t * rhod - g @ np.linalg.solve(M, g))

    return f, M0, Md


def gamma_extension(red: ReducedObjective, d, gamma: float, t_cap: float = DEFAULT_T_CAP) -> float:
    """Step ``theta >= 1`` such that ``theta d`` is the farthest point of the ray
    still at level ``gamma`` and inside the concavity region."""
    d = np.asarray(d, dtype=float)
    f, M0, Md = _ray_energy(red, d)
    if psd_margin(M0) <= 0.0:
        raise InteriorPointInvalid("translation origin lies outside the concavity region")
    try:
        e1 = f(1.0)
    except OutsideConcavityRegion:
        raise NotExtendable("start point outside the concavity region") from None
    if e1 < gamma - 1e-9 * max(1.0, abs(gamma)):
        raise NotExtendable(f"start point below level ({e1:.6g} < {gamma:.6g})")
    t0 = pencil_boundary(M0, Md, t_cap)
    t_hi = t0 * (1.0 - BOUNDARY_BACKOFF) if t0 < t_cap else t_cap
    return extend_along_ray(f, gamma, t_hi)


# --------------------------------------------------------------------------
# polytope in polar form


@dataclass
class PolarVertex:
    """Facet ``{u : d^T u = 1}`` of the primal polytope.

    ``mu``, ``point`` and ``witness_index`` cache the maximum of ``d^T u`` over
    the feasible set, its maximizer, and the flat ``vec(P)`` positions of the
    matching that attains it.
    """

    d: np.ndarray
    active_set: tuple
    mu: float | None = None
    witness_index: np.ndarray | None = None
    point: np.ndarray | None = None


# Ridges (sets of n_u - 1 generators shared by two adjacent polar vertices) are
# keyed by the XOR of per-generator random 64-bit words and kept in an
# open-addressing table ``tab`` with rows (key, packed ids, slot state). A ridge
# belongs to at most two vertices, packed as (a + 1) | (b + 1) << 32. Matches are
# always checked against the actual generator sets, so a hash collision is
# detected, never silently used. ``meta`` counts used and tombstoned slots.

_EMPTY, _USED, _TOMB = 0, 1, 2


@kernel
def _slot(tab, key, claim, meta):
    """Slot holding ``key``; -1 if absent and ``claim`` is False."""
    mask = tab.shape[0] - 1
    i = key & mask
    tomb = -1
    while True:
        st = tab[i, 2]
        if st == _EMPTY:
            if not claim:
                return -1
            if tomb >= 0:
                i = tomb
                meta[1] -= 1
            meta[0] += 1
            tab[i, 0] = key
            tab[i, 1] = 0
            tab[i, 2] = _USED
            return i
        if st == _USED and tab[i, 0] == key:
            return i
        if st == _TOMB and tomb < 0:
            tomb = i
        i = (i + 1) & mask


@kernel
def _ridge_add(tab, meta, key, vid):
    i = _slot(tab, key, True, meta)
    packed = tab[i, 1]
    if packed == 0:
        tab[i, 1] = vid + 1
        return True
    if (packed >> 32) != 0:
        return False
    tab[i, 1] = packed | ((vid + 1) << 32)
    return True


@kernel
def _ridge_remove(tab, meta, key, vid):
    i = _slot(tab, key, False, meta)
    if i < 0:
        return
    packed = tab[i, 1]
    a = (packed & 0xFFFFFFFF) - 1
    b = (packed >> 32) - 1
    if a == vid:
        a = b
        b = -1
    elif b == vid:
        b = -1
    if a < 0:
        tab[i, 2] = _TOMB
        meta[0] -= 1
        meta[1] += 1
    elif b < 0:
        tab[i, 1] = a + 1
    else:
        tab[i, 1] = (a + 1) | ((b + 1) << 32)


@kernel
def _ridge_other(tab, meta, key, vid):
    i = _slot(tab, key, False, meta)
    if i < 0:
        return -1
    packed = tab[i, 1]
    a = (packed & 0xFFFFFFFF) - 1
    b = (packed >> 32) - 1
    return b if a == vid else a


@kernel
def _register(tab, meta, active, vhash, zob, vid):
    """Insert the ridges of vertex ``vid``; returns False on a ridge overflow."""
    ok = True
    for l in range(active.shape[1]):
        if not _ridge_add(tab, meta, vhash[vid] ^ zob[active[vid, l]], vid):
            ok = False
    return ok


@kernel
def _register_all(tab, meta, active, vhash, zob, ids):
    for vid in ids:
        if not _register(tab, meta, active, vhash, zob, vid):
            return False
    return True


@kernel
def _new_facet_systems(tab, meta, active, vhash, zob, removed, kept_mask, g_new):
    """Active sets of the polar vertices created by a cut.

    For every edge from a removed vertex to a kept one, the shared ``n_u - 1``
    generators plus the new generator. Returns ``(systems, ends, status)``
    where ``ends`` holds the (removed, kept) endpoints of each edge and status
    is 0 on success, 1 for a dangling edge, 2 for a hash mismatch.
    """
    n_u = active.shape[1]
    out = np.empty((len(removed) * n_u, n_u), dtype=np.int64)
    ends = np.empty((len(removed) * n_u, 2), dtype=np.int64)
    count = 0
    for a in removed:
        for l in range(n_u):
            key = vhash[a] ^ zob[active[a, l]]
            b = _ridge_other(tab, meta, key, a)
            if b < 0:
                return out[:0], ends[:0], 1
            if not kept_mask[b]:
                continue
            # verify that b really contains active[a] minus position l
            shared = 0
            ib = 0
            for ia in range(n_u):
                if ia == l:
                    continue
                g = active[a, ia]
                while ib < n_u and active[b, ib] < g:
                    ib += 1
                if ib < n_u and active[b, ib] == g:
                    shared += 1
            if shared != n_u - 1:
                return out[:0], ends[:0], 2
            c = 0
            for ia in range(n_u):
                if ia != l:
                    out[count, c] = active[a, ia]
                    c += 1
            out[count, n_u - 1] = g_new
            ends[count, 0] = a
            ends[count, 1] = b
            count += 1
    return out[:count], ends[:count], 0


@kernel
def _drop_vertices(tab, meta, active, vhash, zob, alive, removed):
    for a in removed:
        for l in range(active.shape[1]):
            _ridge_remove(tab, meta, vhash[a] ^ zob[active[a, l]], a)
        alive[a] = False


@kernel
def _add_vertices(tab, meta, active, vhash, zob, alive, first, n):
    ok = True
    for vid in range(first, first + n):
        h = np.int64(0)
        for l in range(active.shape[1]):
            h ^= zob[active[vid, l]]
        vhash[vid] = h
        alive[vid] = True
        if not _register(tab, meta, active, vhash, zob, vid):
            ok = False
    return ok


@njit
def _violates_kernel(G, g_norms, D, d_norms):
    for p in range(D.shape[0]):
        for k in range(G.shape[0]):
            v = 0.0
            for c in range(D.shape[1]):
                v += G[k, c] * D[p, c]
            if v > 1.0 + ACTIVE_TOL * (1.0 + g_norms[k] * d_norms[p]):
                return True
    return False


def _violates(G, g_norms, D, d_norms) -> bool:
    """Whether any row of ``D`` breaks a generator inequality beyond tolerance."""
    if USE_NUMBA:
        return _violates_kernel(G, g_norms, D, d_norms)
    return bool(np.any(D @ G.T > 1.0 + active_tol(g_norms[None, :], d_norms[:, None])))


def _new_table(n_keys: int):
    cap = 1 << max(10, int(np.ceil(np.log2(max(3 * n_keys, 1)))))
    return np.zeros((cap, 3), dtype=np.int64), np.zeros(2, dtype=np.int64)


class PolytopeState:
    """Generators of ``D`` and the vertices of its polar, stored in flat arrays.

    Vertex ids index the arrays; removed vertices stay in place (``alive`` is
    cleared) until the arrays are compacted. Per-facet caches ``mu``, ``points``
    and ``witness`` are filled by the caller.
    """

    def __init__(self, n_u: int, capacity: int = 256, seed: int = 0):
        self.n_u = n_u
        self._rng = np.random.default_rng(seed)
        self._gens = np.empty((capacity, n_u))
        self._zob = np.empty(capacity, dtype=np.int64)
        self.n_generators = 0
        self.normals_ = np.empty((capacity, n_u))
        self.dnorm = np.zeros(capacity)
        self.active = np.empty((capacity, n_u), dtype=np.int64)
        self.vhash = np.zeros(capacity, dtype=np.int64)
        self.alive = np.zeros(capacity, dtype=bool)
        self.mu = np.full(capacity, np.nan)
        self.points = np.empty((capacity, n_u))
        self.witness = np.empty((capacity, 0), dtype=np.int64)
        self.next_id = 0
        self.cuts = 0
        self.tab, self.meta = _new_table(0)

    # -- storage -----------------------------------------------------------

    def _grow_vertices(self, need: int):
        cap = len(self.alive)
        if need <= cap:
            return
        new = max(need, 2 * cap)

        def grow(a, fill):
            out = np.full((new,) + a.shape[1:], fill, dtype=a.dtype)
            out[: len(a)] = a
            return out

        self.normals_ = grow(self.normals_, 0.0)
        self.dnorm = grow(self.dnorm, 0.0)
        self.active = grow(self.active, 0)
        self.vhash = grow(self.vhash, 0)
        self.alive = grow(self.alive, False)
        self.mu = grow(self.mu, np.nan)
        self.points = grow(self.points, 0.0)
        self.witness = grow(self.witness, 0)

    def set_witness_width(self, width: int):
        self.witness = np.zeros((len(self.alive), width), dtype=np.int64)

    @property
    def generators(self) -> np.ndarray:
        return self._gens[: self.n_generators]

    def add_generator(self, g) -> int:
        if self.n_generators == len(self._gens):
            self._gens = np.concatenate([self._gens, np.empty_like(self._gens)])
            self._zob = np.concatenate([self._zob, np.empty_like(self._zob)])
        self._gens[self.n_generators] = g
        self._zob[self.n_generators] = self._rng.integers(np.iinfo(np.int64).min, np.iinfo(np.int64).max,
                                                          dtype=np.int64)
        self.n_generators += 1
        return self.n_generators - 1

    def _append_vertices(self, normals, actives) -> np.ndarray:
        """Store vertices without touching the ridge table; returns their ids."""
        first, n = self.next_id, len(normals)
        self._grow_vertices(first + n)
        self.normals_[first : first + n] = normals
        self.dnorm[first : first + n] = np.linalg.norm(normals, axis=1)
        self.active[first : first + n] = np.sort(actives, axis=1)
        self.mu[first : first + n] = np.nan
        self.next_id += n
        return np.arange(first, first + n)

    def live_ids(self) -> np.ndarray:
        return np.flatnonzero(self.alive[: self.next_id])

    def normals(self):
        """``(ids, d-matrix)`` of the live polar vertices, ids ascending."""
        ids = self.live_ids()
        return ids, self.normals_[ids]

    @property
    def n_vertices(self) -> int:
        return int(np.count_nonzero(self.alive[: self.next_id]))

    @property
    def polar_vertices(self) -> list:
        out = []
        for vid in self.live_ids():
            mu = None if np.isnan(self.mu[vid]) else float(self.mu[vid])
            out.append(PolarVertex(
                d=self.normals_[vid].copy(),
                active_set=tuple(self.active[vid].tolist()),
                mu=mu,
                witness_index=self.witness[vid].copy() if mu is not None and self.witness.shape[1] else None,
                point=self.points[vid].copy() if mu is not None else None,
            ))
        return out

    def compact(self):
        """Drop dead vertex slots and rebuild the ridge table (ids change)."""
        ids = self.live_ids()
        n = len(ids)
        for name in ("normals_", "dnorm", "active", "vhash", "mu", "points", "witness"):
            arr = getattr(self, name)
            arr[:n] = arr[ids]
        self.alive[:] = False
        self.alive[:n] = True
        self.next_id = n
        self._rebuild_table(0)

    def _rebuild_table(self, extra: int):
        ids = self.live_ids()
        self.tab, self.meta = _new_table(len(ids) * self.n_u + extra)
        if not _register_all(self.tab, self.meta, self.active, self.vhash, self._zob, ids):
            raise DegenerateVertex("ridge shared by more than two polar vertices")

    def _insert_vertices(self, normals, actives) -> np.ndarray:
        extra = len(normals) * self.n_u
        if self.meta[0] + self.meta[1] + extra > 0.6 * len(self.tab):
            self._rebuild_table(extra)
        ids = self._append_vertices(normals, actives)
        if not _add_vertices(self.tab, self.meta, self.active, self.vhash, self._zob, self.alive,
                             int(ids[0]), len(ids)):
            raise DegenerateVertex("ridge shared by more than two polar vertices")
        return ids

    def audit(self) -> float:
        """Max relative discrepancy between stored normals and the solution of
        their active systems, after checking every facet inequality."""
        G = self.generators
        worst = 0.0
        g_norms = np.linalg.norm(G, axis=1)
        for vid in self.live_ids():
            act = self.active[vid]
            dv = self.normals_[vid]
            d = np.linalg.solve(G[act], np.ones(self.n_u))
            worst = max(worst, np.linalg.norm(d - dv) / max(np.linalg.norm(d), 1.0))
            vals = G @ dv
            tol = active_tol(g_norms, np.linalg.norm(dv))
            if np.any(vals > 1.0 + tol):
                raise AssertionError("polar vertex violates a generator inequality")
            on = np.flatnonzero(np.abs(vals - 1.0) <= tol)
            if set(on.tolist()) != set(act.tolist()):
                raise AssertionError("active set does not match the tight generators")
        return worst


def init_polytope(extended_vertices, seed: int = 0) -> PolytopeState:
    """Simplex ``co{v_1..v_{n_u+1}}`` around the origin, with its polar."""
    V = np.asarray(extended_vertices, dtype=float)
    n1, n_u = V.shape
    if n1 != n_u + 1:
        raise ValueError(f"need {n_u + 1} points in dimension {n_u}, got {n1}")
    normals = []
    for j in range(n1):
        Yj = np.delete(V, j, axis=0)
        if np.linalg.cond(Yj) > COND_LIMIT:
            raise IllConditionedSimplex(f"facet opposite vertex {j} is (nearly) through the origin")
        normals.append(np.linalg.solve(Yj, np.ones(n_u)))
    # origin strictly inside: the vertex left out lies strictly below its facet
    for j, d in enumerate(normals):
        if not V[j] @ d < 1.0 - active_tol(np.linalg.norm(V[j]), np.linalg.norm(d)):
            raise InteriorPointInvalid("origin is not interior to the initial simplex")
    state = PolytopeState(n_u, capacity=max(256, 4 * n1), seed=seed)
    for v in V:
        state.add_generator(v)
    actives = np.array([[i for i in range(n1) if i != j] for j in range(n1)], dtype=np.int64)
    state._insert_vertices(np.array(normals), actives)
    return state


def cut_polar(state: PolytopeState, z_tilde, perturb: bool = True) -> np.ndarray:
    """Replace ``D`` by ``co(D u {z_tilde})`` in place; returns the new vertex ids.

    Raises ``NoOpCut`` when ``z_tilde`` already lies in ``D``. A point lying on
    the hyperplane of an existing facet is pulled towards the origin once by a
    deterministic amount just outside the active tolerance band.
    """
    z = np.asarray(z_tilde, dtype=float).copy()
    n = state.next_id
    alive = state.alive[:n]
    vals = state.normals_[:n] @ z
    tol = active_tol(np.linalg.norm(z), state.dnorm[:n])
    if not np.any(alive & (vals > 1.0 + tol)):
        raise NoOpCut("point lies inside the current polytope")
    near = alive & (np.abs(vals - 1.0) <= tol)
    if np.any(near):
        if not perturb:
            raise DegenerateVertex("new generator lies on an existing facet hyperplane")
        shrink = 1.0 - 100.0 * float(np.max(tol[near]))
        log.debug("perturbing degenerate cut point by factor %.3g", shrink)
        return cut_polar(state, z * shrink, perturb=False)

    removed = np.flatnonzero(alive & (vals > 1.0))
    kept_mask = alive & (vals < 1.0)
    g_new = state.n_generators
    systems, ends, status = _new_facet_systems(state.tab, state.meta, state.active, state.vhash,
                                               state._zob, removed, kept_mask, g_new)
    if status == 1:
        raise DegenerateVertex("polar edge with a single endpoint")
    if status == 2:
        raise DegenerateVertex("ridge hash collision")
    if len(systems) == 0:
        raise DegenerateVertex("cut removed polar vertices without creating any")

    # the new vertex is where the edge crosses z^T v = 1; z^T a > 1 > z^T b
    va, vb = vals[ends[:, 0]], vals[ends[:, 1]]
    t = (va - 1.0) / (va - vb)
    A, B = state.normals_[ends[:, 0]], state.normals_[ends[:, 1]]
    new_d = A + t[:, None] * (B - A)
    G = np.vstack([state.generators, z])
    resid = np.einsum("pkj,pj->pk", G[systems], new_d) - 1.0
    g_norms = np.linalg.norm(G, axis=1)
    d_norms = np.linalg.norm(new_d, axis=1)
    if np.any(np.abs(resid) > active_tol(g_norms[systems], d_norms[:, None])):
        raise DegenerateVertex("new polar vertex is off its active hyperplanes")
    if _violates(G, g_norms, new_d, d_norms):
        raise DegenerateVertex("new polar vertex violates a generator inequality")

    state.add_generator(z)
    _drop_vertices(state.tab, state.meta, state.active, state.vhash, state._zob, state.alive, removed)
    new_ids = state._insert_vertices(new_d, systems)
    state.cuts += 1
    if state.next_id > 4096 and state.next_id > 3 * state.n_vertices:
        first = state.n_vertices - len(new_ids)
        state.compact()
        new_ids = np.arange(first, state.n_vertices)
    return new_ids


def enumerate_polar_vertices(generators, tol: float = 1e-9) -> np.ndarray:
    """Brute-force vertices of ``{v : g^T v <= 1}`` over all ``n_u``-subsets."""
    G = np.asarray(generators, dtype=float)
    m, n_u = G.shape
    found = []
    for subset in itertools.combinations(range(m), n_u):
        A = G[list(subset)]
        if np.linalg.cond(A) > COND_LIMIT:
            continue
        d = np.linalg.solve(A, np.ones(n_u))
        if np.all(G @ d <= 1.0 + tol * (1.0 + np.linalg.norm(G, axis=1) * np.linalg.norm(d))):
            if not any(np.linalg.norm(d - f) <= 1e-9 * (1 + np.linalg.norm(d)) for f in found):
                found.append(d)
    return np.array(found).reshape(-1, n_u)
