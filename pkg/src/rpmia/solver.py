"""Inner approximation driver for the reduced registration energy."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .assignment import (
    AssignmentSolution,
    batch_row_matches,
    count_matchings,
    iter_matchings,
    max_kcard_assignment,
)
from .errors import (
    DegenerateConfiguration,
    DegenerateFeasibleRegion,
    DegenerateVertex,
    NoOpCut,
    NotExtendable,
    OracleTooLarge,
    RegistrationError,
)
from .geometry import DEFAULT_T_CAP, PolytopeState, cut_polar, gamma_extension, init_polytope
from .objective import Correspondence, ReducedObjective, build_reduction, energy_p, in_psi
from .transform_models import ModelKind, solve_phi

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 100_000


class Status(str, Enum):
    CONVERGED = "Converged"
    ITERATION_CAP = "IterationCap"
    DEGENERATE = "Degenerate"


@dataclass
class SolverConfig:
    eps0: float = 0.3
    max_iterations: int = 10_000
    rng_seed: int = 0
    backend: str | None = None

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class SolverResult:
    correspondence: Correspondence
    phi: np.ndarray
    energy: float
    certificate_eps: float
    iterations: int
    status: Status
    n_u: int = 0
    lap_solves: int = 0
    n_generators: int = 0
    n_facets: int = 0
    runtime_seconds: float = 0.0
    incumbent_trace: list = field(default_factory=list)
    reduction: ReducedObjective | None = field(default=None, repr=False)
    polytope: PolytopeState | None = field(default=None, repr=False)


# The three helpers below use plain einsum loops so each row is computed the
# same way whatever the batch size: a facet value re-derived from a single
# solve is bit-identical to the cached one.

def lap_costs(red: ReducedObjective, D) -> np.ndarray:
    """Per-pair LAP costs ``Q d`` for each row ``d`` of ``D``, shape ``(m, n_x n_y)``."""
    return np.einsum("kj,mj->mk", red.Qw, np.atleast_2d(D))


def points_from_flat(red: ReducedObjective, flats) -> np.ndarray:
    """Shifted working coordinates ``Qw^T p - v0`` of matchings given by flat indices."""
    return np.einsum("mkj->mj", red.Qw[np.atleast_2d(flats)]) - red.v0


def facet_values(D, points) -> np.ndarray:
    return np.einsum("ij,ij->i", np.atleast_2d(D), np.atleast_2d(points))


def maximize_over_U(red: ReducedObjective, d, backend=None):
    """Maximize ``d^T u`` over the translated feasible set; returns the
    maximizer and the assignment that realizes it."""
    d = np.asarray(d, dtype=float)
    cost = lap_costs(red, d)[0].reshape(red.n_x, red.n_y)
    sol = max_kcard_assignment(cost, red.n_p, backend=backend)
    u = points_from_flat(red, sol.correspondence.flat_indices(red.n_y))[0]
    return u, sol


def maximize_over_U_batch(red: ReducedObjective, D, backend=None, chunk: int = 1024):
    """Row-wise ``maximize_over_U`` for a stack of directions ``D``.

    Returns the maximizers ``(m, n_u)`` and the witnesses as flat ``vec(P)``
    indices ``(m, n_p)``, ascending within each row.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    points = np.empty_like(D)
    flat = np.empty((len(D), red.n_p), dtype=np.int64)
    for s in range(0, len(D), chunk):
        Dc = D[s : s + chunk]
        costs = lap_costs(red, Dc).reshape(len(Dc), red.n_x, red.n_y)
        rm = batch_row_matches(costs, red.n_p, backend)
        b, i = np.nonzero(rm >= 0)
        f = (i * red.n_y + rm[b, i]).reshape(len(Dc), red.n_p)
        flat[s : s + chunk] = f
        points[s : s + chunk] = points_from_flat(red, f)
    return points, flat


def correspondence_from_flat(red: ReducedObjective, flat) -> Correspondence:
    flat = np.asarray(flat)
    return Correspondence(np.column_stack([flat // red.n_y, flat % red.n_y]))


def _affinely_independent(P: np.ndarray) -> bool:
    diffs = P[:-1] - P[-1]
    sv = np.linalg.svd(diffs, compute_uv=False)
    return sv[0] > 0 and sv[-1] > 1e-8 * sv[0]


def translate_coordinates(red: ReducedObjective, rng_seed: int = 0, backend=None):
    """Solve ``n_u + 1`` assignment problems, centre the frame on the centroid of
    their solutions and return ``(v0, vertices, witnesses)``.

    The directions are the unit vectors and ``-1``; if the solutions are
    affinely dependent, up to three seeded random direction sets are tried.
    """
    n_u = red.n_u
    red.v0 = np.zeros(n_u)
    rng = np.random.default_rng(rng_seed)
    H = np.vstack([np.eye(n_u), -np.ones(n_u)])
    for attempt in range(4):
        pts, wits = [], []
        for h in H:
            u, sol = maximize_over_U(red, h, backend)
            pts.append(u)
            wits.append(sol)
        P = np.array(pts)
        if _affinely_independent(P):
            break
        log.info("translation simplex degenerate (attempt %d), retrying with random directions", attempt)
        H = rng.normal(size=(n_u, n_u))
        H = np.vstack([H, -H.sum(axis=0)])
    else:
        raise DegenerateFeasibleRegion("assignment solutions do not span the reduced space")
    v0 = P.mean(axis=0)
    red.v0 = v0
    return v0, P - v0, wits


class _Incumbent:
    """Best matching seen so far, with a cache of energies keyed by witness."""

    def __init__(self, red: ReducedObjective):
        self.red = red
        self.cache: dict = {}
        self.energy = np.inf
        self.witness: np.ndarray | None = None
        self.trace: list = []

    def energy_of(self, flat: np.ndarray) -> float:
        key = flat.tobytes()
        e = self.cache.get(key)
        if e is None:
            try:
                e = energy_p(self.red, correspondence_from_flat(self.red, flat))
            except DegenerateConfiguration:
                e = np.inf
            self.cache[key] = e
        return e

    def offer(self, flat: np.ndarray, iteration: int) -> float:
        e = self.energy_of(flat)
        if e < self.energy:
            self.energy, self.witness = e, flat.copy()
            self.trace.append((iteration, e))
        return e

    def offer_many(self, flats: np.ndarray, iteration: int) -> None:
        flats = np.ascontiguousarray(flats)
        rows = flats.view(np.dtype((np.void, flats.dtype.itemsize * flats.shape[1]))).ravel()
        _, first = np.unique(rows, return_index=True)
        for i in np.sort(first):
            self.offer(flats[i], iteration)


def run_inner_approximation(X, Y, kind, n_p: int, config: SolverConfig | None = None,
                            red: ReducedObjective | None = None) -> SolverResult:
    """Epsilon-globally minimize the registration energy over all matchings of
    ``n_p`` pairs."""
    config = config or SolverConfig()
    kind = ModelKind.parse(kind)
    start = time.perf_counter()
    if red is None:
        red = build_reduction(X, Y, kind, n_p)
    n_u = red.n_u
    eps = n_u * config.eps0
    backend = config.backend

    v0, verts, wits = translate_coordinates(red, config.rng_seed, backend)
    inc = _Incumbent(red)
    energies = [inc.offer(w.correspondence.flat_indices(red.n_y), 0) for w in wits]
    gamma = inc.energy
    scale = float(np.max(np.linalg.norm(verts, axis=1)))

    extended = []
    for v, e in zip(verts, energies):
        try:
            theta = gamma_extension(red, v, gamma, t_cap=DEFAULT_T_CAP * scale / np.linalg.norm(v))
        except NotExtendable:
            theta = 1.0
        extended.append(theta * v)
    state = init_polytope(np.array(extended))
    lap_solves = len(wits)

    state.set_witness_width(red.n_p)
    fresh = state.live_ids()
    status = Status.ITERATION_CAP
    iteration = 0
    cert = np.inf
    while True:
        if len(fresh):
            D = state.normals_[fresh]
            points, flats = maximize_over_U_batch(red, D, backend)
            state.mu[fresh] = facet_values(D, points)
            state.points[fresh] = points
            state.witness[fresh] = flats
            lap_solves += len(fresh)
            inc.offer_many(flats, iteration)
        ids = state.live_ids()
        live = state.mu[ids]
        j = int(np.argmax(live))
        jstar = int(ids[j])
        cert = float(live[j]) - 1.0
        if cert <= eps:
            status = Status.CONVERGED
            break
        if iteration >= config.max_iterations:
            break
        z = state.points[jstar].copy()
        e_z = inc.energy_of(state.witness[jstar])
        gamma = min(e_z, inc.energy)
        try:
            theta = gamma_extension(red, z, gamma, t_cap=DEFAULT_T_CAP * scale / np.linalg.norm(z))
        except NotExtendable:
            theta = 1.0
        z_t = theta * z
        if not in_psi(red, z_t):
            raise AssertionError("expansion point left the concavity region")
        try:
            fresh = cut_polar(state, z_t)
        except (DegenerateVertex, NoOpCut) as exc:
            log.warning("stopping on degenerate polytope update: %s", exc)
            status = Status.DEGENERATE
            break
        iteration += 1
        if iteration % 100 == 0:
            log.debug("iter %d: facets=%d max mu-1=%.4g best=%.6g", iteration,
                      len(ids), cert, inc.energy)

    if inc.witness is None:
        raise RegistrationError("no feasible correspondence with a well-defined energy was found")
    corr = correspondence_from_flat(red, inc.witness)
    result = SolverResult(
        correspondence=corr,
        phi=solve_phi(kind, red.X, red.Y, corr.pairs),
        energy=inc.energy,
        certificate_eps=cert,
        iterations=iteration,
        status=status,
        n_u=n_u,
        lap_solves=lap_solves,
        n_generators=state.n_generators,
        n_facets=state.n_vertices,
        runtime_seconds=time.perf_counter() - start,
        incumbent_trace=inc.trace,
        reduction=red,
        polytope=state,
    )
    log.info("%s after %d iterations: E=%.6g, max mu-1=%.4g, %d facets, %.2fs", status.value,
             iteration, result.energy, cert, result.n_facets, result.runtime_seconds)
    return result


def recheck_facets(result: SolverResult, n_checks: int = 5, seed: int = 0, backend=None) -> list:
    """Re-solve the LAP for randomly chosen facets of a finished run.

    Returns ``(vertex id, cached mu, recomputed mu)`` triples; a sound
    certificate has the two values equal.
    """
    state, red = result.polytope, result.reduction
    ids = state.live_ids()
    rng = np.random.default_rng(seed)
    pick = rng.choice(ids, size=min(n_checks, len(ids)), replace=False)
    out = []
    for vid in pick:
        d = state.normals_[vid]
        u, _ = maximize_over_U(red, d, backend)
        out.append((int(vid), float(state.mu[vid]), float(facet_values(d, u)[0])))
    return out


def brute_force_register(X, Y, kind, n_p: int, red: ReducedObjective | None = None) -> SolverResult:
    """Exact global minimum by enumerating every matching of ``n_p`` pairs."""
    kind = ModelKind.parse(kind)
    start = time.perf_counter()
    if red is None:
        red = build_reduction(X, Y, kind, n_p)
    total = count_matchings(red.n_x, red.n_y, red.n_p)
    if total > BRUTE_FORCE_LIMIT:
        raise OracleTooLarge(f"{total} matchings exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    best_e, best = np.inf, None
    for pairs in iter_matchings(red.n_x, red.n_y, red.n_p):
        corr = Correspondence(pairs)
        try:
            e = energy_p(red, corr)
        except DegenerateConfiguration:
            continue
        if e < best_e:
            best_e, best = e, corr
    if best is None:
        raise DegenerateConfiguration("every matching is degenerate")
    return SolverResult(
        correspondence=best,
        phi=solve_phi(kind, red.X, red.Y, best.pairs),
        energy=best_e,
        certificate_eps=0.0,
        iterations=total,
        status=Status.CONVERGED,
        n_u=red.n_u,
        runtime_seconds=time.perf_counter() - start,
        reduction=red,
    )
