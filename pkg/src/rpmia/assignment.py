"""Exact k-cardinality rectangular linear assignment.

Maximizes ``sum c_ij p_ij`` over partial matchings with exactly ``k`` pairs by
successive shortest paths on the flow network

    source -> rows (cap 1) -> columns (arc cost -c_ij) -> sink (cap 1)

using Dijkstra with node potentials. Each augmentation yields a min-cost flow
of the next value, so stopping after ``k`` augmentations is exact.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._accel import default_backend, njit
from .errors import InfeasibleCardinality, OracleTooLarge

BRUTE_FORCE_MAX_SIZE = 8


@dataclass(frozen=True)
class Correspondence:
    """Partial matching as a ``(k, 2)`` array of (model, scene) indices, 0-based,
    sorted by model index."""

    pairs: np.ndarray

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def key(self) -> tuple:
        return tuple(map(tuple, self.pairs.tolist()))

    def __eq__(self, other):
        return isinstance(other, Correspondence) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def flat_indices(self, n_y: int) -> np.ndarray:
        """Positions in ``vec(P)`` (row concatenation)."""
        return self.pairs[:, 0] * n_y + self.pairs[:, 1]

    def to_matrix(self, n_x: int, n_y: int) -> np.ndarray:
        P = np.zeros((n_x, n_y))
        P[self.pairs[:, 0], self.pairs[:, 1]] = 1.0
        return P

    def validate(self, n_x: int, n_y: int) -> None:
        rows, cols = self.pairs[:, 0], self.pairs[:, 1]
        if len(set(rows.tolist())) != len(rows) or len(set(cols.tolist())) != len(cols):
            raise ValueError("correspondence repeats a model or scene index")
        if len(rows) and (rows.min() < 0 or rows.max() >= n_x or cols.min() < 0 or cols.max() >= n_y):
            raise ValueError("correspondence index out of range")


@dataclass(frozen=True)
class AssignmentSolution:
    correspondence: Correspondence
    value: float

    @property
    def pairs(self) -> np.ndarray:
        return self.correspondence.pairs


def _check(cost, k):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost must be a non-empty matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    k = int(k)
    if not 1 <= k <= min(cost.shape):
        raise InfeasibleCardinality(f"k={k} outside [1, {min(cost.shape)}] for a {cost.shape[0]}x{cost.shape[1]} problem")
    return np.ascontiguousarray(cost), k


def _solution(cost, rows, cols) -> AssignmentSolution:
    corr = Correspondence(np.stack([rows, cols], axis=1))
    # fsum is correctly rounded, so equal pair sets always give equal values
    value = math.fsum(cost[corr.pairs[:, 0], corr.pairs[:, 1]].tolist())
    return AssignmentSolution(corr, value)


@njit
def _ssp_kernel(w, k):
    n_x, n_y = w.shape
    inf = np.inf
    row_match = np.full(n_x, -1, dtype=np.int64)
    col_match = np.full(n_y, -1, dtype=np.int64)
    # potentials start at exact shortest distances from the source
    pr = np.zeros(n_x)
    pc = np.empty(n_y)
    for j in range(n_y):
        m = w[0, j]
        for i in range(1, n_x):
            if w[i, j] < m:
                m = w[i, j]
        pc[j] = m
    pt = pc[0]
    for j in range(1, n_y):
        if pc[j] < pt:
            pt = pc[j]

    dr = np.empty(n_x)
    dc = np.empty(n_y)
    done_r = np.empty(n_x, dtype=np.bool_)
    done_c = np.empty(n_y, dtype=np.bool_)
    pred_c = np.empty(n_y, dtype=np.int64)
    for _ in range(k):
        for i in range(n_x):
            done_r[i] = False
            dr[i] = max(-pr[i], 0.0) if row_match[i] < 0 else inf
        for j in range(n_y):
            done_c[j] = False
            dc[j] = inf
            pred_c[j] = -1
        dt = inf
        tail = -1
        while True:
            bi = -1
            bv = inf
            for i in range(n_x):
                if not done_r[i] and dr[i] < bv:
                    bv = dr[i]
                    bi = i
            bj = -1
            bc = inf
            for j in range(n_y):
                if not done_c[j] and dc[j] < bc:
                    bc = dc[j]
                    bj = j
            if dt <= bv and dt <= bc:
                break
            if bv <= bc:
                done_r[bi] = True
                for j in range(n_y):
                    if done_c[j] or row_match[bi] == j:
                        continue
                    nd = dr[bi] + max(w[bi, j] + pr[bi] - pc[j], 0.0)
                    if nd < dc[j]:
                        dc[j] = nd
                        pred_c[j] = bi
            else:
                done_c[bj] = True
                i = col_match[bj]
                if i < 0:
                    nd = dc[bj] + max(pc[bj] - pt, 0.0)
                    if nd < dt:
                        dt = nd
                        tail = bj
                elif not done_r[i]:
                    nd = dc[bj] + max(pc[bj] - pr[i] - w[i, bj], 0.0)
                    if nd < dr[i]:
                        dr[i] = nd
        for i in range(n_x):
            pr[i] += min(dr[i], dt)
        for j in range(n_y):
            pc[j] += min(dc[j], dt)
        pt += dt
        j = tail
        while True:
            i = pred_c[j]
            nxt = row_match[i]
            row_match[i] = j
            col_match[j] = i
            if nxt < 0:
                break
            j = nxt
    return row_match


def _ssp_numpy(w, k):
    """Same algorithm as ``_ssp_kernel``, with the row relaxations vectorized."""
    n_x, n_y = w.shape
    inf = np.inf
    row_match = np.full(n_x, -1, dtype=np.int64)
    col_match = np.full(n_y, -1, dtype=np.int64)
    pr = np.zeros(n_x)
    pc = w.min(axis=0)
    pt = pc.min()
    cols = np.arange(n_y)
    for _ in range(k):
        dr = np.where(row_match < 0, np.maximum(-pr, 0.0), inf)
        dc = np.full(n_y, inf)
        pred_c = np.full(n_y, -1, dtype=np.int64)
        done_r = np.zeros(n_x, dtype=bool)
        done_c = np.zeros(n_y, dtype=bool)
        dt = inf
        tail = -1
        while True:
            open_r = np.where(done_r, inf, dr)
            open_c = np.where(done_c, inf, dc)
            bi = int(np.argmin(open_r))
            bj = int(np.argmin(open_c))
            bv, bc = open_r[bi], open_c[bj]
            if dt <= bv and dt <= bc:
                break
            if bv <= bc:
                done_r[bi] = True
                nd = dr[bi] + np.maximum(w[bi] + pr[bi] - pc, 0.0)
                upd = (nd < dc) & ~done_c & (cols != row_match[bi])
                dc[upd] = nd[upd]
                pred_c[upd] = bi
            else:
                done_c[bj] = True
                i = col_match[bj]
                if i < 0:
                    nd = dc[bj] + max(pc[bj] - pt, 0.0)
                    if nd < dt:
                        dt, tail = nd, bj
                elif not done_r[i]:
                    nd = dc[bj] + max(pc[bj] - pr[i] - w[i, bj], 0.0)
                    if nd < dr[i]:
                        dr[i] = nd
        pr += np.minimum(dr, dt)
        pc += np.minimum(dc, dt)
        pt += dt
        j = tail
        while True:
            i = pred_c[j]
            nxt = row_match[i]
            row_match[i] = j
            col_match[j] = i
            if nxt < 0:
                break
            j = nxt
    return row_match


@njit
def _ssp_batch_kernel(W, k):
    out = np.empty((W.shape[0], W.shape[1]), dtype=np.int64)
    for b in range(W.shape[0]):
        out[b] = _ssp_kernel(W[b], k)
    return out


def batch_row_matches(costs, k, backend: str | None = None) -> np.ndarray:
    """Solve many maximization problems of identical shape at once.

    ``costs`` has shape ``(m, n_x, n_y)``; returns ``(m, n_x)`` row matches
    (``-1`` for unmatched rows). No input validation beyond shapes: callers are
    internal and pass finite costs.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 3:
        raise ValueError("costs must have shape (m, n_x, n_y)")
    if not 1 <= k <= min(costs.shape[1:]):
        raise InfeasibleCardinality(f"k={k} outside [1, {min(costs.shape[1:])}]")
    backend = backend or default_backend()
    W = np.ascontiguousarray(-costs)
    if backend == "numba":
        return _ssp_batch_kernel(W, int(k))
    if backend == "numpy":
        return np.array([_ssp_numpy(w, int(k)) for w in W]).reshape(costs.shape[:2])
    raise ValueError(f"unknown backend {backend!r}")


def max_kcard_assignment(cost, k, backend: str | None = None) -> AssignmentSolution:
    """Maximize ``sum cost[i, j]`` over matchings of exactly ``k`` pairs.

    ``backend`` is ``"numba"`` or ``"numpy"``; the default follows the
    ``RPMIA_DISABLE_NUMBA`` switch.
    """
    cost, k = _check(cost, k)
    backend = backend or default_backend()
    w = -cost
    if backend == "numba":
        row_match = _ssp_kernel(w, k)
    elif backend == "numpy":
        row_match = _ssp_numpy(w, k)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    rows = np.flatnonzero(row_match >= 0)
    return _solution(cost, rows, row_match[rows])


def brute_force_assignment(cost, k) -> AssignmentSolution:
    """Exhaustive maximum over all k-row subsets and their column injections."""
    cost, k = _check(cost, k)
    n_x, n_y = cost.shape
    if max(n_x, n_y) > BRUTE_FORCE_MAX_SIZE:
        raise OracleTooLarge(f"brute force limited to {BRUTE_FORCE_MAX_SIZE}x{BRUTE_FORCE_MAX_SIZE}")
    perms = np.array(list(itertools.permutations(range(n_y), k)), dtype=np.int64)
    best_val, best = -np.inf, None
    for rows in itertools.combinations(range(n_x), k):
        rows = np.array(rows)
        sums = cost[rows[None, :], perms].sum(axis=1)
        a = int(np.argmax(sums))
        if sums[a] > best_val:
            best_val, best = sums[a], (rows, perms[a])
    sol = _solution(cost, *best)
    # rescan with exact sums so near-ties resolve the same way as fsum
    for rows in itertools.combinations(range(n_x), k):
        rows = np.array(rows)
        sums = cost[rows[None, :], perms].sum(axis=1)
        for a in np.flatnonzero(sums >= best_val - 1e-9 * (1 + abs(best_val))):
            cand = _solution(cost, rows, perms[a])
            if cand.value > sol.value:
                sol = cand
    return sol


def iter_matchings(n_x: int, n_y: int, k: int):
    """Yield every matching of exactly ``k`` pairs as a ``(k, 2)`` array."""
    for rows in itertools.combinations(range(n_x), k):
        for cols in itertools.permutations(range(n_y), k):
            yield np.column_stack([rows, cols])


def count_matchings(n_x: int, n_y: int, k: int) -> int:
    return math.comb(n_x, k) * math.perm(n_y, k)
