"""Synthetic outlier / occlusion experiments and the registration error metric.

A trial takes a prototype shape as the scene, adds uniform outliers and noise,
and builds the model by transforming the prototype, cutting away the points
beyond a random half-plane and adding noise. Ground truth is the surviving
inlier pairing and the parameters that map the clean model onto the scene.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .solver import SolverConfig, run_inner_approximation
from .transform_models import ModelKind, apply, solve_phi

log = logging.getLogger(__name__)

SHAPES_2D = ("ellipse", "star", "spiral")
SHAPES_3D = ("helix", "box_corner")
RMS_NORMALIZATION = "per-coordinate: sqrt(sum ||T(x_i) - y_j||^2 / (m * n_d))"

CSV_COLUMNS = (
    "trial_id", "shape", "n_outliers", "occlusion_fraction", "n_p",
    "rms_error", "energy", "iterations", "runtime_seconds", "status",
)


# -- prototype shapes --------------------------------------------------------

def prototype(shape: str, n_points: int = 30) -> np.ndarray:
    """Procedural point set, ordered along the curve.

    Every shape is free of self-similarities that its transformation family
    could exploit (a symmetric shape would make the ground-truth pairing
    ambiguous): the ellipse is sampled unevenly, the star has unequal arms and
    the helix is conical.
    """
    if n_points < 3:
        raise InvalidSpec("a prototype needs at least 3 points")
    n = n_points
    if shape == "ellipse":
        s = np.arange(n) / n
        t = 2 * np.pi * (s + 0.1 * np.sin(2 * np.pi * s))
        return np.column_stack([np.cos(t), 0.6 * np.sin(t)])
    if shape == "star":
        # five-pointed star outline, resampled uniformly by arc length
        k = np.arange(10)
        r = np.array([1.0, 0.45, 0.8, 0.4, 0.95, 0.5, 0.7, 0.42, 0.88, 0.47])
        corners = np.column_stack([r * np.sin(np.pi * k / 5), r * np.cos(np.pi * k / 5)])
        return _resample_closed(corners, n)
    if shape == "spiral":
        t = np.linspace(0.0, 1.0, n)
        ang = 3.2 * np.pi * t
        rad = 0.15 + 0.85 * t
        return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    if shape == "helix":
        t = np.linspace(0.0, 1.0, n)
        ang = 4 * np.pi * t
        r = 0.6 + 0.4 * t
        return np.column_stack([r * np.cos(ang), r * np.sin(ang), 2.0 * t - 1.0])
    if shape == "box_corner":
        # three orthogonal edges from a common corner, walked as one path
        per = n // 3
        rest = n - 3 * per
        counts = [per + (1 if i < rest else 0) for i in range(3)]
        segs = []
        for axis, c in enumerate(counts):
            s = np.zeros((c, 3))
            s[:, axis] = np.linspace(0.0 if axis == 0 else 1.0 / c, 1.0, c)
            if axis == 1:
                s = s[::-1]
            segs.append(s)
        pts = np.vstack(segs)
        # bend the far ends so no two edges are related by a coordinate swap
        pts[:, 0] += 0.3 * pts[:, 2] ** 2
        pts[:, 1] += 0.2 * pts[:, 0] * pts[:, 2]
        return pts
    raise InvalidSpec(f"unknown shape {shape!r} (expected one of {SHAPES_2D + SHAPES_3D})")


def _resample_closed(corners: np.ndarray, n: int) -> np.ndarray:
    loop = np.vstack([corners, corners[:1]])
    seg = np.linalg.norm(np.diff(loop, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = cum[-1] * np.arange(n) / n
    return np.column_stack([np.interp(s, cum, loop[:, d]) for d in range(loop.shape[1])])


def diameter(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))


# -- trials -------------------------------------------------------------------

_DEFAULT_ROTATION = {
    ModelKind.SIMILARITY2D: "full",
    ModelKind.AFFINE2D: "full",
    ModelKind.SCALE_TRANSLATE3D: "none",
    ModelKind.ZROT_SCALE3D: "z",
}


@dataclass
class TrialSpec:
    shape: str = "ellipse"
    n_points: int = 30
    n_outliers: int = 0
    occlusion_fraction: float = 0.0
    rotation: str | None = None
    scale_range: tuple = (0.5, 1.5)
    translation_scale: float = 1.0
    noise_sigma: float = 0.01
    seed: int = 0
    n_p_fraction: float = 1.0
    kind: str = "similarity2d"
    trial_id: int = 0

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind).value
        if self.rotation is None:
            self.rotation = _DEFAULT_ROTATION[ModelKind(self.kind)]
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.validate()

    def validate(self):
        kind = ModelKind(self.kind)
        dim3 = self.shape in SHAPES_3D
        if self.shape not in SHAPES_2D + SHAPES_3D:
            raise InvalidSpec(f"shape: unknown shape {self.shape!r}")
        if dim3 != (kind.n_d == 3):
            raise InvalidSpec(f"shape: {self.shape!r} does not match the dimension of {self.kind}")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise InvalidSpec("occlusion_fraction: must lie in [0, 1)")
        if len(self.scale_range) != 2 or not 0.0 < self.scale_range[0] <= self.scale_range[1]:
            raise InvalidSpec("scale_range: must be a positive interval (lo, hi)")
        if not 0.0 < self.n_p_fraction <= 1.0:
            raise InvalidSpec("n_p_fraction: must lie in (0, 1]")
        if self.n_outliers < 0 or self.noise_sigma < 0 or self.translation_scale < 0:
            raise InvalidSpec("n_outliers, noise_sigma and translation_scale must be non-negative")
        allowed = ("full", "none") if kind.n_d == 2 else ("z", "none")
        if self.rotation not in allowed:
            raise InvalidSpec(f"rotation: expected one of {allowed} for {self.kind}")
        if self.rotation == "z" and kind is ModelKind.SCALE_TRANSLATE3D:
            raise InvalidSpec("rotation: scale_translate3d cannot represent a rotation")

    @classmethod
    def from_dict(cls, d: dict) -> "TrialSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidSpec(f"unknown trial field(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None


@dataclass
class GroundTruth:
    pairs: np.ndarray
    phi: np.ndarray
    diameter: float
    outlier_box: tuple


@dataclass
class Trial:
    X: np.ndarray
    Y: np.ndarray
    truth: GroundTruth
    n_p: int


def _rotation(kind: ModelKind, rule: str, rng) -> np.ndarray:
    if rule == "none":
        return np.eye(kind.n_d)
    a = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(a), np.sin(a)
    R = np.eye(kind.n_d)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def _scales(kind: ModelKind, lo: float, hi: float, rng) -> np.ndarray:
    if kind is ModelKind.SCALE_TRANSLATE3D:
        return rng.uniform(lo, hi, size=3)
    if kind is ModelKind.ZROT_SCALE3D:
        s, sz = rng.uniform(lo, hi, size=2)
        return np.array([s, s, sz])
    return np.full(kind.n_d, rng.uniform(lo, hi))


def generate_trial(spec: TrialSpec) -> Trial:
    """Scene, model and ground truth for one trial; deterministic in ``spec.seed``."""
    spec.validate()
    kind = ModelKind(spec.kind)
    rng = np.random.default_rng(spec.seed)
    proto = prototype(spec.shape, spec.n_points)
    n, n_d = proto.shape
    diam = diameter(proto)
    sigma = spec.noise_sigma * diam

    # model: transform, then drop the points furthest along a random direction
    A = _rotation(kind, spec.rotation, rng) * _scales(kind, *spec.scale_range, rng)[None, :]
    t = rng.uniform(-1.0, 1.0, size=n_d) * spec.translation_scale * diam
    model_clean = proto @ A.T + t
    n_drop = int(round(spec.occlusion_fraction * n))
    direction = rng.normal(size=n_d)
    order = np.argsort(proto @ direction, kind="stable")
    inliers = np.sort(order[: n - n_drop])
    if len(inliers) < kind.min_matches:
        raise InvalidSpec(f"occlusion leaves {len(inliers)} inliers, fewer than {kind.min_matches}")

    lo, hi = proto.min(axis=0), proto.max(axis=0)
    centre, half = (lo + hi) / 2, 1.5 * (hi - lo) / 2
    box = (centre - half, centre + half)
    outliers = rng.uniform(box[0], box[1], size=(spec.n_outliers, n_d))

    scene = np.vstack([proto + sigma * rng.normal(size=proto.shape), outliers])
    model = model_clean[inliers] + sigma * rng.normal(size=(len(inliers), n_d))
    y_perm = rng.permutation(len(scene))
    x_perm = rng.permutation(len(model))
    Y = scene[y_perm]
    X = model[x_perm]
    # position of each prototype index in the shuffled scene / model
    y_pos = np.argsort(y_perm)
    x_pos = np.argsort(x_perm)
    pairs = np.column_stack([x_pos, y_pos[inliers]])
    pairs = pairs[np.argsort(pairs[:, 0])]
    # exact inverse of the generating map, expressed in the family's parameters
    idx = np.arange(len(inliers))
    phi = solve_phi(kind, model_clean[inliers], proto[inliers], np.column_stack([idx, idx]))
    n_p = max(kind.min_matches, int(math.floor(spec.n_p_fraction * len(inliers) + 1e-9)))
    return Trial(X, Y, GroundTruth(pairs, phi, diam, (box[0].tolist(), box[1].tolist())), n_p)


def rms_error(phi, kind, inlier_pairs, X, Y) -> float:
    """Root mean squared coordinate difference over the ground-truth pairs."""
    kind = ModelKind.parse(kind)
    pairs = np.asarray(inlier_pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise InvalidSpec("rms_error needs at least one inlier pair")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    diff = apply(kind, phi, X[pairs[:, 0]]) - Y[pairs[:, 1]]
    return float(np.sqrt(np.sum(diff * diff) / (len(pairs) * kind.n_d)))


# -- suites ------------------------------------------------------------------

@dataclass
class TrialResult:
    trial_id: int
    shape: str
    n_outliers: int
    occlusion_fraction: float
    n_p: int
    rms_error: float
    energy: float
    iterations: int
    runtime_seconds: float
    status: str
    diameter: float = float("nan")
    certificate_eps: float = float("nan")
    solver: object = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def derive_seeds(suite_seed: int, n_trials: int) -> list[int]:
    """Independent per-trial seeds from (suite seed, trial index)."""
    return [int(np.random.SeedSequence([suite_seed, i]).generate_state(1)[0]) for i in range(n_trials)]


def run_trial(spec: TrialSpec, config: SolverConfig | None = None, keep_solver: bool = False) -> TrialResult:
    config = config or SolverConfig()
    base = dict(trial_id=spec.trial_id, shape=spec.shape, n_outliers=spec.n_outliers,
                occlusion_fraction=spec.occlusion_fraction)
    start = time.perf_counter()
    try:
        trial = generate_trial(spec)
        res = run_inner_approximation(trial.X, trial.Y, spec.kind, trial.n_p, config)
        err = rms_error(res.phi, spec.kind, trial.truth.pairs, trial.X, trial.Y)
    except Exception as exc:  # a failed trial is reported, never fatal to the suite
        log.warning("trial %s failed: %s: %s", spec.trial_id, type(exc).__name__, exc)
        return TrialResult(**base, n_p=0, rms_error=float("nan"), energy=float("nan"), iterations=0,
                           runtime_seconds=time.perf_counter() - start,
                           status=f"Error:{type(exc).__name__}")
    return TrialResult(**base, n_p=trial.n_p, rms_error=err, energy=res.energy,
                       iterations=res.iterations, runtime_seconds=res.runtime_seconds,
                       status=res.status.value, diameter=trial.truth.diameter,
                       certificate_eps=res.certificate_eps, solver=res if keep_solver else None)


def _run_one(args):
    spec, config = args
    return run_trial(spec, config)


def aggregate(results) -> dict:
    ok = [r for r in results if not r.status.startswith("Error")]
    errs = [r.rms_error for r in ok]
    times = [r.runtime_seconds for r in ok]
    status_counts: dict = {}
    for r in results:
        status_counts[r.status] = status_counts.get(r.status, 0) + 1

    def stat(fn, xs):
        return fn(xs) if xs else None

    return {
        "n_trials": len(results),
        "n_completed": len(ok),
        "status_counts": status_counts,
        "mean_rms_error": stat(statistics.fmean, errs),
        "median_rms_error": stat(statistics.median, errs),
        "mean_runtime_seconds": stat(statistics.fmean, times),
        "median_runtime_seconds": stat(statistics.median, times),
        "rms_normalization": RMS_NORMALIZATION,
    }


def run_suite(specs, config: SolverConfig | None = None, jobs: int = 1, keep_solver: bool = False):
    """Run every trial and return ``(results, aggregate)``; results follow ``specs`` order."""
    specs = list(specs)
    config = config or SolverConfig()
    if jobs > 1 and len(specs) > 1 and not keep_solver:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [(s, config) for s in specs]))
    else:
        results = [run_trial(s, config, keep_solver) for s in specs]
    return results, aggregate(results)


def write_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def read_csv(path) -> list[TrialResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrialResult(
                trial_id=int(row["trial_id"]), shape=row["shape"], n_outliers=int(row["n_outliers"]),
                occlusion_fraction=float(row["occlusion_fraction"]), n_p=int(row["n_p"]),
                rms_error=float(row["rms_error"]), energy=float(row["energy"]),
                iterations=int(row["iterations"]), runtime_seconds=float(row["runtime_seconds"]),
                status=row["status"],
            ))
    return out


def write_summary(summary: dict, path, config: SolverConfig | None = None) -> None:
    doc = dict(summary)
    if config is not None:
        doc["config"] = asdict(config)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
