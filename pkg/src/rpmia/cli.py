"""Command-line entry points: ``register``, ``bench`` and ``lap``.

Result JSON written by ``register`` (stable field set)::

    {
      "matches": [[model_index, scene_index], ...],   # 0-based
      "phi": [...],
      "energy": float,
      "certificate_eps": float,       # max mu - 1 at termination
      "iterations": int,
      "runtime_seconds": float,
      "status": "Converged" | "IterationCap" | "Degenerate",
      "config": {"model": str, "scene": str, "kind": str, "n_p": int,
                 "eps0": float, "max_iterations": int, "seed": int}
    }

Exit codes: 0 converged (or success), 2 iteration cap reached, 1 error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from .assignment import BRUTE_FORCE_MAX_SIZE, brute_force_assignment, max_kcard_assignment
from .bench import TrialSpec, run_suite, write_csv, write_summary
from .errors import InputError, InvalidSpec, RegistrationError
from .solver import SolverConfig, Status, run_inner_approximation
from .transform_models import ModelKind

log = logging.getLogger("rpmia")

EXIT_OK, EXIT_ERROR, EXIT_CAP = 0, 1, 2
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}
_SPLIT = re.compile(r"[,\s]+")


def read_points(path) -> np.ndarray:
    """One point per line, comma or whitespace separated, ``#`` lines skipped.
    The dimension comes from the first data line."""
    rows = []
    dim = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in _SPLIT.split(line) if v]
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric coordinate") from None
        if dim is None:
            dim = len(vals)
        elif len(vals) != dim:
            raise InputError(f"{path}:{lineno}: expected {dim} coordinates, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no points")
    return np.array(rows)


def resolve_n_p(n_p: float, n_x: int, n_y: int) -> int:
    """Values below 1 are a fraction of ``min(n_x, n_y)`` (floored); others a count."""
    if not n_p > 0:
        raise InputError("--np must be positive")
    if n_p < 1:
        return int(math.floor(n_p * min(n_x, n_y) + 1e-9))
    if n_p != int(n_p):
        raise InputError("--np of at least 1 must be an integer count")
    return int(n_p)


def read_cost_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric entry") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: cost matrix must be a non-empty rectangle")
    return np.array(rows)


# -- commands -----------------------------------------------------------------

def cmd_register(args) -> int:
    kind = ModelKind.parse(args.kind)
    X = read_points(args.model)
    Y = read_points(args.scene)
    for name, P in (("model", X), ("scene", Y)):
        if P.shape[1] != kind.n_d:
            raise InputError(f"{name} points are {P.shape[1]}D but {kind.value} needs {kind.n_d}D")
    n_p = resolve_n_p(args.np, len(X), len(Y))
    config = SolverConfig(eps0=args.eps0, max_iterations=args.max_iters, rng_seed=args.seed)
    res = run_inner_approximation(X, Y, kind, n_p, config)
    doc = {
        "matches": res.correspondence.pairs.tolist(),
        "phi": res.phi.tolist(),
        "energy": res.energy,
        "certificate_eps": res.certificate_eps,
        "iterations": res.iterations,
        "runtime_seconds": res.runtime_seconds,
        "status": res.status.value,
        "config": {"model": str(args.model), "scene": str(args.scene), "kind": kind.value, "n_p": n_p,
                   "eps0": args.eps0, "max_iterations": args.max_iters, "seed": args.seed},
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_CAP if res.status is Status.ITERATION_CAP else EXIT_OK


def load_suite(path):
    """Parse a suite config: ``{"trials": [...], "solver": {...}}`` or a bare trial list."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: malformed JSON ({exc})") from None
    if isinstance(doc, list):
        doc = {"trials": doc}
    if not isinstance(doc, dict) or not isinstance(doc.get("trials", []), list):
        raise InvalidSpec("config must be a trial list or an object with a 'trials' list")
    extra = sorted(set(doc) - {"trials", "solver"})
    if extra:
        raise InvalidSpec(f"unknown top-level field(s): {', '.join(extra)}")
    specs = []
    for i, t in enumerate(doc.get("trials", [])):
        if not isinstance(t, dict):
            raise InvalidSpec(f"trials[{i}]: expected an object")
        t = dict(t)
        t.setdefault("trial_id", i)
        try:
            specs.append(TrialSpec.from_dict(t))
        except (InvalidSpec, InputError) as exc:
            raise InvalidSpec(f"trials[{i}].{exc}") from None
    solver = doc.get("solver", {})
    allowed = {"eps0", "max_iterations", "rng_seed"}
    if not isinstance(solver, dict) or set(solver) - allowed:
        raise InvalidSpec(f"solver: allowed fields are {sorted(allowed)}")
    try:
        config = SolverConfig(**solver)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"solver: {exc}") from None
    return specs, config


def cmd_bench(args) -> int:
    specs, config = load_suite(args.config)
    if args.eps0 is not None:
        config.eps0 = args.eps0
    if args.max_iters is not None:
        config.max_iterations = args.max_iters
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or os.cpu_count() or 1
    results, summary = run_suite(specs, config, jobs=jobs)
    write_csv(results, out / "trials.csv")
    write_summary(summary, out / "summary.json", config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_lap(args) -> int:
    cost = read_cost_csv(args.cost)
    sol = max_kcard_assignment(cost, args.k)
    for i, j in sol.pairs:
        print(f"{i + 1} {j + 1}")
    print(f"objective {sol.value!r}")
    if max(cost.shape) <= BRUTE_FORCE_MAX_SIZE:
        ref = brute_force_assignment(cost, args.k)
        agree = ref.value == sol.value
        print(f"oracle {'agrees' if agree else 'DISAGREES'} (objective {ref.value!r})")
        if not agree:
            return EXIT_ERROR
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpmia", description="Globally optimal robust point matching.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register a model point file onto a scene point file")
    r.add_argument("--model", required=True, help="model point file")
    r.add_argument("--scene", required=True, help="scene point file")
    r.add_argument("--kind", required=True, help="similarity2d | affine2d | scale-translate3d | zrot-scale3d")
    r.add_argument("--np", type=float, required=True, help="match count, or a fraction of min(n_x, n_y) if < 1")
    r.add_argument("--eps0", type=float, default=0.3)
    r.add_argument("--max-iters", type=int, default=10_000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="result JSON path (stdout if omitted)")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("bench", help="run a synthetic trial suite")
    b.add_argument("config", help="suite config JSON")
    b.add_argument("--out", required=True, help="output directory for trials.csv and summary.json")
    b.add_argument("--jobs", type=int, default=None, help="worker processes (default: all processors)")
    b.add_argument("--eps0", type=float, default=None)
    b.add_argument("--max-iters", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("lap", help="solve a k-cardinality assignment from a cost CSV (maximization)")
    a.add_argument("cost", help="rectangular comma-separated cost matrix")
    a.add_argument("k", type=int)
    a.set_defaults(func=cmd_lap)
    return p


def _configure_logging():
    name = os.environ.get("RPM_LOG_LEVEL", "warn").strip().lower()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(_LEVELS.get(name, logging.WARNING))


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RegistrationError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
