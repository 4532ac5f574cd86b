import numpy as np
import pytest

from rpmia.bench import (
    CSV_COLUMNS,
    SHAPES_2D,
    SHAPES_3D,
    TrialSpec,
    aggregate,
    derive_seeds,
    diameter,
    generate_trial,
    prototype,
    read_csv,
    rms_error,
    run_suite,
    write_csv,
)
from rpmia.errors import InvalidSpec
from rpmia.objective import build_reduction, energy_p
from rpmia.assignment import Correspondence
from rpmia.solver import SolverConfig
from rpmia.transform_models import apply


@pytest.mark.parametrize("shape", SHAPES_2D + SHAPES_3D)
def test_prototypes(shape):
    P = prototype(shape, 35)
    assert P.shape == (35, 3 if shape in SHAPES_3D else 2)
    assert len(np.unique(P.round(9), axis=0)) == 35
    assert diameter(P) > 0


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        TrialSpec(occlusion_fraction=1.0)
    with pytest.raises(InvalidSpec):
        TrialSpec(scale_range=(0.0, 1.0))
    with pytest.raises(InvalidSpec):
        TrialSpec(n_p_fraction=0.0)
    with pytest.raises(InvalidSpec):
        TrialSpec(shape="helix", kind="similarity2d")
    with pytest.raises(InvalidSpec):
        TrialSpec(shape="helix", kind="scale_translate3d", rotation="z")
    with pytest.raises(InvalidSpec):
        TrialSpec.from_dict({"shape": "star", "colour": "red"})
    with pytest.raises(InvalidSpec):
        generate_trial(TrialSpec(n_points=6, occlusion_fraction=0.9))


def test_fixed_seed_is_bit_identical():
    spec = TrialSpec(shape="star", n_outliers=5, occlusion_fraction=0.2, seed=42)
    a, b = generate_trial(spec), generate_trial(spec)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(a.truth.pairs, b.truth.pairs)
    c = generate_trial(TrialSpec(shape="star", n_outliers=5, occlusion_fraction=0.2, seed=43))
    assert not np.array_equal(a.X, c.X)


def test_occlusion_count():
    t = generate_trial(TrialSpec(shape="ellipse", n_points=40, occlusion_fraction=0.5, seed=1))
    assert len(t.X) == 20 and len(t.Y) == 40
    assert t.n_p == 20


def test_ground_truth_is_a_bijection_and_outliers_in_box():
    spec = TrialSpec(shape="spiral", n_points=30, n_outliers=15, occlusion_fraction=0.3, seed=5)
    t = generate_trial(spec)
    pairs = t.truth.pairs
    assert len(pairs) == len(t.X) == 21
    assert len(set(pairs[:, 0])) == len(set(pairs[:, 1])) == len(pairs)
    assert sorted(pairs[:, 0]) == list(range(len(t.X)))
    lo, hi = map(np.asarray, t.truth.outlier_box)
    outliers = np.delete(t.Y, pairs[:, 1], axis=0)
    # scene points outside the ground truth are the occluded inliers plus outliers
    assert len(outliers) == 15 + 9
    proto = prototype("spiral", 30)
    assert np.all((t.Y >= lo - 0.05) & (t.Y <= hi + 0.05))
    np.testing.assert_allclose(hi - lo, 1.5 * (proto.max(0) - proto.min(0)))


@pytest.mark.parametrize("kind,shape", [("similarity2d", "star"), ("affine2d", "ellipse"),
                                        ("scale_translate3d", "box_corner"), ("zrot_scale3d", "helix")])
def test_undisturbed_trial_is_exact(kind, shape):
    t = generate_trial(TrialSpec(shape=shape, kind=kind, noise_sigma=0.0, seed=3))
    assert rms_error(t.truth.phi, kind, t.truth.pairs, t.X, t.Y) < 1e-9 * t.truth.diameter
    red = build_reduction(t.X, t.Y, kind, t.n_p)
    assert abs(energy_p(red, Correspondence(t.truth.pairs))) < 1e-8 * t.truth.diameter ** 2 * t.n_p


def test_rms_examples():
    X = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
    shift = np.array([3.0, 4.0])
    pairs = np.column_stack([np.arange(3)] * 2)
    assert rms_error([1, 0, 0, 0], "similarity2d", pairs, X, X + shift) == pytest.approx(5 / np.sqrt(2))
    assert rms_error([1, 0, 3, 4], "similarity2d", pairs, X, X + shift) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InvalidSpec):
        rms_error([1, 0, 0, 0], "similarity2d", np.empty((0, 2)), X, X)


def test_rms_noise_monte_carlo():
    # per-coordinate rms of the generating map is sqrt(2) sigma: both sets carry noise
    sigma_rel = 0.02
    vals = []
    for s in range(100):
        t = generate_trial(TrialSpec(shape="star", noise_sigma=sigma_rel, seed=s))
        sigma = sigma_rel * t.truth.diameter
        scale = np.hypot(*t.truth.phi[:2])
        # the model noise is shrunk by the inverse map's scale
        expected = sigma * np.sqrt(1 + scale ** 2)
        vals.append(rms_error(t.truth.phi, "similarity2d", t.truth.pairs, t.X, t.Y) / expected)
    vals = np.array(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - 1.0) <= 3 * se + 0.01


def test_ground_truth_beats_perturbations(rng):
    t = generate_trial(TrialSpec(shape="ellipse", n_outliers=5, noise_sigma=0.01, seed=8))
    sigma = 0.01 * t.truth.diameter
    base = rms_error(t.truth.phi, "similarity2d", t.truth.pairs, t.X, t.Y)
    # perturb phi until the mapped inliers move by at least 10 sigma on average
    for _ in range(50):
        eta = rng.normal(size=4)
        eta /= np.linalg.norm(eta)
        step = 1e-3
        while True:
            moved = apply("similarity2d", t.truth.phi + step * eta, t.X) - apply("similarity2d", t.truth.phi, t.X)
            if np.sqrt(np.mean(moved ** 2)) >= 10 * sigma:
                break
            step *= 1.5
        assert base <= rms_error(t.truth.phi + step * eta, "similarity2d", t.truth.pairs, t.X, t.Y)


def test_derive_seeds():
    a = derive_seeds(7, 5)
    assert a == derive_seeds(7, 5) and len(set(a)) == 5
    assert derive_seeds(7, 3) == a[:3]
    assert derive_seeds(8, 5) != a


def small_specs():
    seeds = derive_seeds(11, 3)
    return [TrialSpec(shape=s, n_points=12, noise_sigma=0.0, seed=seeds[i], trial_id=i)
            for i, s in enumerate(SHAPES_2D)]


def test_zero_disturbance_suite_and_csv_roundtrip(tmp_path):
    results, summary = run_suite(small_specs(), SolverConfig(eps0=0.3))
    assert all(r.status == "Converged" for r in results)
    assert all(r.rms_error < 1e-6 * r.diameter for r in results)
    assert summary["n_trials"] == summary["n_completed"] == 3
    path = tmp_path / "trials.csv"
    write_csv(results, path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    back = read_csv(path)
    again = aggregate(back)
    for key in ("mean_rms_error", "median_rms_error", "mean_runtime_seconds", "median_runtime_seconds"):
        assert again[key] == pytest.approx(summary[key], rel=1e-12, abs=1e-300)
    assert again["status_counts"] == summary["status_counts"]

    # statistics do not depend on spec order, and reruns are deterministic
    rev, rsum = run_suite(small_specs()[::-1], SolverConfig(eps0=0.3))
    assert sorted((r.trial_id, r.energy, r.iterations) for r in rev) == \
        sorted((r.trial_id, r.energy, r.iterations) for r in results)
    assert rsum["median_rms_error"] == summary["median_rms_error"]
    assert rsum["mean_rms_error"] == pytest.approx(summary["mean_rms_error"], rel=1e-12)


def test_failed_trial_is_recorded():
    bad = TrialSpec(shape="star", n_points=12, seed=1)
    bad.occlusion_fraction = 0.95  # slips past construction-time validation
    results, summary = run_suite([bad])
    assert results[0].status == "Error:InvalidSpec"
    assert summary["n_completed"] == 0 and summary["median_rms_error"] is None
