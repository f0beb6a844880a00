import csv
import io

import numpy as np
import pytest

from conftest import make_trial
from uncpnp.bench import (CSV_FIELDS, LINE_METHODS, POINT_METHODS, NoiseSchedule, SceneSpec,
                          anisotropic_covariances, generate_trial, rotation_error, run_benchmark,
                          subset_index, translation_error, with_outliers, worker_count)
from uncpnp.geometry import project, random_rotation, so3_exp


def test_rotation_metric_examples(rng):
    R = random_rotation(rng)
    assert rotation_error(R, R) == 0.0
    for _ in range(20):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        R2 = R @ so3_exp(np.radians(10.0) * axis)
        assert abs(rotation_error(R, R2) - 10.0) < 1e-9
        assert abs(rotation_error(R2, R) - rotation_error(R, R2)) < 1e-12
    tiny = R @ so3_exp([1e-9, 0, 0])
    assert np.isclose(rotation_error(R, tiny), np.degrees(1e-9), rtol=1e-6)
    assert 0 <= rotation_error(R, R @ np.diag([1.0, -1.0, -1.0])) <= 180


def test_translation_metric_examples():
    t = np.array([0.3, -1.0, 6.0])
    assert translation_error(t, 1.05 * t) == pytest.approx(5.0, abs=1e-12)
    assert translation_error(t, t) == 0.0


def test_zero_noise_consistency():
    for m in (0, 5):
        tr = make_trial(20, m, mode="none", seed=1)
        c = tr.corr
        np.testing.assert_allclose(project(tr.pose.transform(c.X)), c.U, atol=1e-14)
        for A in (c.P, c.Q):
            ph = np.c_[project(tr.pose.transform(A)), np.ones(m)]
            assert np.all(np.abs(np.sum(ph * c.L, axis=1)) < 1e-12)
        assert np.all(tr.pose.transform(c.world_features())[:, 2] > 0)


def test_subset_schedule_bookkeeping():
    sched = NoiseSchedule()
    for n in (10, 23, 50):
        idx = subset_index(n, 10)
        assert idx[0] == 0 and idx[-1] == 9 and np.all(np.diff(idx) >= 0)
        rungs = np.linspace(1, 10, 10)
        np.testing.assert_allclose(sched.levels(n, "2d"), rungs[idx])
    tr = generate_trial(SceneSpec(n_points=20), sched, 3)
    # the largest principal std dev of feature i equals its rung
    s2 = np.sqrt(np.linalg.eigvalsh(tr.corr.Su)[:, -1]) * 800
    np.testing.assert_allclose(s2, sched.levels(20, "2d"), rtol=1e-10)
    s3 = np.sqrt(np.linalg.eigvalsh(tr.corr.Sx)[:, -1])
    np.testing.assert_allclose(s3, sched.levels(20, "3d"), rtol=1e-10)


def test_anisotropic_triplets(rng):
    covs = anisotropic_covariances(rng, np.full(500, 0.3), 3)
    ev = np.sqrt(np.linalg.eigvalsh(covs))
    assert np.allclose(ev[:, -1], 0.3) and np.all(ev[:, :2] > 0) and np.all(ev[:, :2] <= 0.3 + 1e-12)
    np.testing.assert_allclose(covs, np.swapaxes(covs, 1, 2), atol=1e-15)


def test_generator_sample_covariance():
    spec = SceneSpec(n_points=3, n_lines=2)
    sched = NoiseSchedule.for_mode("lines")
    base = generate_trial(spec, sched, 7, noise_seed=0)
    draws = [generate_trial(spec, sched, 7, noise_seed=k).corr for k in range(10_000)]
    X = np.array([c.X[1] for c in draws])
    U = np.array([c.U[2] for c in draws])
    P = np.array([c.P[0] for c in draws])
    for sample, cov in ((X, base.corr.Sx[1]), (U, base.corr.Su[2]), (P, base.corr.Sp[0])):
        emp = np.cov(sample.T)
        assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.05
    # the structure does not move with the noise seed
    np.testing.assert_array_equal(draws[0].Sx, draws[1].Sx)


def test_outliers_are_inconsistent():
    tr = make_trial(20, 0, mode="none", seed=2)
    tr2, mask = with_outliers(tr, 10, 3)
    assert mask.sum() == 20 and len(mask) == 30
    err = np.linalg.norm(project(tr.pose.transform(tr2.corr.X)) - tr2.corr.U, axis=1) * 800
    assert err[mask].max() < 1e-9 and np.median(err[~mask]) > 20


def test_zero_noise_benchmark_all_methods():
    methods = list(POINT_METHODS) + list(LINE_METHODS) + ["p3p", "ransac+epnpu+uncertain"]
    table = run_benchmark(methods, n_values=[12], trials=1, seed=4, mode="none", workers=1)
    for a in table.aggregate():
        assert a["failed"] == 0
        assert a["mean_e_rot_deg"] < 1e-6 and a["mean_e_trans_pct"] < 1e-6


def test_benchmark_deterministic_across_workers():
    kw = dict(methods=["epnpu", "dlsu*"], n_values=[10, 20], trials=3, seed=5, mode="3d")
    a = run_benchmark(workers=1, **kw).to_csv()
    b = run_benchmark(workers=2, **kw).to_csv()
    assert a == b


def test_table_and_aggregate_structure():
    t = run_benchmark(["epnp", "epnpu"], n_values=[10, 20], trials=4, seed=6, mode="2d", workers=1)
    rows = list(csv.DictReader(io.StringIO(t.to_csv())))
    assert list(rows[0].keys()) == CSV_FIELDS and len(rows) == 2 * 2 * 4
    agg = t.aggregate()
    assert len(agg) == 4 and all(a["trials"] == 4 for a in agg)
    c = t.cell("epnpu", 20)
    errs = [r["e_rot_deg"] for r in t.rows if r["method"] == "epnpu" and r["n_points"] == 20]
    assert c["mean_e_rot_deg"] == pytest.approx(np.mean(errs)) and c["median_e_rot_deg"] == pytest.approx(np.median(errs))


def test_failures_are_flagged_not_raised():
    t = run_benchmark(["epnpu", "no_such_solver"], n_values=[10], trials=2, seed=7, mode="2d", workers=1)
    bad = [r for r in t.rows if r["method"] == "no_such_solver"]
    assert all(r["flags"].startswith("failed:") for r in bad)
    agg = {a["method"]: a for a in t.aggregate()}
    assert agg["no_such_solver"]["failed"] == 2 and np.isnan(agg["no_such_solver"]["mean_e_rot_deg"])
    assert agg["epnpu"]["failed"] == 0


def test_lines_mode_adds_one_line_per_point():
    t = run_benchmark(["epnplu"], n_values=[10], trials=1, seed=8, mode="lines", workers=1)
    assert t.rows[0]["n_lines"] == 10


def test_worker_count_honours_env(monkeypatch):
    monkeypatch.setenv("UNCPNP_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.delenv("UNCPNP_THREADS")
    assert worker_count(3) == 3


def test_invalid_configuration():
    with pytest.raises(ValueError):
        SceneSpec(box=((-1, 1), (-1, 1), (-1, 4)))
    with pytest.raises(ValueError):
        NoiseSchedule(sigma2d_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        run_benchmark([], n_values=[10])
    with pytest.raises(ValueError):
        NoiseSchedule.for_mode("4d")
