import math

import numpy as np
import pytest
from scipy.special import expit

from negctrl.errors import NumericalError, ValidationError
from negctrl.simulate import (COVARIATES, DgpSpec, ReplicationRow, _design, _rng,
                              generate_dataset, run_replication, run_study,
                              scenario_model_specs, summarize, true_ate_oracle,
                              vaccine_style_dataset)


def test_generation_is_deterministic():
    a = generate_dataset(DgpSpec(n=300, seed=9)).data
    b = generate_dataset(DgpSpec(n=300, seed=9)).data
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)
    c = generate_dataset(DgpSpec(n=300), _rng(9, 1)).data
    assert not np.array_equal(a.y, c.y)
    assert a.covariate_names == COVARIATES


def test_implied_contrasts_at_large_n():
    s = generate_dataset(DgpSpec(n=1_000_000, seed=5))
    d, u = s.data, s.latent_u
    base = expit(-1.0 + _design(d.x) @ np.full(9, -0.1))
    w_res = d.gamma_w[:, 0] - base
    y_res = d.y - base
    for a in (0, 1):
        for z in (0, 1):
            cell = (d.a == a) & (d.zc == z)
            assert u[cell].mean() == pytest.approx(0.4 * z + 0.4 * a * z, abs=0.005)
            assert w_res[cell].mean() == pytest.approx(0.2 * z + 0.2 * a * z, abs=0.005)
            assert y_res[cell].mean() == pytest.approx(0.1 * a * z + 0.1 * a * z * a, abs=0.005)


def test_ate_oracle():
    value, mcse = true_ate_oracle()
    assert value == pytest.approx(0.07, abs=0.002)
    assert mcse < 1e-4
    s = generate_dataset(DgpSpec(n=1_000_000, seed=6))
    assert 0.25 * s.latent_u.mean() == pytest.approx(value, abs=4 * 0.25 * 0.46 / 1000)
    with pytest.raises(ValidationError, match="10\\^6"):
        true_ate_oracle(precision_n=1000)


def test_scenario_specs_differ_only_where_intended():
    good = scenario_model_specs("all_correct")
    assert scenario_model_specs("m1_only").waz is None
    assert scenario_model_specs("m2_only").r == ()
    m3 = scenario_model_specs("m3_only")
    assert "X7*X8" not in m3.z and m3.y == good.y
    wrong = scenario_model_specs("all_wrong")
    assert "X7*X8" not in wrong.z and "X7*X8" not in wrong.y
    with pytest.raises(ValidationError, match="unknown scenario"):
        scenario_model_specs("m4_only")


def test_dgp_guards():
    with pytest.raises(ValidationError):
        DgpSpec(n=0)
    with pytest.raises(NumericalError, match="U outside"):
        generate_dataset(DgpSpec(n=100, u_z=0.8, u_az=0.8))


def _rows(values, estimator="mr", failed=()):
    return [ReplicationRow(i, estimator, math.nan if i in failed else v, 0.01,
                           int(abs(v - 0.07) < 0.02), int(i in failed))
            for i, v in enumerate(values)]


def test_trimmed_summary_arithmetic():
    rng = np.random.default_rng(0)
    vals = 0.07 + 0.01 * rng.standard_normal(400)
    vals[5], vals[17] = 5.0, -5.0
    s = summarize(_rows(vals), "mr", 0.07)
    kept = np.sort(vals)[2:-2]
    assert s.reps_after_trim == 396 and s.reps_succeeded == 400
    assert s.bias == pytest.approx(kept.mean() - 0.07, abs=1e-15)
    assert s.variance == pytest.approx(kept.var(), abs=1e-15)
    assert s.mse == pytest.approx(s.bias ** 2 + s.variance, abs=1e-15)
    assert s.proportion_bias == pytest.approx(100 * s.bias / 0.07)
    assert s.coverage == pytest.approx(np.mean(np.abs(vals - 0.07) < 0.02))


def test_failed_replications_are_excluded_and_counted():
    vals = np.full(100, 0.07)
    s = summarize(_rows(vals, failed={3, 4}), "mr", 0.07)
    assert s.failures == 2 and s.reps_succeeded == 98


def test_replication_runs_every_estimator():
    rows = run_replication(0, "all_correct", 800, 1, ("mr", "delta3"), 0.07, dgp=DgpSpec())
    assert [r.estimator for r in rows] == ["mr", "delta3"]
    assert all(not r.failed and r.se > 0 for r in rows)


def test_small_study_is_reproducible(tmp_path):
    a = run_study("all_correct", reps=3, n=600, base_seed=11, estimators=("mr",), true_ate=0.07)
    b = run_study("all_correct", reps=3, n=600, base_seed=11, estimators=("mr",), true_ate=0.07)
    assert a.raw_tsv() == b.raw_tsv() and a.table_tsv() == b.table_tsv()
    paths = a.write(tmp_path / "out", "json")
    assert [p.name for p in paths] == ["out.raw.tsv", "out.json"]
    assert a.metadata["base_seed"] == 11 and a.metadata["reps"] == 3


def test_study_argument_checks():
    with pytest.raises(ValidationError, match="reps"):
        run_study("all_correct", reps=0)
    with pytest.raises(ValidationError, match="unknown estimator"):
        run_study("all_correct", reps=1, estimators=("ols",))


def test_study_aborts_when_too_many_replications_fail(monkeypatch):
    import negctrl.simulate as sim

    real = sim.FitCache

    def sometimes(data, spec):
        if data.y[0] == 1:
            raise NumericalError("forced failure")
        return real(data, spec)

    monkeypatch.setattr(sim, "FitCache", sometimes)
    with pytest.raises(NumericalError, match="replications of mr failed"):
        run_study("all_correct", reps=8, n=300, estimators=("mr",), true_ate=0.07)


def test_vaccine_dataset_shape():
    d = vaccine_style_dataset(n=500)
    assert d.n == 500 and d.n_z == d.n_w == 2
    assert d.covariate_names == ("age65", "chronic")
