import itertools
import json

import numpy as np
import pytest

from negctrl.data import CategoricalCoding, Dataset
from negctrl.errors import NumericalError, ValidationError
from negctrl.estimators import (ROUTES, FitCache, NuisanceTheta, contributions, eif_bias,
                                eif_bias_binary, eif_terms, estimate, plugin_bias_direct,
                                reduction_check, report)
from negctrl.identify import DiscreteLaw, ObservedLaw, ate_by_identification


def _delta(law: ObservedLaw) -> float:
    return ate_by_identification(law).delta


def _mixed(law: ObservedLaw, cell, y, eps):
    """(1 - eps) P + eps * point mass at (cell, y)."""
    p = (1 - eps) * law.p_xazw
    p[cell] += eps
    num = (1 - eps) * law.p_xazw * law.ey_xazw
    num[cell] += eps * y
    return ObservedLaw(p, num / p, law.x_values, law.covariate_names)


def _richardson(f, h):
    d = lambda s: (f(s) - f(-s)) / (2 * s)  # noqa: E731
    return (4 * d(h / 2) - d(h)) / 3


def _one_row(cell, y, nz):
    _, a, z, w = cell
    coding = CategoricalCoding(tuple(f"l{i}" for i in range(nz)))
    return Dataset([y], [a], [z], [w], np.zeros((1, 0)), coding, coding)


@pytest.mark.parametrize("k,seed", [(1, 0), (1, 1), (2, 2)])
def test_eif_matches_gateaux_derivative(k, seed):
    rng = np.random.default_rng(seed)
    law = DiscreteLaw.random(rng, k + 1, k + 1, k + 1).observed()
    base = _delta(law)
    h = 1e-6
    cells = list(itertools.product(range(2), range(2), range(k + 1), range(k + 1)))
    for cell in [cells[i] for i in rng.choice(len(cells), 6, replace=False)]:
        y = float(rng.uniform(-1, 2))
        fd = _richardson(lambda e: _delta(_mixed(law, cell, y, e)), h)
        row = _one_row(cell, y, k + 1)
        nv = law.nuisance_values(np.array([cell[0]]))
        ours = eif_terms(row, nv).eif[0] - base
        assert ours == pytest.approx(fd, rel=1e-7, abs=1e-8)


def test_eif_has_exact_mean_zero(oracle_laws):
    used = 0
    for law, case in oracle_laws:
        s = case["sizes"]
        if not s["u"] == s["z"] == s["w"]:
            continue
        obs = law.observed()
        data, weights, xi = obs.cell_dataset()
        eif = eif_terms(data, obs.nuisance_values(xi)).eif
        assert abs(weights @ eif - law.latent_ate()) < 1e-12
        used += 1
    assert used >= 4


def test_binary_and_general_paths_agree():
    law = DiscreteLaw.random(np.random.default_rng(12), 2, 2, 2, n_x=3).observed()
    data, _, xi = law.cell_dataset()
    nv = law.nuisance_values(xi)
    gen = eif_terms(data, nv).bias
    assert np.abs(gen - eif_bias_binary(data, nv)).max() < 1e-12


def test_binary_path_needs_binary_controls(saturated_data, saturated_spec):
    from conftest import binary_covariate_data
    d3 = binary_covariate_data(n=1500, seed=3, n_levels=3)
    theta = FitCache(d3, saturated_spec).theta("mr")
    with pytest.raises(ValidationError, match="binary"):
        eif_bias(d3, theta, path="binary")


def test_saturated_estimators_coincide(saturated_data, saturated_spec):
    reps = estimate(saturated_data, saturated_spec)
    deltas = np.array([r.delta for r in reps])
    assert np.ptp(deltas) < 1e-9
    lo = np.array([r.ci[0] for r in reps])
    hi = np.array([r.ci[1] for r in reps])
    assert np.ptp(lo) < 1e-6 and np.ptp(hi) < 1e-6
    ident = ate_by_identification(ObservedLaw.from_dataset(saturated_data)).delta
    assert deltas[0] == pytest.approx(ident, abs=1e-9)


def test_reductions_hold_on_simulated_data(sim_data, correct_spec):
    theta = FitCache(sim_data, correct_spec).theta("mr")
    rep = reduction_check(sim_data, theta)
    assert rep.passed and rep.max_abs_diff < 1e-10
    assert set(rep.checks) == {"none", "delta1", "delta2", "delta3"}


def test_plugin_bias_direct_matches_bridge_route(sim_data, correct_spec):
    theta = FitCache(sim_data, correct_spec).theta("mle")
    conf, bias = contributions(sim_data, theta, "mle")
    # the bridge plug-in and the direct sum target the same bias term
    assert bias.mean() == pytest.approx(plugin_bias_direct(sim_data, theta).mean(), abs=1e-10)


def test_all_routes_reasonable_on_simulated_data(sim_data, correct_spec):
    reps = estimate(sim_data, correct_spec, inference=True)
    assert [r.estimator for r in reps] == list(ROUTES)
    for r in reps:
        assert abs(r.delta - 0.07) < 4 * r.se
        assert r.se_confounded > 0 and r.ci[0] < r.delta < r.ci[1]


def test_theta_round_trip(sim_data, correct_spec):
    theta = FitCache(sim_data, correct_spec).theta("mr")
    back = NuisanceTheta.from_dict(json.loads(json.dumps(theta.to_dict())))
    a = np.subtract(*contributions(sim_data, theta))
    b = np.subtract(*contributions(sim_data, back))
    assert np.array_equal(a, b)


def test_unknown_estimator_is_rejected(sim_data, correct_spec):
    with pytest.raises(ValidationError, match="unknown estimator"):
        estimate(sim_data, correct_spec, ["delta4"])


def test_density_floor_violation_is_reported(sim_data, correct_spec):
    theta = FitCache(sim_data, correct_spec).theta("delta1")
    with pytest.raises(NumericalError, match="floor|positivity"):
        report(sim_data, theta, "delta1", inference=False, floor=0.45)
