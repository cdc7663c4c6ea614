import warnings

import numpy as np
import pytest

from negctrl.data import ModelSpec
from negctrl.errors import NumericalError, ValidationError
from negctrl.gestimation import (ContrastSet, check_xi_invertible, default_index_functions,
                                 fit_w_joint, gest_r_m1, gest_r_m3, gest_w_m2, m1_moments,
                                 m2_moments, r_contrast_moments, solve_r_contrast,
                                 solve_w_contrasts, w_contrast_moments)
from negctrl.nuisance import fit_baseline_nco, fit_baseline_outcome, fit_joint_exposure
from negctrl.simulate import DgpSpec, generate_dataset, scenario_model_specs

from conftest import binary_covariate_data

# With U | A, Z ~ Bern(0.4 Z + 0.4 A Z), W shifted by 0.5 U and Y by 0.25 A U:
# E[W | A, Z, X] moves by 0.2 Z + 0.2 A Z, and R(a) = 0.25 a / 0.5 = 0.5 a.
TRUE_BW = np.array([0.0, 0.2, 0.2])
TRUE_BR = np.array([0.0, 0.5])


@pytest.fixture(scope="module")
def big_sample():
    return generate_dataset(DgpSpec(n=100_000), np.random.default_rng(90210)).data


def test_w_contrasts_exposure_route_at_large_n(big_sample):
    spec = scenario_model_specs("m2_only")
    exposure = fit_joint_exposure(big_sample, spec)
    cs = gest_w_m2(big_sample, exposure, spec)
    assert cs.bw.shape == (1, 3)
    assert np.abs(cs.bw[0] - TRUE_BW).max() < 0.01


def test_ratio_exposure_route_at_large_n(big_sample):
    spec = scenario_model_specs("m1_only")
    exposure = fit_joint_exposure(big_sample, spec)
    cs = gest_r_m1(big_sample, exposure, spec)
    assert np.abs(cs.br[0] - TRUE_BR).max() < 0.02


def test_doubly_robust_solutions_zero_their_moments(sim_data, correct_spec):
    exposure = fit_joint_exposure(sim_data, correct_spec)
    nco = fit_baseline_nco(sim_data, correct_spec)
    outcome = fit_baseline_outcome(sim_data, correct_spec)
    index = default_index_functions(correct_spec, sim_data.n_z)
    cs = solve_w_contrasts(sim_data, exposure, nco, correct_spec)
    assert np.abs(w_contrast_moments(sim_data, exposure, nco, cs, index).mean(0)).max() < 1e-12
    cs = solve_r_contrast(sim_data, exposure, outcome, nco, cs)
    m = r_contrast_moments(sim_data, exposure, outcome, nco, cs, index)
    assert np.abs(m.mean(0)).max() < 1e-12
    cs1 = gest_r_m1(sim_data, exposure, correct_spec)
    assert np.abs(m1_moments(sim_data, exposure, cs1, index).mean(0)).max() < 1e-12
    cs2 = gest_w_m2(sim_data, exposure, correct_spec)
    assert np.abs(m2_moments(sim_data, exposure, cs2, index).mean(0)).max() < 1e-12
    cs3 = gest_r_m3(sim_data, outcome, nco, cs)
    assert cs3.br.shape == cs.br.shape


def test_joint_nco_fit_is_close_to_truth(sim_data, correct_spec):
    model = fit_w_joint(sim_data, correct_spec)
    assert np.abs(model.scores(sim_data).mean(0)).max() < 1e-9
    assert np.abs(model.contrasts.bw[0] - TRUE_BW).max() < 0.1


def test_polytomous_contrast_shapes():
    data = binary_covariate_data(n=3000, seed=5, n_levels=3)
    spec = ModelSpec(exposure="joint", az=("X1", "X2"), w0=("X1",), wa=("X1",))
    exposure = fit_joint_exposure(data, spec)
    cs = gest_w_m2(data, exposure, spec)
    assert cs.bw.shape == (2, 2 + 2 * 1 + 2 * 1)
    assert cs.xi_w(data, 1).shape == (data.n, 2, 2)
    assert cs.delta_w(data, 2).shape == (data.n, 2)
    back = ContrastSet.from_dict(cs.to_dict())
    assert np.array_equal(back.bw, cs.bw) and back.waz == cs.waz


def test_singular_xi_is_flagged(sim_data, correct_spec):
    cs = ContrastSet.empty(correct_spec, 1).with_w(np.array([[0.0, 0.2, -0.2]]))
    with pytest.raises(NumericalError, match="nearly singular"):
        check_xi_invertible(cs, sim_data, raise_error=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert check_xi_invertible(cs, sim_data) < 1e-6
    assert caught


def test_unequal_levels_are_rejected():
    data = binary_covariate_data(n=500, seed=1)
    data3 = binary_covariate_data(n=500, seed=1, n_levels=3)
    mixed = type(data)(data.y, data.a, data.zc, data3.wc, data.x, data.z_coding,
                       data3.w_coding, data.covariate_names)
    spec = ModelSpec()
    with pytest.raises(ValidationError, match=r"\|Z\| = \|W\|"):
        gest_w_m2(mixed, fit_joint_exposure(mixed, spec), spec)


def test_unestimated_block_is_reported(sim_data, correct_spec):
    with pytest.raises(ValidationError, match="not been estimated"):
        ContrastSet.empty(correct_spec, 1).r_values(sim_data)
