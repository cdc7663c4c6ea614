import json
from fractions import Fraction

import numpy as np
import pytest
from scipy.special import stirling2

from negctrl.data import CategoricalCoding
from negctrl.errors import NumericalError, ValidationError
from negctrl.estimators import FitCache, report
from negctrl.identify import (DiscreteLaw, ObservedLaw, ate_by_identification,
                              ate_by_reparameterization, coarsen, enumerate_coarsenings,
                              gmm_combine, infer_latent_cardinality, observed_matrices,
                              read_json, set_partitions, solve_bridge)

from conftest import binary_covariate_data


def test_frozen_oracle_laws(oracle_laws):
    for law, case in oracle_laws:
        exact = float(Fraction(case["latent_ate"]))
        assert law.latent_ate() == pytest.approx(exact, abs=1e-14)
        assert ate_by_identification(law).delta == pytest.approx(exact, abs=1e-10)
        sizes = case["sizes"]
        assert infer_latent_cardinality(observed_matrices(law)) == sizes["u"]
        if sizes["u"] == sizes["z"] == sizes["w"]:
            assert ate_by_reparameterization(law).delta == pytest.approx(exact, abs=1e-10)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_random_square_laws(k):
    rng = np.random.default_rng(100 + k)
    for _ in range(15):
        law = DiscreteLaw.random(rng, k, k, k)
        truth = law.latent_ate()
        ident = ate_by_identification(law)
        rep = ate_by_reparameterization(law)
        assert abs(ident.delta - truth) < 1e-9
        assert abs(rep.delta - truth) < 1e-9
        assert rep.delta_confounded - rep.delta_bias == pytest.approx(rep.delta, abs=1e-12)


def test_rank_recovers_latent_cardinality():
    rng = np.random.default_rng(7)
    for n_u, n_z, n_w in [(1, 2, 2), (2, 3, 3), (2, 4, 3), (3, 4, 4)]:
        for _ in range(5):
            law = DiscreteLaw.random(rng, n_u, n_z, n_w)
            assert infer_latent_cardinality(observed_matrices(law)) == n_u


def test_overcomplete_controls_use_pseudoinverse():
    law = DiscreteLaw.random(np.random.default_rng(3), 2, 3, 3)
    b = solve_bridge(observed_matrices(law), a=1, x=0)
    assert b.method == "pseudoinverse" and b.residual < 1e-10
    assert ate_by_identification(law).delta == pytest.approx(law.latent_ate(), abs=1e-9)


def test_inconsistent_law_is_rejected():
    law = DiscreteLaw.random(np.random.default_rng(4), 2, 3, 3)
    obs = law.observed()
    ey = obs.ey_xazw.copy()
    ey[0, 1, 0, :] += np.array([0.2, -0.1, 0.05])
    bad = ObservedLaw(obs.p_xazw, ey, obs.x_values, obs.covariate_names)
    with pytest.raises(NumericalError, match="inconsistent bridge system"):
        ate_by_identification(bad)


def test_law_json_round_trip(tmp_path):
    law = DiscreteLaw.random(np.random.default_rng(5), 3, 3, 3, n_x=3)
    path = tmp_path / "law.json"
    law.save(path)
    back = DiscreteLaw.load(path)
    assert back.latent_ate() == law.latent_ate()
    assert json.loads(path.read_text())["schema"] == "negctrl-law/1"


def test_malformed_law_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"p_x": [0.5, 0.5],\n "p_u_given_x": [}')
    with pytest.raises(ValidationError, match="line 2, column"):
        read_json(path)


def test_invalid_probabilities_are_rejected():
    law = DiscreteLaw.random(np.random.default_rng(6), 2, 2, 2)
    d = law.to_dict()
    d["p_x"] = [0.7, 0.7]
    with pytest.raises(ValidationError):
        DiscreteLaw.from_dict(d)


@pytest.mark.parametrize("n,blocks", [(3, 2), (4, 2), (4, 3), (5, 3)])
def test_partition_counts(n, blocks):
    parts = set_partitions(n, blocks)
    assert len(parts) == len(set(parts)) == int(stirling2(n, blocks, exact=True))


def test_coarsening_enumeration_and_labels():
    z = CategoricalCoding(("a", "b", "c"))
    cs = enumerate_coarsenings(z, z, 2)
    assert len(cs) == 9
    data = binary_covariate_data(n=600, seed=2, n_levels=3)
    small = coarsen(data, cs[0])
    assert small.n_z == small.n_w == 2
    assert "|" in "".join(small.z_coding.levels)
    with pytest.raises(ValidationError, match="exceeds"):
        enumerate_coarsenings(z, z, 4)


def test_single_coarsening_gmm_is_plain_estimator():
    data = binary_covariate_data(n=3000, seed=8, n_levels=3)
    from negctrl.data import ModelSpec
    spec = ModelSpec.saturated(("X1", "X2"))
    c = enumerate_coarsenings(data.z_coding, data.w_coding, 2)[1]
    res = gmm_combine(data, spec, [c])
    d = coarsen(data, c)
    plain = report(d, FitCache(d, spec).theta("mr"), "mr", 0.95, True)
    assert res.delta == pytest.approx(plain.delta, abs=1e-12)
    assert res.se == pytest.approx(plain.se, rel=1e-6)
    assert res.weights.tolist() == [1.0]


def test_empirical_law_matches_saturated_estimate(saturated_data, saturated_spec):
    ident = ate_by_identification(ObservedLaw.from_dataset(saturated_data))
    theta = FitCache(saturated_data, saturated_spec).theta("mr")
    est = report(saturated_data, theta, "mr", 0.95, False)
    assert est.delta == pytest.approx(ident.delta, abs=1e-9)
