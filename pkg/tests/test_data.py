import numpy as np
import pytest

from negctrl.data import (CategoricalCoding, ColumnSchema, Dataset, ModelSpec, ObservedSample,
                          build_design, design_matrix, load_dataset, write_dataset)
from negctrl.errors import ValidationError


def _csv(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


SCHEMA = ColumnSchema("y", "a", "z", "w", ("x1",))


def test_reference_level_maps_to_working_zero():
    c = CategoricalCoding(("lo", "mid", "hi"), reference=2)
    assert c.order == (2, 0, 1)
    assert c.to_working.tolist() == [1, 2, 0]
    assert c.with_reference("lo").reference == 0
    with pytest.raises(ValidationError):
        c.with_reference("nope")


def test_gamma_indicators_follow_reference():
    cz = CategoricalCoding(("a", "b", "c"), reference=1)
    d = Dataset([0, 1, 0], [0, 1, 1], [0, 1, 2], [0, 0, 1], np.zeros((3, 0)), cz,
                CategoricalCoding(("0", "1")))
    assert d.gamma_z.tolist() == [[1, 0], [0, 0], [0, 1]]


def test_design_matrix_matches_per_sample_builder(sim_data):
    terms = ("A", "X1", "X7*X8", "A*X2")
    mat = design_matrix(sim_data, terms)
    for i in (0, 5, 17):
        s = sim_data.samples[i]
        assert np.allclose(mat[i], build_design(s, terms, sim_data.covariate_names))
    assert np.all(design_matrix(sim_data, terms, a=1)[:, 1] == 1)


def test_design_matrix_cache_is_read_only(sim_data):
    mat = design_matrix(sim_data, ("X1",))
    with pytest.raises(ValueError):
        mat[0, 0] = 3.0


def test_build_design_default_names():
    s = ObservedSample(1.0, 1, 0, 1, np.array([2.0, 3.0]))
    assert build_design(s, ("X1*X2", "A")).tolist() == [1.0, 6.0, 1.0]


def test_treatment_must_be_binary():
    c = CategoricalCoding(("0", "1"))
    with pytest.raises(ValidationError, match="non-binary"):
        Dataset([0.0], [2], [0], [0], np.zeros((1, 0)), c, c)


def test_model_spec_rules():
    with pytest.raises(ValidationError, match="may not involve the treatment"):
        ModelSpec(w0=("A",)).validate(())
    with pytest.raises(ValidationError, match="both the wa and wz"):
        ModelSpec(wa=("X1",), waz=("X1",))
    with pytest.raises(ValidationError, match="unknown covariate"):
        ModelSpec(y=("A", "X9")).validate(("X1",))
    spec = ModelSpec(wa=("X1",), wz=("X1",), waz=None)
    assert not spec.has_interaction
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_saturated_spec_has_all_products():
    s = ModelSpec.saturated(("X1", "X2"))
    assert s.az == ("X1", "X2", "X1*X2")
    assert "A*X1*X2" in s.y and "A*X1*X2" in s.r


def test_csv_roundtrip(tmp_path, saturated_data):
    path = tmp_path / "out.csv"
    schema = write_dataset(saturated_data, path)
    back = load_dataset(path, schema)
    assert np.array_equal(back.y, saturated_data.y)
    assert np.array_equal(back.zc, saturated_data.zc)
    assert np.array_equal(back.x, saturated_data.x)


def test_csv_levels_sorted_and_reference_override(tmp_path):
    p = _csv(tmp_path, "y,a,z,w,x1\n1,0,b,q,0.5\n0,1,a,p,1\n")
    d = load_dataset(p, SCHEMA)
    assert d.z_coding.levels == ("a", "b") and d.zc.tolist() == [1, 0]
    d2 = load_dataset(p, ColumnSchema("y", "a", "z", "w", ("x1",), z_ref="b"))
    assert d2.zc.tolist() == [0, 1]


@pytest.mark.parametrize("body,message", [
    ("y,a,z,w,x1\n1,2,a,p,0\n", "non-binary treatment: value '2' at row 1, column 'a'"),
    ("y,a,z,w,x1\n1,0,a,p,\n", "missing value at row 1, column 'x1'"),
    ("y,a,z,w,x1\n1,0,a,p,0\nfoo,1,a,p,0\n", "unparseable cell 'foo' at row 2, column 'y'"),
    ("y,a,z,x1\n1,0,a,0\n", "missing column"),
    ("", "empty file"),
])
def test_csv_errors_name_the_location(tmp_path, body, message):
    with pytest.raises(ValidationError, match=message.replace("(", r"\(")):
        load_dataset(_csv(tmp_path, body), SCHEMA)
