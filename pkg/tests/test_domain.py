import json

import numpy as np
import pytest

from conftest import make_dataset, make_record
from domain_app import (
    ClusterKey,
    ConfigError,
    DataError,
    ElasticityCurve,
    NotOnGrid,
    SubsidyError,
    TreatmentGrid,
    curves_from_matrix,
    curves_to_matrix,
    dataset_lines,
    feature_names,
    parse_dataset,
    read_dataset,
    treatment_index,
    validate_dataset,
    write_dataset,
)


class TestTreatmentGrid:
    def test_index_of_level(self):
        grid = TreatmentGrid((0, 1, 2, 3, 5))
        assert treatment_index(grid, 3.0) == 3
        assert grid.index(0) == 0
        assert grid.J == 5

    def test_amount_off_grid(self):
        with pytest.raises(NotOnGrid):
            treatment_index(TreatmentGrid((0, 1, 2, 3, 5)), 4)

    @pytest.mark.parametrize("levels", [(0,), (1, 2), (0, 2, 1), (0, 1, 1)])
    def test_rejects_bad_levels(self, levels):
        with pytest.raises(ConfigError):
            TreatmentGrid(levels)

    def test_errors_carry_kind(self):
        assert NotOnGrid("x").kind == "NotOnGrid"
        assert issubclass(NotOnGrid, SubsidyError)


class TestElasticityCurve:
    def test_uplift(self):
        c = ElasticityCurve((0.1, 0.15, 0.3))
        np.testing.assert_allclose(c.uplift(), [0.0, 0.05, 0.2])

    def test_rejects_decreasing(self):
        with pytest.raises(DataError):
            ElasticityCurve((0.2, 0.1))

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            ElasticityCurve((0.5, 1.2))

    def test_matrix_round_trip(self):
        P = np.array([[0.1, 0.2], [0.3, 0.3]])
        np.testing.assert_array_equal(curves_to_matrix(curves_from_matrix(P)), P)


class TestClusterKey:
    def test_ordering_and_tuple(self):
        assert ClusterKey(0, 1, 2) < ClusterKey(0, 2, 0)
        assert ClusterKey(3, 4, 5).as_tuple() == (3, 4, 5)


class TestValidation:
    def test_clean_dataset(self):
        d = make_dataset([make_record(i, i % 3, i % 2) for i in range(6)])
        assert validate_dataset(d).ok

    def test_empty_arm(self):
        d = make_dataset([make_record(i, i % 2, 1) for i in range(4)])
        assert validate_dataset(d).kinds() == ["EmptyArm"]

    def test_index_out_of_range(self):
        records = [make_record(i, i % 3, 0) for i in range(3)] + [make_record(9, 7, 0)]
        assert "IndexOutOfRange" in validate_dataset(make_dataset(records)).kinds()

    def test_bad_outcome_and_revenue(self):
        records = [make_record(i, i % 3, 0) for i in range(3)]
        records += [make_record(5, 0, 2), make_record(6, 1, 1, rev=-1.0)]
        kinds = validate_dataset(make_dataset(records)).kinds()
        assert "BadOutcome" in kinds
        assert "NegativeRevenue" in kinds

    def test_feature_length(self):
        records = [make_record(i, i % 3, 0) for i in range(3)] + [make_record(3, 0, 0, features=(1.0,))]
        assert validate_dataset(make_dataset(records)).kinds() == ["FeatureLength"]

    def test_empty_dataset(self):
        assert validate_dataset(make_dataset([])).kinds() == ["EmptyDataset"]

    def test_unknown_provenance(self):
        with pytest.raises(ConfigError):
            make_dataset([], provenance="survey")


class TestDatasetFile:
    def test_write_then_read(self, tmp_path):
        d = make_dataset([make_record(i, i % 3, i % 2, rev=1.0 / 3 + i) for i in range(9)], provenance="rct")
        path = write_dataset(tmp_path / "d.ndjson", d)
        back = read_dataset(path)
        assert back == d

    def test_header_names_features(self):
        d = make_dataset([make_record(0, 0, 0)])
        header = json.loads(next(dataset_lines(d)))
        assert header["feature_names"][:2] == ["activity", "distance"]
        assert header["feature_names"][-1] == "noise_0"
        assert feature_names(11)[-2:] == ["noise_0", "noise_1"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_dataset(tmp_path / "nope.ndjson")

    def test_malformed_record_line(self):
        d = make_dataset([make_record(0, 0, 0)])
        header = next(dataset_lines(d))
        with pytest.raises(DataError, match="line 2"):
            parse_dataset([header, '{"id": 1}'])

    def test_bad_header(self):
        with pytest.raises(ConfigError):
            parse_dataset(['{"format": "other"}'])

    def test_empty_file(self):
        with pytest.raises(DataError):
            parse_dataset([])
