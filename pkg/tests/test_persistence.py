"""Tests for CSV outputs and the run manifest."""

import json

import numpy as np
import pytest

from fleming_viot_qsd.errors import FlemingViotError, GridError
from fleming_viot_qsd.gridref import GridDensity
from fleming_viot_qsd.persistence import (
    MANIFEST_NAME,
    OutputWriter,
    format_value,
    read_density,
    read_manifest,
    write_csv,
)


class TestFormatValue:
    """Test the text form of CSV cells."""

    def test_floats_use_repr(self):
        """Floats keep every digit."""
        assert format_value(0.1) == "0.1"
        assert format_value(np.float64(1 / 3)) == repr(1 / 3)

    def test_nan_and_inf(self):
        """Non-finite floats are spelled out."""
        assert format_value(float("nan")) == "nan"
        assert format_value(float("inf")) == "inf"

    def test_ints_bools_and_none(self):
        """Integers, booleans and missing values."""
        assert format_value(np.int64(12)) == "12"
        assert format_value(True) == "true"
        assert format_value(None) == ""

    def test_lists(self):
        """Lists are space separated."""
        assert format_value([0.5, 2]) == "0.5 2"


class TestWriteCsv:
    """Test the CSV writer."""

    def test_crlf_and_header(self, tmp_path):
        """Rows end in CRLF after a header row."""
        path = tmp_path / "out.csv"

        count = write_csv(path, ("a", "b"), [(1, 0.25), (2, 0.5)])

        assert count == 2
        assert path.read_bytes() == b"a,b\r\n1,0.25\r\n2,0.5\r\n"

    def test_quotes_commas(self, tmp_path):
        """Cells containing commas are quoted."""
        path = tmp_path / "out.csv"

        write_csv(path, ("initial",), [("point:0,5",)])

        assert path.read_bytes().splitlines()[1] == b'"point:0,5"'


class TestOutputWriter:
    """Test staged outputs and the manifest."""

    def test_staged_files_are_hidden_until_commit(self, tmp_path):
        """Outputs appear only after the manifest is written."""
        writer = OutputWriter(tmp_path)
        writer.stage_csv("records.csv", ("x",), [(1,)])

        assert not (tmp_path / "records.csv").exists()
        assert (tmp_path / ".records.csv.partial").exists()

        writer.commit("qsd", {"seed": 1}, "hash", [1])

        assert (tmp_path / "records.csv").exists()
        assert (tmp_path / MANIFEST_NAME).exists()
        assert not (tmp_path / ".records.csv.partial").exists()

    def test_manifest_contents(self, tmp_path):
        """The manifest lists config, hash, seeds, outputs and versions."""
        writer = OutputWriter(tmp_path)
        writer.stage_csv("a.csv", ("x",), [(1,)])

        writer.commit("oracle", {"gammas": [0.05]}, "deadbeef", [42], {"residual": float("nan")})
        manifest = read_manifest(tmp_path)

        assert manifest["command"] == "oracle"
        assert manifest["config"] == {"gammas": [0.05]}
        assert manifest["config_hash"] == "deadbeef"
        assert manifest["seeds"] == [42]
        assert manifest["outputs"] == ["a.csv"]
        assert "numpy" in manifest["versions"]
        assert manifest["summary"]["residual"] == "nan"

    def test_repeated_commits_are_byte_identical(self, tmp_path):
        """No timestamps: the same inputs give the same bytes."""
        contents = []
        for name in ("one", "two"):
            writer = OutputWriter(tmp_path / name)
            writer.stage_csv("a.csv", ("x",), [(0.1,)])
            writer.commit("qsd", {"seed": 3}, "h", [3])
            contents.append(((tmp_path / name / MANIFEST_NAME).read_bytes(), (tmp_path / name / "a.csv").read_bytes()))

        assert contents[0] == contents[1]

    def test_discard_removes_partials(self, tmp_path):
        """A failed run leaves no staged files behind."""
        writer = OutputWriter(tmp_path)
        writer.stage_csv("a.csv", ("x",), [(1,)])

        writer.discard()

        assert list(tmp_path.iterdir()) == []
        assert writer.staged_names == []

    def test_density_round_trip(self, tmp_path):
        """A staged density reads back with the same weights."""
        density = GridDensity.normalized(np.random.default_rng(0).random(64))
        writer = OutputWriter(tmp_path)
        writer.stage_density("qsd.csv", density)
        writer.commit("qsd", {}, "h", [0])

        loaded = read_density(tmp_path / "qsd.csv")

        np.testing.assert_array_equal(loaded.weights, density.weights)

    def test_read_density_checks_header(self, tmp_path):
        """Other CSVs are not densities."""
        path = tmp_path / "other.csv"
        write_csv(path, ("a", "b"), [(0.5, 1.0)])

        with pytest.raises(GridError):
            read_density(path)

    def test_missing_manifest(self, tmp_path):
        """Reading a directory without a manifest is an error."""
        with pytest.raises(FlemingViotError):
            read_manifest(tmp_path)

    def test_manifest_is_valid_json(self, tmp_path):
        """The manifest parses as JSON with sorted keys."""
        writer = OutputWriter(tmp_path)
        writer.commit("qsd", {"b": 1, "a": 2}, "h", [0])

        text = (tmp_path / MANIFEST_NAME).read_text()

        assert list(json.loads(text)["config"]) == ["a", "b"]
