import json

import numpy as np
import pytest

from smallscat.background import PotentialGrid
from smallscat.errors import ConfigurationError
from smallscat.io import (atomic_write_text, csv_text, dumps_json, parse_complex, read_csv,
                          read_field, read_grid, write_csv, write_field, write_grid)


def test_parse_complex_forms():
    assert parse_complex(2) == 2
    assert parse_complex([1.5, -0.25]) == 1.5 - 0.25j
    assert parse_complex("20 - 1j") == 20 - 1j
    for bad in (True, "abc", [1, 2, 3], None):
        with pytest.raises(ConfigurationError):
            parse_complex(bad)


def test_csv_roundtrip_exact(tmp_path):
    x = 0.1 + 0.2
    write_csv(tmp_path / "t.csv", ["m", "v"], [[0, x], [1, -1e-300]])
    rows = read_csv(tmp_path / "t.csv")
    assert rows[0]["m"] == "0" and float(rows[0]["v"]) == x
    assert float(rows[1]["v"]) == -1e-300


def test_json_is_canonical():
    assert dumps_json({"b": np.float64(1.0), "a": np.arange(2)}) == dumps_json({"a": [0, 1], "b": 1.0})
    with pytest.raises(ValueError):
        dumps_json({"x": float("nan")})


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]


def test_field_roundtrip(tmp_path):
    g = PotentialGrid.box([0, -1, 0], [1, 0, 0.5], 0.25, 2.0,
                          q0=lambda x: np.sin(x[:, 0]) - 1j * x[:, 1] ** 2)
    paths = write_grid(tmp_path / "q0.json", g)
    assert [p.name for p in paths] == ["q0.json", "q0.txt"]
    back = read_grid(tmp_path / "q0.json")
    np.testing.assert_array_equal(back.q0, g.q0)
    np.testing.assert_array_equal(back.lower, g.lower)
    assert back.k == g.k and back.spacing == g.spacing


def test_refractive_index_file(tmp_path):
    g = PotentialGrid.box([0, 0, 0], [1, 1, 1], 0.25, 2.0)
    write_field(tmp_path / "n0.json", g, np.full(g.shape, 1.5 + 0.1j), "n0")
    back = read_grid(tmp_path / "n0.json")
    np.testing.assert_allclose(back.q0, 4 * (1 - (1.5 + 0.1j)))


def test_inline_values_and_bad_shape(tmp_path):
    header = {"format": "smallscat-grid", "version": 1, "field": "q0", "lower": [0, 0, 0],
              "spacing": 1.0, "shape": [1, 1, 2], "k": 0.1, "values": [[1, 0], [2, -1]]}
    (tmp_path / "g.json").write_text(json.dumps(header))
    _, v = read_field(tmp_path / "g.json")
    np.testing.assert_array_equal(v.ravel(), [1, 2 - 1j])
    header["shape"] = [1, 1, 3]
    (tmp_path / "g.json").write_text(json.dumps(header))
    with pytest.raises(ConfigurationError):
        read_field(tmp_path / "g.json")
    with pytest.raises(ConfigurationError):
        read_field(tmp_path / "missing.json")


def test_csv_text_header():
    assert csv_text(["a"], []) == "a\n"
