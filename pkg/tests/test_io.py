import json

import numpy as np
import pytest

from conftest import cov_pair
from sparsesense.errors import ConfigError, DimensionError
from sparsesense.io import load_pair, read_matrix_csv, save_pair, write_matrix_csv


def test_roundtrip_bit_exact(tmp_path, rng):
    p = cov_pair(rng, 4)
    desc = save_pair(p, tmp_path)
    q = load_pair(desc)
    for key in ("theta0", "theta1", "sigma0", "sigma1"):
        np.testing.assert_array_equal(getattr(p, key), getattr(q, key))
    assert q.prior0 == p.prior0


def test_csv_format(tmp_path):
    write_matrix_csv(tmp_path / "m.csv", np.array([[0.1, 2.0], [3.0, 4.0]]))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["0.10000000000000001,2", "3,4"]
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "m.csv"), [[0.1, 2.0], [3.0, 4.0]])


def test_descriptor_missing_key(tmp_path, rng):
    desc = save_pair(cov_pair(rng, 2), tmp_path)
    data = json.loads(desc.read_text())
    del data["sigma1"]
    desc.write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_pair(desc)


def test_descriptor_dimension_mismatch(tmp_path, rng):
    desc = save_pair(cov_pair(rng, 2), tmp_path)
    data = json.loads(desc.read_text())
    data["m"] = 3
    desc.write_text(json.dumps(data))
    with pytest.raises(DimensionError):
        load_pair(desc)
