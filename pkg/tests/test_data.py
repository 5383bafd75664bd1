import json

import numpy as np
import pytest

from pariconv.data import make_dataset, read_dataset, split, write_dataset
from pariconv.errors import ParameterError


def test_stratified_split():
    ds = make_dataset(classes=3, per_class=8, points=32, seed=1)
    assert len(ds) == 24
    for label in range(3):
        splits = [s.split for s in ds if s.cloud.label == label]
        assert splits.count("train") == 6 and splits.count("test") == 2
    assert len(split(ds, "train")) == 18


def test_seeds_are_per_sample():
    a = make_dataset(classes=2, per_class=4, points=32, seed=1)
    b = make_dataset(classes=2, per_class=4, points=32, seed=1)
    c = make_dataset(classes=2, per_class=4, points=32, seed=2)
    assert all(np.array_equal(x.cloud.positions, y.cloud.positions) for x, y in zip(a, b))
    assert not np.array_equal(a[0].cloud.positions, c[0].cloud.positions)
    assert a[5].seed == [1, 1, 1]


def test_write_and_read_back(tmp_path):
    ds = make_dataset(classes=2, per_class=3, points=20, seed=0, noise=0.01)
    write_dataset(ds, tmp_path, {"noise_sigma": 0.01})
    back, manifest = read_dataset(tmp_path)
    assert manifest["noise_sigma"] == 0.01 and manifest["classes"] == ["sphere", "box"]
    for s, t in zip(ds, back):
        assert np.array_equal(s.cloud.positions, t.cloud.positions)
        assert s.cloud.label == t.cloud.label and s.split == t.split
    entry = json.loads((tmp_path / "manifest.json").read_text())["samples"][0]
    assert set(entry) == {"file", "label", "kind", "seed", "split"}


def test_bad_arguments():
    with pytest.raises(ParameterError):
        make_dataset(classes=9)
    with pytest.raises(ParameterError):
        make_dataset(per_class=1)
