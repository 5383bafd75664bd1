import struct

import numpy as np
import pytest

from pariconv.checkpoint import load_archive, load_model, save_archive, save_model
from pariconv.config import merge, read_config
from pariconv.errors import CheckpointError, ParameterError
from pariconv.geom import generate_shape
from pariconv.net import Classifier, ClassifierConfig, classifier_forward

SMALL = dict(widths=(8, 8, 16, 16), emb=32, head=(16, 8), k=8, num_classes=4)


def test_archive_layout_is_byte_exact(tmp_path):
    path = tmp_path / "a.ckpt"
    save_archive(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"x": 1})
    raw = path.read_bytes()
    meta = b'{"x": 1}'
    expected = (b"PCKP" + struct.pack("<II", 1, len(meta)) + meta + struct.pack("<I", 1)
                + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 0, 2) + struct.pack("<2I", 2, 3)
                + np.arange(6, dtype="<f4").tobytes())
    assert raw == expected
    arrays, m = load_archive(path)
    assert m == {"x": 1} and np.array_equal(arrays["w"], np.arange(6).reshape(2, 3))


def test_archive_rejects_corruption(tmp_path):
    path = tmp_path / "a.ckpt"
    save_archive(path, {"w": np.ones(4)})
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_archive(tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        save_archive(path, {"i": np.arange(3)})


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_model_round_trip(tmp_path, rng, precision):
    cfg = ClassifierConfig(**SMALL, precision=precision)
    model = Classifier(cfg, seed=3)
    model.bn1.running_mean[...] = rng.normal(size=model.bn1.running_mean.shape)
    save_model(tmp_path / "m.ckpt", model)
    back = load_model(tmp_path / "m.ckpt", expect=cfg)
    for (na, a), (nb, b) in zip(model.state().items(), back.state().items()):
        assert na == nb and a.dtype == b.dtype and np.array_equal(a, b)
    c = generate_shape("torus", 64, rng)
    assert np.array_equal(classifier_forward(c, cfg, model), classifier_forward(c, cfg, back))


def test_model_config_mismatch(tmp_path):
    save_model(tmp_path / "m.ckpt", Classifier(ClassifierConfig(**SMALL)))
    with pytest.raises(CheckpointError, match="k"):
        load_model(tmp_path / "m.ckpt", expect=ClassifierConfig(**{**SMALL, "k": 12}))
    save_archive(tmp_path / "bare.ckpt", {"w": np.ones(2)})
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "bare.ckpt")


def test_read_config(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[model]\nvariant = concat_variant\nwidths = 16, 16\nlrf-policy = pca_barycenter\n"
                 "[train]\nepochs = 3\nlr_max = 0.05\n[data]\npoints = 128\n")
    cfg = read_config(p)
    assert cfg == {"model": {"variant": "concat_variant", "widths": (16, 16), "lrf_policy": "pca_barycenter"},
                   "train": {"epochs": 3, "lr_max": 0.05}, "data": {"points": 128}}


@pytest.mark.parametrize("text", ["[model]\nwidth = 3\n", "[optim]\nlr = 1\n", "[train]\nepochs = many\n",
                                  "no section\n"])
def test_read_config_errors(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ParameterError):
        read_config(p)


def test_precedence_file_over_flags_over_defaults():
    out = merge({"a": 1, "b": 2, "c": 3}, {"a": None, "b": 20, "c": 30}, {"c": 300})
    assert out == {"a": 1, "b": 20, "c": 300}
