import math
import os
from pathlib import Path

import numpy as np
import pytest

import cfnet

FIXTURES = Path(os.environ.get("CFNET_FIXTURES", Path(__file__).resolve().parents[2] / "tests" / "fixtures"))


def test_quantizer_invariants():
    rng = np.random.default_rng(0)
    echo = (rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))).astype(np.complex64)
    echo[0, 0] = 0.0
    q = cfnet.quantize_1bit(echo)
    assert np.allclose(np.abs(q), math.sqrt(2))
    assert q[0, 0] == 1 + 1j
    assert np.array_equal(cfnet.quantize_1bit(q), q)


def test_point_target_pair():
    p = cfnet.RadarParams()
    target = np.zeros((p.n_range, p.n_azimuth), dtype=np.float32)
    target[32, 20] = 1.0
    img16, img1 = cfnet.generate_pair(target, p)
    assert img16.shape == (64, 64) and img1.shape == (64, 64)
    r, a = np.unravel_index(np.argmax(img16), img16.shape)
    assert abs(r - 32) <= 1 and abs(a - 20) <= 1
    assert 0.0 <= img1.min() and img1.max() <= 1.0


def test_features_and_metrics():
    img = np.tile(np.linspace(0, 1, 64, dtype=np.float32), (64, 1))
    assert cfnet.hog(img).shape == (1764,)
    assert np.array_equal(cfnet.har_aggregate(np.ones((2, 3, 4, 5), np.float32)), np.ones((4, 5), np.float32))
    assert math.isinf(cfnet.psnr(img, img))
    rep = cfnet.report_from_confusion(cfnet.load_confusion_csv(FIXTURES / "table4.csv"))
    assert rep["accuracy"] == pytest.approx(0.8081, abs=1e-4)
    assert rep["macro_f1"] == pytest.approx(0.5658, abs=1e-4)
    assert cfnet.report_from_predictions([0, 1, 2], [0, 1, 2], 3)["accuracy"] == 1.0


def test_config():
    c = cfnet.RunConfig()
    assert c["seed"] == "0"
    c["loss.normalize_sep"] = True
    assert c["loss.normalize_sep"] == "true"
    with pytest.raises(ValueError):
        c.set("no.such.key", "1")
    keys = [k for k, _, _ in cfnet.config_keys()]
    assert "train.teacher_free_prob" in keys
    assert all(f"{k} = " in c.resolved() for k in keys)


def test_tiny_pipeline(tmp_path):
    c = cfnet.RunConfig()
    c.merge_text(
        "dataset.classes = 2\ndataset.per_class = 6\ntrain.pk_classes = 2\n"
        "train.pretrain_epochs = 2\naugment.oversample_target = 0\n"
    )
    assert cfnet.synth_dataset(c, tmp_path / "data") == 12
    classes, rows = cfnet.read_manifest(tmp_path / "data" / "manifest.csv")
    assert len(classes) == 2 and len(rows) == 12
    curves = cfnet.pretrain(tmp_path / "data" / "manifest.csv", c, tmp_path / "run")
    assert [e["epoch"] for e in curves] == [1, 2]
    assert (tmp_path / "run" / "ckpt_best.cfck").exists()
    x1 = np.stack([cfnet.load_image(r["path_1bit"]) for r in rows[:3]])
    rec = cfnet.reconstruct(tmp_path / "run" / "ckpt_best.cfck", x1)
    assert rec.shape == x1.shape
    assert rec.min() >= 0.0 and rec.max() <= 1.0
