import json

import numpy as np
import pytest

import idemdeblur as idem

skimage_metrics = pytest.importorskip("skimage.metrics")


def test_param_budget():
    widths = idem.default_widths()
    assert abs(idem.count_params(widths) - 3.11e6) / 3.11e6 <= 0.10
    assert idem.Model((2, 3, 4)).num_params() == idem.count_params((2, 3, 4))


def test_toy_pair_shapes_and_range():
    blurry, sharp = idem.toy_pair(seed=5, level=7, size=32)
    assert blurry.shape == sharp.shape == (3, 32, 32)
    assert blurry.dtype == np.float32
    assert 0.0 <= blurry.min() and blurry.max() <= 1.0
    frames = idem.generate_toy_sequence(5, 7, 32, 32)
    np.testing.assert_allclose(blurry, np.mean(frames, axis=0), atol=1e-6)
    np.testing.assert_array_equal(sharp, frames[3])


def test_psnr_known_error():
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.1)
    assert idem.psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_ssim_matches_skimage():
    rng = np.random.default_rng(3)
    for _ in range(3):
        a = rng.random((3, 24, 24))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = skimage_metrics.structural_similarity(
            a, b, channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert idem.ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_zero_head_model_is_identity_and_stable():
    blurry, sharp = idem.toy_dataset(4, 16, 11)
    model = idem.Model((2, 3, 4), seed=1)
    model.zero_head()
    np.testing.assert_allclose(model.deblur(blurry), blurry, atol=1e-6)
    curve = model.stability_probe(blurry, sharp, 5)
    assert len(curve) == 5
    assert max(curve) - min(curve) == 0.0
    for row in model.residual_stats(blurry, sharp, 2):
        assert row["every"] == 0.0 and row["sum"] == 0.0


def test_losses():
    a = np.zeros((1, 3, 4, 4))
    b = np.full((1, 3, 4, 4), 0.5)
    assert idem.idempotent_loss(a, b) == pytest.approx(0.5)
    assert idem.idempotent_loss(a, b, reduction="sum") == pytest.approx(24.0)
    total, idem_term, sharp_term = idem.total_loss([a, b], b, alpha=[1.0, 1.0], lambda_idem=0.1)
    assert idem_term == pytest.approx(0.5)
    assert sharp_term == pytest.approx(0.5)
    assert total == pytest.approx(0.55)


def test_config_errors_name_the_field():
    with pytest.raises(idem.ConfigError, match=r"config\.loss\.lambda"):
        idem.lr_schedule(0, json.dumps({"loss": {"lambda": "x"}}))
    with pytest.raises(idem.ConfigError, match=r"config\.bogus"):
        idem.lr_schedule(0, json.dumps({"bogus": 1}))
    assert idem.lr_schedule(0, json.dumps({"lr0": 0.01})) == pytest.approx(0.01)


def test_shape_errors():
    with pytest.raises(idem.ShapeError):
        idem.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        idem.Model((2, 3, 4)).deblur(np.zeros((4, 4)))


def test_tiny_training_run_is_deterministic(tmp_path):
    blurry, sharp = idem.toy_dataset(10, 16, 2)
    cfg = json.dumps({"widths": [2, 3, 4], "patch": 8, "batch_size": 2, "epochs": 2, "seed": 4, "iterations": 2})
    m1, h1 = idem.train(cfg, blurry, sharp, 0.2, str(tmp_path / "a"))
    m2, h2 = idem.train(cfg, blurry, sharp, 0.2)
    assert h1 == h2
    assert len(h1) == 8
    assert h1[-1]["val_psnr"] is not None
    np.testing.assert_array_equal(m1.deblur(blurry[:2]), m2.deblur(blurry[:2]))
    loaded = idem.Model.load(str(tmp_path / "a" / "last.ckpt"))
    np.testing.assert_array_equal(loaded.deblur(blurry[:2]), m1.deblur(blurry[:2]))
    assert (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0] == "step,epoch,lr,total,idem,sharp,val_psnr"
