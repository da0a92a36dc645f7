import math

import numpy as np
import pytest

import mhaff

TINY = "synth://C=3,n=10,size=32,seed=4"


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    w = mhaff.attention_weights(rng.normal(size=(5, 4)), rng.normal(size=(7, 4)))
    assert w.shape == (5, 7)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_single_head_identity_matches_attention():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(4, 6)) for _ in range(3))
    a = mhaff.attention(q, k, v)
    h = mhaff.multi_head_attention(q, k, v, 1, np.eye(6))
    np.testing.assert_array_equal(a, h)


def test_xyx_wiring_selects_sources():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    q, k, v = mhaff.make_qkv(x, y, "XYX", np.eye(6), np.eye(6), np.eye(6))
    np.testing.assert_array_equal(q, x)
    np.testing.assert_array_equal(k, y)
    np.testing.assert_array_equal(v, x)


def test_loss_and_accuracy():
    assert mhaff.cross_entropy_loss(np.full((1, 8), 1 / 8), [3]) == pytest.approx(math.log(8), abs=1e-12)
    assert mhaff.accuracy([0, 1, 2, 3, 4, 5, 6, 7, 0, 0], [0, 1, 2, 3, 4, 5, 6, 7, 1, 1]) == 0.8


def test_errors_carry_kind():
    with pytest.raises(mhaff.MhaffError) as info:
        mhaff.accuracy([], [])
    assert info.value.kind == "evaluation"
    with pytest.raises(mhaff.MhaffError):
        mhaff.normalize_config('{"no_such_key": 1}')


def test_synth_image_is_deterministic():
    a = mhaff.synth_image(TINY, 1, 2)
    b = mhaff.synth_image(TINY, 1, 2)
    assert a.shape == (3, 32, 32) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, b)


def test_gradcheck_suite_passes():
    cases = mhaff.gradcheck(1)
    assert len(cases) >= 30
    assert all(c["passed"] for c in cases)


def test_train_evaluate_and_saliency(tmp_path):
    cfg = mhaff.config(data=TINY, epochs=2, learning_rate=1e-3, seed=3)
    report = mhaff.train(cfg, str(tmp_path))
    assert len(report["history"]) == 2
    assert report["best_val_loss"] == min(h["val_loss"] for h in report["history"])
    again = mhaff.train(cfg)
    assert again["history"] == report["history"]

    result = mhaff.evaluate(report["checkpoint"], "val")
    assert 0.0 <= result["accuracy"] <= 1.0

    heat, cls = mhaff.grad_cam(report["checkpoint"], TINY + "#2:1", None, "vit-branch")
    assert heat.shape == (32, 32)
    assert heat.min() >= 0.0 and heat.max() in (0.0, 1.0)
    mhaff.export_heatmap(heat, TINY + "#2:1", str(tmp_path), "probe")
    assert (tmp_path / "probe.pgm").exists() and (tmp_path / "probe_overlay.ppm").exists()
    with pytest.raises(mhaff.MhaffError):
        mhaff.grad_cam(report["checkpoint"], TINY + "#2:1", None, "classifier")
