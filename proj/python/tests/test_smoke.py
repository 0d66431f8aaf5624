import json
import os
from pathlib import Path

import numpy as np
import pytest

import tsinet

ROOT = Path(os.environ.get("TSI_SOURCE_DIR", Path(__file__).resolve().parents[2]))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def test_saliency_align_matches_numpy():
    rng = np.random.default_rng(0)
    x_t = rng.normal(size=(2, 3, 4, 5))
    x_n = rng.normal(size=(2, 3, 4, 5))
    aligned, attn = tsinet.saliency_align(x_t, x_n)
    q = x_t.reshape(2, 3, 20).transpose(0, 2, 1)
    k = x_n.reshape(2, 3, 20).transpose(0, 2, 1)
    a = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(3))
    np.testing.assert_allclose(attn, a, atol=1e-12)
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-12)
    ref = x_n * (a @ k).transpose(0, 2, 1).reshape(2, 3, 4, 5)
    np.testing.assert_allclose(aligned, ref, atol=1e-12)


def test_integration_weights_sum_to_one():
    rng = np.random.default_rng(1)
    t_prev = rng.normal(size=(3, 4, 2, 2))
    x_g = rng.normal(size=(3, 4, 2, 2))
    out, alpha, beta = tsinet.cross_perception_integrate(
        t_prev, x_g, rng.normal(size=(8, 4)), rng.normal(size=8))
    np.testing.assert_allclose(alpha + beta, 1.0, atol=1e-12)
    np.testing.assert_allclose(out, alpha * x_g + beta * t_prev, atol=1e-12)


def test_cti_first_group_passes_through():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 8, 3, 3))
    kernels = [rng.normal(size=(2, 3)) for _ in range(3)]
    fcs = [rng.normal(size=(4, 2)) for _ in range(2)]
    biases = [rng.normal(size=4) for _ in range(2)]
    out = tsinet.cti_forward(x, 4, 4, kernels, fcs, biases)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out[:, :2], x[:, :2])


def test_shape_errors_surface_as_exceptions():
    with pytest.raises(tsinet.ShapeError):
        tsinet.saliency_align(np.zeros((2, 3, 4, 5)), np.zeros((2, 3, 4, 4)))


def test_profile_resnet50():
    report = tsinet.profile(ROOT / "configs" / "resnet50_tsi.json", frames=8, size=224)
    base = tsinet.profile(ROOT / "configs" / "resnet50_tsn.json", frames=8, size=224)
    assert report["totals"]["macs"] > base["totals"]["macs"]
    assert 30e9 < base["totals"]["macs"] < 36e9


def test_clip_generation_is_deterministic():
    spec = {"frames": 4, "height": 16, "width": 16, "shape": "square", "shape_size": 4,
            "shape_color": [0.9, 0.2, 0.1], "start": [2, 3], "velocity": [1, 0], "camera_jitter": 0,
            "texture_seed": 7, "label": 0}
    a = tsinet.generate_clip(spec, seed=1)
    assert a.shape == (4, 3, 16, 16)
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, tsinet.generate_clip(spec, seed=1))


def test_tensor_round_trip(tmp_path):
    x = np.array([[0.0, -0.0], [np.inf, 5e-324]])
    tsinet.save_tensor(tmp_path / "x.tsit", x)
    y = tsinet.load_tensor(str(tmp_path / "x.tsit"))
    assert y.tobytes() == x.tobytes()


def test_gradcheck_cti():
    results = tsinet.gradcheck("cti")
    assert results and all(r["passed"] for r in results)


def test_train_evaluate_predict(tmp_path):
    data = tmp_path / "data"
    counts = tsinet.build_dataset(ROOT / "tests" / "cli" / "tiny_data.json", data)
    assert counts == {"train": 16, "val": 8}
    run = tmp_path / "run"
    cfg = json.loads((ROOT / "tests" / "cli" / "tiny_train.json").read_text())
    cfg["model_path"] = str(ROOT / "tests" / "cli" / cfg["model_path"])
    cfg["epochs"] = 1
    result = tsinet.train(cfg, data_dir=data, out_dir=run)
    assert result["epochs_run"] == 1
    ev = tsinet.evaluate(run / "checkpoint", data)
    assert ev["count"] == 8
    assert 0.0 <= ev["top1"] <= 1.0
    clips = np.stack([tsinet.load_tensor(str(p)) for p in sorted((data / "clips").iterdir())[:2]])
    scores = tsinet.predict(run / "checkpoint", clips)
    assert scores.shape == (2, 4)
