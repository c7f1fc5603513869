import numpy as np
import pytest
import torch

from ckmplan.errors import CacheError, SceneError
from ckmplan.model import build_model, load_model
from ckmplan.model.numerics import DTYPE


def _prepared_model(kind, stack, seed=0):
    model = build_model(kind, stack.extent, stack.target_norm, d_in=stack.channels.shape[0], seed=seed)
    model.encode(stack)
    if model.regressor_config.is_kan:
        # fit the spline ranges to a spread of locations, as the first epoch does
        model.train()
        model.regressor.set_tracking(True)
        with torch.no_grad():
            model(torch.rand(512, 2, dtype=DTYPE))
        model.regressor.set_tracking(False)
    model.eval()
    return model


def _central_difference(f, q, h):
    out = np.empty_like(q)
    for d in range(2):
        step = np.zeros(2)
        step[d] = h
        out[:, d] = (f(q + step) - f(q - step)) / (2 * h)
    return out


@pytest.mark.parametrize("kind", ["ckan", "cmlp", "kan", "mlp"])
def test_gain_gradient_matches_finite_differences(kind, tiny_stack):
    model = _prepared_model(kind, tiny_stack)
    qbar = np.random.default_rng(1).uniform(0.05, 0.95, size=(200, 2))
    analytic = model.gain_gradient(qbar)
    fd = _central_difference(model.predict_gain, qbar, 1e-6)
    fd_half = _central_difference(model.predict_gain, qbar, 5e-7)
    # a rectifier or range kink inside the stencil shows up as a step-size dependence
    smooth = np.all(np.abs(fd - fd_half) <= 1e-6 * (1 + np.abs(fd)), axis=1)
    assert smooth.mean() > 0.95
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    assert err[smooth].max() < 1e-4


def test_linear_gain_gradient_in_meters(tiny_stack):
    model = _prepared_model("ckan", tiny_stack)
    (x0, x1), (y0, y1) = model.extent
    q = np.random.default_rng(2).uniform([x0 + 20, y0 + 20], [x1 - 20, y1 - 20], size=(20, 2))
    gain, grad = model.gain_linear_gradient(q)
    np.testing.assert_allclose(gain, model.gain_linear(q), rtol=1e-12)
    assert np.all(gain > 0)
    fd = _central_difference(model.gain_linear, q, 1e-4)
    fd_half = _central_difference(model.gain_linear, q, 5e-5)
    smooth = np.all(np.abs(fd - fd_half) <= 1e-6 * np.abs(gain)[:, None] + 1e-6 * np.abs(fd), axis=1)
    assert smooth.mean() > 0.9
    np.testing.assert_allclose(grad[smooth], fd[smooth], rtol=1e-4, atol=1e-6 * gain.max())


def test_conditional_model_needs_encoding(tiny_stack):
    model = build_model("ckan", tiny_stack.extent, tiny_stack.target_norm, seed=0)
    with pytest.raises(CacheError):
        model.predict_gain([[0.5, 0.5]])
    with pytest.raises(CacheError):
        model.encode()


def test_coordinate_model_ignores_stack(tiny_stack):
    model = build_model("mlp", tiny_stack.extent, tiny_stack.target_norm, seed=0)
    assert model.encode(tiny_stack) is None
    assert model.predict_gain([[0.5, 0.5]]).shape == (1,)


def test_seed_fixes_initialization(tiny_stack):
    a = build_model("cmlp", tiny_stack.extent, tiny_stack.target_norm, seed=3)
    b = build_model("cmlp", tiny_stack.extent, tiny_stack.target_norm, seed=3)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        torch.testing.assert_close(pa, pb, msg=name)


def test_denormalize_uses_target_range(tiny_stack):
    model = build_model("kan", tiny_stack.extent, (-120.0, -60.0), seed=0)
    np.testing.assert_allclose(model.denormalize_db([0.0, 0.5, 1.0]), [-120.0, -90.0, -60.0])


@pytest.mark.parametrize("kind", ["ckan", "mlp"])
def test_checkpoint_round_trip(kind, tmp_path, tiny_stack):
    model = _prepared_model(kind, tiny_stack)
    path = model.save(tmp_path / f"model_{kind}.ckmp")
    loaded = load_model(path)
    qbar = np.random.default_rng(3).uniform(size=(30, 2))
    np.testing.assert_array_equal(loaded.predict_gain(qbar), model.predict_gain(qbar))
    np.testing.assert_array_equal(loaded.gain_gradient(qbar), model.gain_gradient(qbar))
    assert loaded.extent == model.extent
    assert loaded.target_norm == model.target_norm
    assert loaded.kind == kind


def test_load_rejects_bad_manifest(tmp_path):
    from ckmplan.model.numerics import save_checkpoint

    path = save_checkpoint(tmp_path / "broken.ckmp", {"w": torch.zeros(1, dtype=DTYPE)}, {"kind": "ckan"})
    with pytest.raises(SceneError):
        load_model(path)


def test_predict_script_prints_gain_and_gradient(tmp_path, tiny_stack, capsys):
    import argparse
    import json

    from predict import predict

    model = _prepared_model("mlp", tiny_stack)
    path = model.save(tmp_path / "model_mlp.ckmp")
    predict(argparse.Namespace(checkpoint=str(path), point=[[40.0, 60.0], [120.0, 200.0]], json=True))
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    records = [json.loads(line) for line in lines]
    gain, grad = model.gain_linear_gradient(np.array([[40.0, 60.0], [120.0, 200.0]]))
    assert [r["gain"] for r in records] == pytest.approx(gain.tolist())
    assert records[1]["d_gain_dy"] == pytest.approx(grad[1, 1])
