import math

import numpy as np
import pytest

from hsident.errors import ConfigError, DataError, NumericalError
from hsident.hscube import HsCube
from hsident.mlp import (
    Checkpoint,
    MlpModel,
    TrainConfig,
    adam_step,
    build_model,
    forward,
    init_moments,
    loss_and_grads,
    lr_at,
    predict_pixels,
    train,
    write_log_csv,
)
from hsident.preprocess import SampleSet
from hsident.seeding import rng_for
from hsident.transforms import fit_transform

from oracles import finite_difference_grads, logistic_separable, random_tiny_model, relative_error


def _model(d=6, c=4, **kw):
    return MlpModel(d, c, hidden=(8, 7, 6, 5), rng=np.random.default_rng(0), **kw)


def test_default_architecture_is_five_affine_layers():
    m = MlpModel(151, 10)
    assert m.dims == (151, 256, 128, 64, 32, 10)
    assert [k for k in m.params if k.startswith("W")] == ["W0", "W1", "W2", "W3", "W4"]


def test_eval_rows_sum_to_one():
    m = _model().eval_mode()
    x = np.random.default_rng(1).normal(size=(50, 6)) * 10
    p = forward(m, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.min() >= 0 and p.max() <= 1


def test_zero_weights_give_uniform():
    m = _model()
    for v in m.params.values():
        v[...] = 0
    p = forward(m, np.random.default_rng(2).normal(size=(5, 6)), training=False)
    np.testing.assert_allclose(p, 0.25, atol=1e-7)


def test_tiny_net_matches_hand_chain():
    m = MlpModel(2, 2, hidden=(2, 2, 2, 2), dtype=np.float64)
    rng = np.random.default_rng(9)
    for v in m.params.values():
        v[...] = rng.normal(size=v.shape)
    for k, v in m.buffers.items():
        v[...] = rng.normal(size=v.shape) if "mean" in k else rng.uniform(0.5, 2, v.shape)
    x = np.array([1.0, 0.0])
    h = x
    for i in range(4):
        z = h @ m.params[f"W{i}"]
        bn = (z - m.buffers[f"running_mean{i}"]) / np.sqrt(m.buffers[f"running_var{i}"] + 1e-5)
        h = np.maximum(m.params[f"gamma{i}"] * bn + m.params[f"beta{i}"], 0)
    logits = h @ m.params["W4"] + m.params["b4"]
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(forward(m, x[None, :], training=False)[0], expected, rtol=1e-12)


def test_eval_forward_deterministic():
    m = _model(dropout=0.5)
    x = np.random.default_rng(3).normal(size=(10, 6))
    np.testing.assert_array_equal(forward(m, x, training=False), forward(m, x, training=False))


def test_train_mode_batch_of_one_rejected():
    m = _model(dropout=0.0)
    with pytest.raises(DataError):
        forward(m, np.zeros((1, 6)), training=True)


def test_dim_mismatch():
    with pytest.raises(DataError):
        forward(_model(), np.zeros((3, 5)), training=False)


def test_uniform_predictions_loss_is_log_c():
    m = _model(c=7)
    for v in m.params.values():
        v[...] = 0
    loss, _, _ = loss_and_grads(m, np.ones((4, 6)), [0, 1, 2, 6], training=False)
    assert loss == pytest.approx(math.log(7), rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("training", [True, False])
def test_gradients_match_finite_differences(seed, training):
    model, x, y = random_tiny_model(seed)
    _, grads, _ = loss_and_grads(model, x, y, training, rng_for(seed, "gc"))

    def f():
        return loss_and_grads(model, x, y, training, rng_for(seed, "gc"))[0]

    numeric = finite_difference_grads(f, model.params)
    for name in model.params:
        assert relative_error(grads[name], numeric[name]).max() < 1e-4, name


def test_duplicated_batch_leaves_loss_and_grads_unchanged():
    m = MlpModel(5, 3, hidden=(6, 6, 6, 6), dropout=0.0, dtype=np.float64, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 5))
    y = rng.integers(0, 3, 8)
    for training in (True, False):
        l1, g1, _ = loss_and_grads(m, x, y, training)
        l2, g2, _ = loss_and_grads(m, np.vstack([x, x]), np.concatenate([y, y]), training)
        assert l1 == pytest.approx(l2, rel=1e-12)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-14)


def test_label_out_of_range():
    with pytest.raises(DataError):
        loss_and_grads(_model(c=3), np.zeros((2, 6)), [0, 3], training=False)


def test_batchnorm_normalises_in_train_mode():
    m = _model(dropout=0.0)
    x = np.random.default_rng(5).normal(3, 4, size=(64, 6))
    from hsident.mlp import _forward

    _, cache = _forward(m, x, True, None)
    for xhat in cache.xhat:
        assert np.abs(xhat.mean(axis=0)).max() < 1e-6
        np.testing.assert_allclose(xhat.var(axis=0), 1.0, atol=1e-4)


def test_inverted_dropout_keeps_expected_fraction():
    p = 0.3
    m = MlpModel(4, 2, hidden=(50, 50, 50, 50), dropout=p, rng=np.random.default_rng(0))
    from hsident.mlp import _forward

    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 4))
    kept = []
    while sum(k.size for k in kept) < 10_000 * 50:
        _, cache = _forward(m, x, True, rng)
        kept.append((cache.masks[0] > 0).ravel())
        scale = cache.masks[0][cache.masks[0] > 0]
        np.testing.assert_allclose(scale, 1 / (1 - p), rtol=1e-6)
    frac = np.concatenate(kept).mean()
    assert abs(frac - (1 - p)) < 0.01 * (1 - p)


def test_adam_single_step_closed_form():
    params = {"w": np.array([0.0])}
    grads = {"w": np.array([1.0])}
    moments = init_moments(params)
    adam_step(params, grads, moments, 1, 1e-3)
    # m_hat = 1, v_hat = 1 after bias correction
    assert params["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert moments["m"]["w"][0] == pytest.approx(0.1)
    assert moments["v"]["w"][0] == pytest.approx(0.001)


def test_adam_zero_grad():
    params = {"w": np.array([2.0, -1.0])}
    moments = {"m": {"w": np.array([0.5, 0.5])}, "v": {"w": np.array([0.25, 0.25])}}
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, moments, 3, 0.0)
    np.testing.assert_array_equal(params["w"], before)
    np.testing.assert_allclose(moments["m"]["w"], [0.45, 0.45])
    np.testing.assert_allclose(moments["v"]["w"], [0.25 * 0.999] * 2)


def test_adam_rejects_non_finite():
    with pytest.raises(NumericalError):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, init_moments({"w": np.zeros(1)}), 1, 1e-3)
    with pytest.raises(ConfigError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, init_moments({"w": np.zeros(1)}), 0, 1e-3)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(30, cfg) == pytest.approx(6e-4, rel=1e-15)
    assert lr_at(299, cfg) == 1e-3 * 0.6**9
    lrs = [lr_at(e, cfg) for e in range(300)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_lr_schedule_short_run():
    cfg = TrainConfig(epochs=30)
    assert [lr_at(e, cfg) for e in (0, 2, 3, 29)] == [1e-3, 1e-3, 1e-3 * 0.6, 1e-3 * 0.6**9]


def test_reference_config_accepted_verbatim():
    cfg = TrainConfig(epochs=300, batch_size=128, lr0=1e-3, decay_factor=0.6)
    assert (cfg.epochs, cfg.batch_size, cfg.lr0, cfg.decay_factor) == (300, 128, 1e-3, 0.6)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=1), dict(dropout=1.0), dict(lr0=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def _separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    w = np.array([1.0, -2.0, 0.5, 1.5])
    margin = x @ w
    keep = np.abs(margin) > 0.5
    x, y = x[keep], (margin[keep] > 0).astype(int)
    return SampleSet(x.astype(np.float32), y, ["s"] * len(y), np.arange(len(y)), np.zeros(len(y)))


def test_learns_linearly_separable_set():
    tr = _separable(400, 0)
    va = _separable(200, 1)
    assert logistic_separable(tr.features.astype(float), tr.labels)
    cfg = TrainConfig(epochs=20, batch_size=32, seed=0)
    res = train(build_model(4, 2, cfg), tr, va, cfg)
    assert max(r.val_oa for r in res.log) >= 0.99


def test_training_deterministic(tmp_path):
    tr, va = _separable(200, 0), _separable(100, 1)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=7, hidden=(16, 8, 8, 4))
    a = train(build_model(4, 2, cfg), tr, va, cfg)
    b = train(build_model(4, 2, cfg), tr, va, cfg)
    assert write_log_csv(a.log) == write_log_csv(b.log)
    a.final.save(tmp_path / "a")
    b.final.save(tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_log_records_lr_schedule():
    tr, va = _separable(100, 0), _separable(50, 1)
    cfg = TrainConfig(epochs=10, batch_size=16, hidden=(8, 8, 8, 8))
    res = train(build_model(4, 2, cfg), tr, va, cfg)
    assert [r.lr for r in res.log] == [lr_at(e, cfg) for e in range(10)]
    assert res.final.epoch == 10 and 1 <= res.best.epoch <= 10
    assert res.best.metadata["selected_by"] == "best_val"


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    tr, va = _separable(120, 0), _separable(60, 1)
    cfg = TrainConfig(epochs=2, batch_size=16, hidden=(8, 8, 8, 8))
    state = fit_transform("pca", tr.features, np.arange(4) * 100.0 + 400, n_components=3)
    res = train(build_model(4, 2, cfg), tr, va, cfg, transform=state, metadata={"k": 1})
    x = np.random.default_rng(0).normal(size=(30, 4)).astype(np.float32)
    before = forward(res.final.model, x, training=False)
    res.final.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck.json")
    after = forward(loaded.model, x, training=False)
    assert before.tobytes() == after.tobytes()
    for kind in ("m", "v"):
        for k, v in res.final.moments[kind].items():
            assert v.tobytes() == loaded.moments[kind][k].tobytes()
    assert loaded.epoch == 2 and loaded.step == res.final.step
    assert loaded.metadata["k"] == 1
    np.testing.assert_array_equal(loaded.transform.pca.components, state.pca.components)
    loaded.save(tmp_path / "again")
    assert (tmp_path / "again.bin").read_bytes() == (tmp_path / "ck.bin").read_bytes()


def test_checkpoint_manifest_declares_layout(tmp_path):
    m = _model()
    Checkpoint(m, TrainConfig(), 0).save(tmp_path / "m")
    import json

    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["dtype"] == "f32le"
    total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    assert (tmp_path / "m.bin").stat().st_size == 4 * total


def test_non_finite_loss_aborts():
    tr = _separable(64, 0)
    cfg = TrainConfig(epochs=1, batch_size=16, hidden=(4, 4, 4, 4))
    m = build_model(4, 2, cfg)
    m.params["W4"][0, 0] = np.nan
    with pytest.raises(NumericalError):
        train(m, tr, None, cfg)


# predict_pixels


def _tiny_trained():
    tr, va = _separable(100, 0), _separable(50, 1)
    cfg = TrainConfig(epochs=2, batch_size=16, hidden=(8, 8, 8, 8))
    return train(build_model(4, 2, cfg), tr, va, cfg).final.model


def test_predict_pixels_matches_per_pixel_loop():
    model = _tiny_trained()
    rng = np.random.default_rng(3)
    cube = HsCube(rng.uniform(0, 2, size=(8, 8, 4)), [400, 500, 600, 700], "p")
    labels, conf = predict_pixels(model, cube, chunk=7)
    assert labels.shape == (8, 8) and conf.shape == (8, 8)
    for i in range(8):
        for j in range(8):
            p = forward(model, cube.data[i, j][None, :], training=False)[0]
            assert labels[i, j] == int(np.argmax(p))
            assert conf[i, j] == pytest.approx(p.max(), rel=1e-6)


def test_predict_uniform_cube_gives_uniform_map():
    model = _tiny_trained()
    cube = HsCube(np.broadcast_to(np.array([3.0, 0.0, 0.0, 3.0]), (5, 6, 4)), [400, 500, 600, 700], "u")
    labels, _ = predict_pixels(model, cube)
    assert np.all(labels == labels[0, 0])


def test_predict_ties_break_to_lowest_index():
    m = _model(d=4, c=3)
    for v in m.params.values():
        v[...] = 0
    cube = HsCube(np.ones((2, 2, 4)), [1, 2, 3, 4], "t")
    labels, conf = predict_pixels(m, cube)
    assert np.all(labels == 0)
    np.testing.assert_allclose(conf, 1 / 3, rtol=1e-6)


def test_predict_dim_mismatch():
    model = _tiny_trained()
    with pytest.raises(DataError):
        predict_pixels(model, HsCube(np.ones((2, 2, 5)), [1, 2, 3, 4, 5], "x"))
