import numpy as np
import pytest

from magloc.magdata import WindowedDataset
from magloc.neuralnet import ModelSpec, init_params
from magloc.train import (
    EarlyStopping,
    OptimizerState,
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    adam_step,
    fit_output_scaling,
    mse_loss,
    predict,
    train,
)


def toy_dataset(n, T, seed):
    """Windows whose label is a smooth function of the window content."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, T, 3))
    y = np.stack([x[:, -4:, 0].mean(axis=1), x[:, :, 1].mean(axis=1) - x[:, -1, 2]], axis=1)
    return WindowedDataset(x, y, T, np.array(["toy"] * n, dtype=object), np.arange(n) + T - 1)


# ---------------------------------------------------------------------- loss


def test_mse_zero_when_equal():
    y = np.arange(6.0).reshape(3, 2)
    loss, g = mse_loss(y, y)
    assert loss == 0.0
    assert not g.any()


def test_mse_examples():
    assert mse_loss([[1.0, 1.0]], [[0.0, 0.0]])[0] == 1.0
    loss, g = mse_loss([[1.0, 0.0], [0.0, 2.0]], np.zeros((2, 2)))
    assert loss == 1.25
    np.testing.assert_array_equal(g, [[0.5, 0.0], [0.0, 1.0]])


def test_mse_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        mse_loss(np.zeros((2, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------------- Adam


def test_adam_zero_gradient_from_fresh_state_is_noop():
    p = {"w": np.array([1.5, -2.0, 0.25])}
    before = p["w"].copy()
    state = OptimizerState.zeros_like(p)
    adam_step(p, {"w": np.zeros(3)}, state, 1e-3)
    assert p["w"].tobytes() == before.tobytes()
    assert state.step == 1


def test_adam_zero_gradient_decays_moments():
    p = {"w": np.array([1.0])}
    state = OptimizerState.zeros_like(p)
    adam_step(p, {"w": np.array([2.0])}, state, 1e-3)
    m, v = state.m["w"].copy(), state.v["w"].copy()
    adam_step(p, {"w": np.zeros(1)}, state, 1e-3)
    np.testing.assert_allclose(state.m["w"], 0.9 * m)
    np.testing.assert_allclose(state.v["w"], 0.999 * v)


@pytest.mark.parametrize("g", [1e-3, 0.5, -3.0, 250.0])
def test_adam_first_step_is_lr_times_sign(g):
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([g])}, OptimizerState.zeros_like(p), 1e-2)
    # closed form after one step: m_hat = g, v_hat = g**2
    assert p["w"][0] == pytest.approx(-1e-2 * g / (abs(g) + 1e-8), rel=1e-12)
    assert abs(p["w"][0] + 1e-2 * np.sign(g)) < 1e-6


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": np.array([0.0])}
    state = OptimizerState.zeros_like(p)
    trail = []
    for _ in range(3):
        adam_step(p, {"w": np.array([0.7])}, state, 1e-3)
        trail.append(p["w"][0])
    assert trail[0] < 0 and trail[1] < trail[0] and trail[2] < trail[1]


# ------------------------------------------------------------ early stopping


def test_increasing_loss_stops_after_patience():
    es = EarlyStopping(3)
    stops = [es.update(e, float(e)) for e in range(1, 10)]
    assert stops.index(True) + 1 == 4
    assert es.best_epoch == 1


def test_improvement_resets_patience():
    es = EarlyStopping(2)
    assert not es.update(1, 5.0)
    assert not es.update(2, 6.0)
    assert not es.update(3, 4.0)
    assert not es.update(4, 4.0)
    assert es.update(5, 4.5)
    assert es.best_epoch == 3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=20, max_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


# -------------------------------------------------------------------- train


def small_spec(ds, **kw):
    kw = {"K": 2, "M": 3, "hidden": 4, **kw}
    return fit_output_scaling(ModelSpec("MSTL", T=ds.window_size, **kw), ds.labels)


def test_patience_equal_to_max_epochs_runs_every_epoch():
    ds = toy_dataset(12, 4, 0)
    _, h = train(small_spec(ds), ds, ds, TrainConfig(max_epochs=6, patience=6))
    assert h.stopped_epoch == 6
    assert len(h.train_loss) == len(h.val_loss) == 6


def test_stops_when_validation_only_gets_worse():
    ds = toy_dataset(16, 4, 1)
    spec = small_spec(ds)

    # a validation set far from the training labels; each epoch moves further away
    far = WindowedDataset(ds.features, ds.labels + 50.0, 4, ds.trace_ids, ds.end_index)
    _, h = train(spec, ds, far, TrainConfig(learning_rate=1e-2, max_epochs=50, patience=3))
    assert h.stopped_epoch == h.best_epoch + 3
    assert h.stopped_epoch < 50


def test_returns_best_validation_parameters():
    tr, va = toy_dataset(30, 4, 2), toy_dataset(10, 4, 3)
    spec = small_spec(tr)
    best, h = train(spec, tr, va, TrainConfig(learning_rate=1e-2, max_epochs=15, patience=15))
    assert h.best_epoch == int(np.argmin(h.val_loss)) + 1
    val = mse_loss(predict(spec, best, va.features), va.labels)[0]
    assert val == pytest.approx(min(h.val_loss), rel=1e-12)


def test_loss_decreases_on_tiny_set():
    ds = toy_dataset(20, 8, 4)
    spec = small_spec(ds, K=3)
    params = init_params(spec, 0)
    initial = mse_loss(predict(spec, params, ds.features), ds.labels)[0]
    best, _ = train(spec, ds, ds, TrainConfig(max_epochs=50, patience=50), params=params)
    assert mse_loss(predict(spec, best, ds.features), ds.labels)[0] < initial


def test_histories_bitwise_identical():
    tr, va = toy_dataset(40, 4, 5), toy_dataset(10, 4, 6)
    spec = small_spec(tr)
    cfg = TrainConfig(batch_size=8, max_epochs=5, patience=5, seed=3)
    p1, h1 = train(spec, tr, va, cfg)
    p2, h2 = train(spec, tr, va, cfg)
    assert h1.to_json() == h2.to_json()
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


def test_ten_window_memorization():
    ds = toy_dataset(10, 8, 7)
    spec = fit_output_scaling(ModelSpec("MSTL", T=8, K=3, M=10, hidden=32), ds.labels)
    losses = []

    def stop_when_memorized(epoch, params, history):
        losses.append(history.train_loss[-1])
        return history.train_loss[-1] < 1e-3

    train(spec, ds, ds, TrainConfig(max_epochs=500, patience=500), callback=stop_when_memorized)
    assert min(losses) < 1e-3
    assert len(losses) <= 500


def test_callback_can_stop():
    ds = toy_dataset(8, 4, 8)
    _, h = train(small_spec(ds), ds, ds, TrainConfig(max_epochs=20, patience=20),
                 callback=lambda e, p, h: e == 4)
    assert h.stopped_epoch == 4


def test_divergence_names_epoch_and_batch():
    ds = toy_dataset(8, 4, 9)
    bad = WindowedDataset(ds.features, ds.labels * np.inf, 4, ds.trace_ids, ds.end_index)
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(small_spec(ds), bad, ds, TrainConfig(max_epochs=2, patience=2))


def test_window_shape_must_match_spec():
    ds = toy_dataset(8, 4, 10)
    with pytest.raises(ValueError, match="model expects"):
        train(ModelSpec("LSTM_ONLY", T=8, hidden=2), ds, ds, TrainConfig(max_epochs=1, patience=1))


def test_history_json_round_trip(tmp_path):
    h = TrainHistory([1.0, 0.5], [1.1, 0.7], 2, 2)
    h.save(tmp_path / "h.json")
    assert TrainHistory.from_json((tmp_path / "h.json").read_text()) == h
