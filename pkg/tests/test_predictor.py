import numpy as np
import pytest

from otfs_isac import autodiff as ad
from otfs_isac.predictor import (
    ForecastModel,
    MapeReport,
    PredictorConfig,
    block_forward,
    denormalize,
    evaluate_mape,
    fit_linear_ar,
    forward_parts,
    init_model,
    linear_ar_predict,
    load_model,
    make_windows,
    mape_report,
    model_forward,
    normalize,
    persistence_baseline,
    predict_next,
    save_model,
    series_stats,
    train_predictor,
)


def tiny_config(**kw):
    base = dict(lookback=6, hidden=16, n_stacks=2, n_blocks=1,
                batch_size=32, max_epochs=8, patience=10, seed=0)
    base.update(kw)
    return PredictorConfig(**base)


def zeroed(model):
    for blk in model.blocks:
        for k in blk:
            blk[k] = np.zeros_like(blk[k])
    return model


def test_config_validation():
    with pytest.raises(ValueError, match="positive"):
        PredictorConfig(lookback=0)
    with pytest.raises(ValueError, match="positive"):
        PredictorConfig(lr=0.0)
    with pytest.raises(ValueError, match="val_fraction"):
        PredictorConfig(val_fraction=1.0)


def test_zero_weights_predict_zero():
    model = zeroed(init_model(tiny_config(), [0.0], [1.0]))
    back, fore = block_forward(model.blocks[0], np.arange(6.0))
    assert np.all(back == 0.0) and np.all(fore == 0.0)
    assert model_forward(model, np.arange(6.0)) == 0.0


def test_head_shape_contract():
    for zeta in (4, 8, 12):
        model = init_model(tiny_config(lookback=zeta), [0.0], [1.0])
        back, fore = block_forward(model.blocks[0], np.ones(zeta))
        assert back.shape == (zeta,)
        assert fore.shape == (1,)


def test_residual_telescoping():
    model = init_model(tiny_config(n_stacks=3, n_blocks=2), [0.0], [1.0])
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 6))
    _, backs, resid = forward_parts(model.blocks, x)
    assert backs.shape == (6, 5, 6)
    assert np.max(np.abs(backs.sum(axis=0) + resid - x)) < 1e-9


def test_exact_backcast_zeroes_next_block():
    # trunk implements theta = [relu(x), relu(-x)], backcast head recombines
    # to the identity, so the first block explains the window completely
    zeta, width = 4, 8
    eye = np.eye(zeta)
    blk = {
        "w0": np.hstack([eye, -eye]),
        "b0": np.zeros(width),
        "vb": np.vstack([eye, -eye]),
        "cb": np.zeros(zeta),
        "vf": np.zeros((width, 1)),
        "cf": np.zeros(1),
    }
    for j in (1, 2, 3):
        blk[f"w{j}"] = np.eye(width)
        blk[f"b{j}"] = np.zeros(width)
    x = np.random.default_rng(2).normal(size=(3, zeta))
    pred, backs, resid = forward_parts([blk, {k: v.copy() for k, v in blk.items()}], x)
    assert np.max(np.abs(backs[0] - x)) < 1e-12
    assert np.max(np.abs(backs[1])) < 1e-12
    assert np.max(np.abs(resid)) < 1e-12
    assert np.all(pred == 0.0)


def test_block_gradient_matches_finite_differences():
    zeta, width = 4, 6
    model = init_model(tiny_config(lookback=zeta, hidden=width), [0.0], [1.0])
    blk = model.blocks[0]
    x = np.random.default_rng(3).normal(size=(3, zeta))

    def forecast_sum(key):
        def f(wvar):
            tape = wvar.tape
            h = tape.constant(x)
            for j in range(4):
                wj = wvar if key == f"w{j}" else tape.constant(blk[f"w{j}"])
                h = ad.relu(ad.affine(h, wj, tape.constant(blk[f"b{j}"])))
            fore = ad.affine(h, tape.constant(blk["vf"]), tape.constant(blk["cf"]))
            return ad.vsum(fore)
        return f

    for key in ("w0", "w2"):
        assert ad.grad_check(forecast_sum(key), blk[key], step=1e-5) < 1e-4


def test_training_is_deterministic_given_seed():
    rng = np.random.default_rng(4)
    series = np.cumsum(rng.normal(size=(4, 40)), axis=1)
    runs = []
    for _ in range(2):
        model = init_model(tiny_config(max_epochs=4), [0.0], [1.0])
        hist = train_predictor(model, series)
        runs.append((model, hist))
    for blk_a, blk_b in zip(runs[0][0].blocks, runs[1][0].blocks):
        for k in blk_a:
            assert np.array_equal(blk_a[k], blk_b[k])
    assert np.array_equal(runs[0][1], runs[1][1])
    other = init_model(tiny_config(max_epochs=4, seed=9), [0.0], [1.0])
    train_predictor(other, series)
    assert any(
        not np.array_equal(other.blocks[0][k], runs[0][0].blocks[0][k])
        for k in other.blocks[0]
    )


def test_constant_series_converges_within_five_epochs():
    series = np.ones((4, 40))
    model = init_model(
        tiny_config(lr=2e-2, batch_size=8, max_epochs=5, seed=1), [0.0], [1.0]
    )
    hist = train_predictor(model, series)
    assert hist.shape[0] <= 5
    assert hist[-1, 3] < 1e-2  # best validation L1 near zero


def test_best_so_far_column_non_increasing():
    rng = np.random.default_rng(5)
    series = np.cumsum(rng.normal(size=(5, 60)), axis=1)
    model = init_model(tiny_config(max_epochs=12), [0.0], [1.0])
    hist = train_predictor(model, series)
    assert np.all(np.diff(hist[:, 3]) <= 0.0)
    assert np.all(hist[:, 3] <= hist[:, 2] + 1e-15)


def test_too_short_series_rejected():
    model = init_model(tiny_config(), [0.0], [1.0])
    with pytest.raises(ValueError, match="lookback"):
        train_predictor(model, np.ones((2, 6)))


def test_linear_trend_one_step_error_below_one_percent_of_std():
    t = np.arange(120.0)
    mean, std = t.mean(), t.std()
    z = (t - mean) / std
    model = init_model(
        tiny_config(lookback=12, hidden=32, lr=5e-3, batch_size=32,
                    max_epochs=200, patience=25, seed=3),
        [mean], [std],
    )
    train_predictor(model, z[None, :])
    errs = []
    for i in range(12, 120):
        pred = predict_next(model, t[i - 12:i], slot=0)
        errs.append(abs(pred - t[i]))
    assert np.mean(errs) < 0.01 * std
    assert abs(predict_next(model, t[48:60], slot=0) - t[60]) < 0.01 * std


def test_persistence_baseline():
    assert persistence_baseline((1.0, 2.0, 3.0)) == 3.0
    assert persistence_baseline(np.full(5, 7.0)) == 7.0
    s = 0.4
    window = s * np.arange(10.0)
    assert abs(persistence_baseline(window) - s * 10.0) == pytest.approx(s)


def test_linear_ar_fits_linear_series_exactly():
    t = np.arange(60.0)
    z = (t - t.mean()) / t.std()
    coef = fit_linear_ar(z, lookback=4)
    assert coef.shape == (5,)
    for i in (10, 30, 55):
        assert linear_ar_predict(coef, z[i - 4:i]) == pytest.approx(z[i], abs=1e-8)


def test_normalization_round_trip():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 8, 2)) * 1e-6
    mean, std = series_stats(x)
    z = normalize(x, mean, std)
    assert np.max(np.abs(denormalize(z, mean, std) - x)) < 1e-12 * np.max(np.abs(x))
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1.0) < 1e-6


def test_mape_definitional_and_guard():
    truth = np.array([1.0, -2.0, 4.0])
    rep = mape_report(truth, 1.05 * truth)
    assert rep == MapeReport(pytest.approx(5.0), 3, 0)
    guarded = mape_report(np.array([1.0, 1e-20, 2.0]), np.array([1.0, 5.0, 2.0]))
    assert guarded.percent == pytest.approx(0.0)
    assert guarded.n_used == 2 and guarded.n_excluded == 1
    with pytest.raises(ValueError, match="zero"):
        mape_report(np.zeros(3), np.ones(3))


def test_evaluate_mape_zero_model_on_constant_series():
    series = np.full((2, 20, 1), 3.0)
    model = zeroed(init_model(tiny_config(), [3.0], [1.0]))
    rep = evaluate_mape(model, series)
    assert rep.percent == 0.0 and rep.n_excluded == 0


def test_make_windows():
    X, y, sid = make_windows(np.array([[0.0, 1.0, 2.0, 3.0, 4.0]]), 2)
    assert np.array_equal(X, [[0, 1], [1, 2], [2, 3]])
    assert np.array_equal(y, [2, 3, 4])
    assert np.array_equal(sid, [0, 0, 0])
    with pytest.raises(ValueError, match="lookback"):
        make_windows(np.ones((1, 4)), 4)


def test_model_serialization_round_trip(tmp_path):
    model = init_model(tiny_config(seed=8), [1.5, -0.5], [2.0, 0.25])
    rng = np.random.default_rng(7)
    series = np.cumsum(rng.normal(size=(3, 30)), axis=1)
    train_predictor(model, series)
    path = tmp_path / "model.npz"
    save_model(path, model, extra_meta={"parameter": "tau"})
    back, header = load_model(path)
    assert header["parameter"] == "tau"
    assert back.config == model.config
    assert np.array_equal(back.norm_mean, model.norm_mean)
    x = rng.normal(size=(10, model.config.lookback))
    a, _, _ = forward_parts(model.blocks, x)
    b, _, _ = forward_parts(back.blocks, x)
    assert np.array_equal(a, b)
