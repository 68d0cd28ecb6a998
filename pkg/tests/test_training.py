import dataclasses
import math

import numpy as np
import pytest

from ibn import autodiff as ad
from ibn.data import generate_synthetic, prepare_dataset
from ibn.imputation import DropoutStream
from ibn.recurrent import ForecastModel, ModelConfig, ibn_forward
from ibn.training import (
    VARIANTS,
    AdamState,
    TrainConfig,
    TrainState,
    adam_step,
    apply_ablation,
    clip_by_global_norm,
    evaluate,
    last_value_baseline,
    load_checkpoint,
    mean_baseline,
    metrics,
    predict,
    report_from_predictions,
    save_checkpoint,
    summarize_ablation,
    train,
    write_ablation_csv,
    write_history,
)


@pytest.fixture(scope="module")
def tiny():
    series, adj = generate_synthetic(n=4, t=160, seed=3)
    ds = prepare_dataset(series, h=4, l=2, rate=0.5, seed=1, stride=2)
    cfg = ModelConfig(n=4, h=4, l=2, d=4, embed_dim=3)
    return ds, adj, cfg


def _fresh(tiny, seed=0, **kw):
    ds, adj, cfg = tiny
    return ForecastModel.init(dataclasses.replace(cfg, **kw), adj, seed=seed)


class TestMetrics:
    def test_small_example(self):
        rep = metrics(np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        assert rep.mae == pytest.approx(1.5)
        assert rep.rmse == pytest.approx(math.sqrt(2.5))
        # |1-2|/1 = 1 and |2-4|/2 = 1
        assert rep.mape == pytest.approx(100.0)

    def test_mape_skips_near_zero(self):
        rep = metrics(np.array([[0.0, 1e-4, 2.0]]), np.array([[5.0, 5.0, 3.0]]))
        assert rep.mape == pytest.approx(50.0)

    def test_mape_undefined(self):
        rep = metrics(np.zeros((2, 3)), np.ones((2, 3)))
        assert rep.mape is None
        assert rep.mae == 1.0

    def test_per_variable(self):
        y = np.zeros((5, 2, 3))
        y_hat = np.zeros((5, 2, 3))
        y_hat[:, 1] = 2.0
        rep = metrics(y, y_hat)
        assert rep.per_variable["mae"] == [0.0, 2.0]
        assert rep.mae == pytest.approx(np.mean(rep.per_variable["mae"]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            metrics(np.zeros(3), np.zeros(4))

    def test_original_units(self, tiny):
        ds = tiny[0]
        test = ds["test"]
        rep = report_from_predictions(test, test.y + 1.0)
        # one normalized unit is one training std in original units
        assert rep.normalized_mae == pytest.approx(1.0)
        assert rep.mae == pytest.approx(float(np.mean(test.scaler.std)))


class TestOptimizer:
    def test_first_adam_step(self):
        p = {"w": ad.Var(np.array([1.0, -2.0]))}
        cfg = TrainConfig(lr=0.1)
        adam_step(p, {"w": np.array([0.3, -4.0])}, AdamState(), cfg)
        # bias-corrected first step moves by lr * sign(g)
        np.testing.assert_allclose(p["w"].value, [0.9, -1.9], rtol=1e-6)

    def test_zero_gradient_no_move(self):
        p = {"w": ad.Var(np.array([1.0, 2.0]))}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), TrainConfig())
        np.testing.assert_array_equal(p["w"].value, [1.0, 2.0])

    def test_clip(self):
        grads, norm = clip_by_global_norm({"a": np.array([6.0]), "b": np.array([8.0])}, 5.0)
        assert norm == pytest.approx(10.0)
        np.testing.assert_allclose(grads["a"], [3.0])
        np.testing.assert_allclose(grads["b"], [4.0])

    def test_no_clip_below_threshold(self):
        g = {"a": np.array([1.0, 1.0])}
        out, _ = clip_by_global_norm(g, 5.0)
        assert out["a"] is g["a"]

    @pytest.mark.parametrize("field,value", [("lr", 0.0), ("batch_size", 0), ("patience", 0)])
    def test_invalid_config(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})


class TestBaselines:
    def test_last_value(self, tiny):
        test = tiny[0]["test"]
        out = last_value_baseline(test)
        assert out.shape == test.y.shape
        np.testing.assert_array_equal(out[:, :, 1], test.x_m[:, :, -1, 0])
        assert (out[:, ~test.mask] == 0.0).all()

    def test_mean(self, tiny):
        test = tiny[0]["test"]
        rep = report_from_predictions(test, mean_baseline(test))
        assert rep.normalized_mae == pytest.approx(float(np.mean(np.abs(test.y))))

    def test_constant_model_matches_mean_baseline(self, tiny):
        model = _fresh(tiny)
        for name, p in model.decoder.items():
            p.value = np.zeros_like(p.value)
        test = tiny[0]["test"]
        np.testing.assert_array_equal(predict(model, test), mean_baseline(test))


class TestTraining:
    def test_zero_epochs(self, tiny):
        model = _fresh(tiny)
        before = model.state_dict()
        _, history = train(model, tiny[0], TrainConfig(max_epochs=0))
        assert history == []
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_loss_decreases(self, tiny):
        model = _fresh(tiny)
        _, history = train(model, tiny[0], TrainConfig(max_epochs=6, lr=3e-3, batch_size=8))
        assert history[-1]["train_mae"] < history[0]["train_mae"]
        assert [r["epoch"] for r in history] == list(range(1, 7))

    def test_deterministic(self, tiny):
        cfg = TrainConfig(max_epochs=2, batch_size=8, seed=4)
        runs = []
        for _ in range(2):
            model, history = train(_fresh(tiny), tiny[0], cfg)
            runs.append(([(r["train_mae"], r["val_mae"]) for r in history], model.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_early_stopping_restores_best(self, tiny):
        # a huge learning rate makes validation worse after the first epoch
        cfg = TrainConfig(max_epochs=30, patience=2, lr=0.5, batch_size=8)
        model, history = train(_fresh(tiny), tiny[0], cfg)
        best = min(r["val_mae"] for r in history)
        assert len(history) < 30
        val = tiny[0]["val"]
        np.testing.assert_allclose(np.mean(np.abs(predict(model, val, cfg.eval_seed) - val.y)), best, rtol=1e-12)

    def test_checkpoint_resume_is_bit_exact(self, tiny, tmp_path):
        cfg = TrainConfig(max_epochs=4, batch_size=8, patience=10)
        straight, hist_a = train(_fresh(tiny), tiny[0], cfg)

        model = _fresh(tiny)
        state = TrainState()
        train(model, tiny[0], cfg, state=state, epochs=2)
        save_checkpoint(tmp_path / "ck", model, tiny[0]["train"].scaler, tiny[0]["train"].mask, state)
        resumed, scaler, mask, state2, _ = load_checkpoint(tmp_path / "ck")
        _, hist_b = train(resumed, tiny[0], cfg, state=state2)

        strip = [{k: v for k, v in r.items() if k != "seconds"} for r in hist_a]
        assert strip == [{k: v for k, v in r.items() if k != "seconds"} for r in hist_b]
        for k, v in straight.state_dict().items():
            np.testing.assert_array_equal(resumed.state_dict()[k], v)
        np.testing.assert_array_equal(mask, tiny[0]["train"].mask)
        np.testing.assert_array_equal(scaler.std, tiny[0]["train"].scaler.std)

    def test_evaluate_is_reproducible(self, tiny):
        model = _fresh(tiny)
        a = evaluate(model, tiny[0]["test"], seed=11)
        b = evaluate(model, tiny[0]["test"], seed=11)
        assert a.to_dict() == b.to_dict()

    def test_write_history(self, tmp_path):
        write_history(tmp_path / "h.csv", [{"epoch": 1, "train_mae": 0.5, "val_mae": 0.25, "seconds": 1.0}])
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines == ["epoch,train_mae,val_mae,seconds", "1,0.5,0.25,1.000"]


class TestAblation:
    def test_flags(self, tiny):
        cfg = tiny[2]
        out = apply_ablation(cfg, TrainConfig(uai_to_ia=True, bi_to_uni=True))
        assert (out.use_uai, out.bidirectional, out.graph) == (False, False, "gaussian")

    def test_parameter_counts(self, tiny):
        counts = {name: _fresh(tiny, **change).num_parameters() for name, change in VARIANTS.items()}
        assert counts["UAI->IA"] == counts["IBN"]
        assert counts["GGCN->AGCN"] > counts["IBN"]
        assert counts["Bi-RU->Uni-RU"] < counts["IBN"]

    def test_no_uai_has_zero_spread(self, tiny):
        model = _fresh(tiny, use_uai=False)
        trace = {}
        x = tiny[0]["test"]
        a = ibn_forward(x.x_m[:3], x.mask, model, DropoutStream(0), trace=trace).value
        b = ibn_forward(x.x_m[:3], x.mask, model, DropoutStream(1)).value
        assert all((step["sigma"] == 0.0).all() for step in trace["l1f"])
        np.testing.assert_array_equal(a, b)

    def test_summary_and_csv(self, tmp_path):
        rows = [{"dataset": "d", "variant": v, "seed": s, "rmse": 1.0 + s, "mape": None, "mae": 2.0 * s}
                for v in ("IBN", "UAI->IA") for s in (0, 1)]
        summary = summarize_ablation(rows)
        assert summary["d"]["IBN"]["rmse"] == 1.5
        assert summary["d"]["IBN"]["mae"] == 1.0
        assert math.isnan(summary["d"]["IBN"]["mape"])
        write_ablation_csv(tmp_path / "t.csv", rows)
        header, row = (tmp_path / "t.csv").read_text().splitlines()
        assert header.split(",")[:4] == ["dataset", "IBN:rmse", "IBN:mape", "IBN:mae"]
        assert row.startswith("d,1.5,nan,1")
