"""Train on the synthetic diffusion set with half the variables hidden; compare with baselines.

Takes a couple of minutes on one core.
"""

import time

from ibn.data import generate_synthetic, prepare_dataset
from ibn.recurrent import ForecastModel, ModelConfig
from ibn.training import TrainConfig, evaluate, last_value_baseline, mean_baseline, report_from_predictions, train

series, adj = generate_synthetic(n=12, t=2000, seed=0)
ds = prepare_dataset(series, h=12, l=3, rate=0.5, seed=0, stride=4)
print("hidden variables:", [i for i, keep in enumerate(ds["train"].mask) if not keep])

model = ForecastModel.init(ModelConfig(n=12, h=12, l=3, d=16), adj, seed=0)
t0 = time.perf_counter()
model, history = train(model, ds, TrainConfig(max_epochs=30, lr=2e-3, seed=0))
print(f"{len(history)} epochs in {time.perf_counter() - t0:.0f}s, "
      f"train MAE {history[0]['train_mae']:.3f} -> {history[-1]['train_mae']:.3f}")

test = ds["test"]
for name, rep in [("model", evaluate(model, test)),
                  ("last value", report_from_predictions(test, last_value_baseline(test))),
                  ("train mean", report_from_predictions(test, mean_baseline(test)))]:
    print(f"{name:>10}: MAE {rep.mae:.4f}  RMSE {rep.rmse:.4f}")
