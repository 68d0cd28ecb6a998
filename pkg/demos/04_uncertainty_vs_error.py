"""Per hidden variable and window: reconstruction error next to the first-layer spread."""

import numpy as np

from ibn.data import generate_synthetic, prepare_dataset
from ibn.diagnostics import edge_contrast, export_adjacency, uncertainty_diagnostics
from ibn.recurrent import ForecastModel, ModelConfig
from ibn.training import TrainConfig, train

series, adj = generate_synthetic(n=8, t=600, seed=3)
ds = prepare_dataset(series, h=8, l=2, rate=0.5, seed=0, stride=4)
model = ForecastModel.init(ModelConfig(n=8, h=8, l=2, d=8), adj, seed=0)
model, _ = train(model, ds, TrainConfig(max_epochs=10, lr=2e-3, seed=0))

table = uncertainty_diagnostics(model, ds["test"])
order = np.argsort(table.sigma)
print("lowest-spread rows: error", table.reconstruction_error[order[:5]].round(3))
print("highest-spread rows: error", table.reconstruction_error[order[-5:]].round(3))
print("Spearman rho:", table.rho)

a_pre, a_gau = export_adjacency(model, ds["test"].x_m[0], ds["test"].mask)
print("a_gau weight on true edges vs non-edges: %.4f vs %.4f" % edge_contrast(a_gau, adj))
