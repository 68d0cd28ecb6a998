"""Fill unobserved variables by attention, then damp them by their Monte Carlo spread."""

import numpy as np

from ibn import autodiff as ad
from ibn.imputation import DropoutStream, IAParams, UAIParams, interpolation_attention, uai_forward

rng = np.random.default_rng(1)
n, d = 6, 4
mask = np.array([True, True, False, True, False, True])
x = rng.normal(size=(n, d)) * mask[:, None]

ia = IAParams(ad.Var(rng.normal(size=(n, 3))), ad.Var(np.eye(1, d)), ad.Var(np.zeros(d)))
filled = interpolation_attention(x, mask, ia).value
print("rows 2 and 4 were zero, now:\n", filled[~mask].round(3))

uai = UAIParams(ad.Var(rng.normal(size=(d, d)) / np.sqrt(d)), ad.Var(np.zeros(d)))
out = uai_forward(filled, uai, DropoutStream(seed=0), key=(0,))
print("mean spread per variable", out.sigma.value.mean(axis=1).round(3))
print("x_hat = mu / (1 + sigma):", np.allclose(out.x_hat.value, out.mu.value / (1 + out.sigma.value)))

quiet = uai_forward(filled, UAIParams(uai.w, uai.b, p=0.0), DropoutStream(seed=0), key=(0,))
print("with p = 0 the spread vanishes:", bool((quiet.sigma.value == 0).all()))
