"""
Checking hand-written backward passes
=====================================

Every layer in ``fedload.layers`` ships its own backward pass. Here we
compare those against central finite differences on a tiny forecaster.
"""
import numpy as np

from fedload.diffcore import finite_difference_gradient, max_relative_error
from fedload.models import ForecastConfig, build_forecaster, forecast_loss, forecast_loss_and_grad, predict

cfg = ForecastConfig(window_len=4, layer1_hidden=3, layer2_hidden=2)
rng = np.random.default_rng(0)
model = build_forecaster(cfg, rng)
print("parameters:", model.params.size)
for path in model.params:
    print(f"  {path:24s} {model.params[path].shape}")

# %%
# Targets sit close to the current predictions, which keeps the loss small
# and the finite-difference round-off well below the smallest gradient entries.
X = rng.random((2, 4))
y = predict(model, X) + rng.uniform(-0.05, 0.05, 2)
loss, grads = forecast_loss_and_grad(model.params, cfg, X, y)
numeric = finite_difference_gradient(lambda p: forecast_loss(p, cfg, X, y), model.params, 1e-5)
print(f"loss {loss:.6f}, worst relative gradient error {max_relative_error(grads, numeric):.2e}")
