"""
Federated training across households
====================================

Five households each keep their own windows. Every round the server
broadcasts the global forecaster, each client trains locally, and the
server averages the returned parameters.
"""
import numpy as np

from fedload.data import MinMaxStats, duty_cycle_household, make_windows
from fedload.federated import Client, FederatedConfig, run_federated
from fedload.models import ForecastConfig

fc = ForecastConfig(window_len=32)
clients, val_X, val_y = [], [], []
for s in range(5):
    agg = duty_cycle_household(s, 400).aggregate.values
    stats = MinMaxStats.fit(agg[:320])
    z = stats.normalize(agg)
    clients.append(Client(f"house{s + 1}", make_windows(z[:320], 32)))
    v = make_windows(z[320 - 32:], 32)
    val_X.append(v.X)
    val_y.append(v.y)
val = (np.concatenate(val_X), np.concatenate(val_y))

cfg = FederatedConfig(rounds=5, local_epochs=2, forecast=fc)
res = run_federated(clients, cfg, val)
print(f"round 0: validation RMSE {np.sqrt(res.initial_val_loss):.4f}")
for log in res.logs:
    print(f"round {log.round}: clients {log.client_count}, mean local MSE {log.mean_local_loss:.4f}, "
          f"validation RMSE {np.sqrt(log.global_val_loss):.4f}")
