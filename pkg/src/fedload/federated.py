"""In-process FedAvg simulation: client sampling, local training, parameter
averaging, round logs and the local-epochs / client-fraction sweep.

Clients hold their samples privately. The server only ever sends and
receives :class:`~fedload.diffcore.ParamTree` objects (model parameters and,
optionally, Adam moment trees) plus scalar losses and sample counts.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Samples, atomic_write_text
from .diffcore import LayoutError, ParamTree, check_same_layout
from .layers import AdamState
from .models import (
    ForecastConfig,
    ForecastModel,
    _as_samples,
    build_forecaster,
    forecast_loss,
    train_supervised,
)

WEIGHTING_MODES = ("uniform", "sample-size")


class FederatedError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederatedConfig:
    rounds: int = 20
    local_epochs: int = 5
    client_fraction: float = 1.0
    seed: int = 0
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    lr: float | None = None
    batch_size: int | None = None
    weighting: str = "uniform"
    # average Adam moments alongside the parameters instead of restarting Adam each round
    share_optimizer_state: bool = True

    def __post_init__(self):
        if not (isinstance(self.rounds, int) and self.rounds >= 1):
            raise ValueError("rounds: must be an integer >= 1")
        if not (isinstance(self.local_epochs, int) and self.local_epochs >= 1):
            raise ValueError("local_epochs: must be an integer >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction: must lie in (0, 1]")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"weighting: must be one of {WEIGHTING_MODES}")

    @property
    def effective_lr(self) -> float:
        return self.forecast.lr if self.lr is None else self.lr

    @property
    def effective_batch_size(self) -> int:
        return self.forecast.batch_size if self.batch_size is None else self.batch_size


@dataclass(frozen=True)
class ClientUpdate:
    """What a client uploads after local training."""

    params: ParamTree
    loss: float
    n_samples: int
    loss_history: tuple[float, ...] = ()
    opt_state: AdamState | None = None


class Client:
    """A household holding private training samples.

    The only public entry point that touches the samples is :meth:`train`,
    which consumes a parameter tree and returns a :class:`ClientUpdate`.
    """

    def __init__(self, client_id: str, samples):
        self.client_id = str(client_id)
        self._samples = _as_samples(samples)

    @property
    def n_samples(self) -> int:
        return len(self._samples.y)

    def train(self, global_params: ParamTree, config: ForecastConfig, epochs: int, lr: float,
              batch_size: int, seed: int, start_epoch: int = 0,
              opt_state: AdamState | None = None) -> ClientUpdate:
        if self.n_samples == 0:
            raise ValueError(f"client {self.client_id} has no samples")
        model = ForecastModel(global_params, config)
        model, hist, state = train_supervised(
            model, self._samples, epochs, batch_size=batch_size, lr=lr, seed=seed,
            start_epoch=start_epoch, opt_state=opt_state, return_state=True,
        )
        return ClientUpdate(model.params, float(hist[-1]) if hist else float("nan"),
                            self.n_samples, tuple(hist), state)


@dataclass(frozen=True)
class ClientState:
    client_id: str
    client: Client
    local_params: ParamTree | None = None


@dataclass(frozen=True)
class RoundLog:
    round: int
    selected: tuple[str, ...]
    local_losses: Mapping[str, float]
    global_val_loss: float

    @property
    def client_count(self) -> int:
        return len(self.selected)

    @property
    def mean_local_loss(self) -> float:
        # unweighted mean of the uploaded losses, reported per round
        return float(sum(self.local_losses[c] for c in self.selected) / len(self.selected))


def n_selected(n_clients: int, fraction: float) -> int:
    # tolerance guards against 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(fraction * n_clients - 1e-9))


def round_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, 0x5A17])


def sample_clients(client_ids: Sequence[str], fraction: float, rng: np.random.Generator) -> list[str]:
    """Uniform sample without replacement of ``ceil(C * N)`` ids, returned sorted."""
    ids = sorted(client_ids)
    if not ids:
        raise ValueError("no clients to sample from")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("client fraction must lie in (0, 1]")
    k = n_selected(len(ids), fraction)
    pick = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in pick)


def local_update(global_params: ParamTree, client: Client, epochs: int, config: ForecastConfig,
                 lr: float | None = None, batch_size: int | None = None, seed: int | None = None):
    """Train a copy of ``global_params`` on one client; returns ``(params, final_loss)``."""
    up = client.train(global_params, config, epochs, config.lr if lr is None else lr,
                      batch_size or config.batch_size, config.seed if seed is None else seed)
    return up.params, up.loss


def fedavg(param_sets: Sequence[ParamTree], weights: Sequence[float] | None = None,
           keys: Sequence[str] | None = None) -> ParamTree:
    """Weighted elementwise mean of parameter trees.

    Accumulated as ``p0 + sum_i w_i (p_i - p0)`` in a fixed order, so averaging
    identical trees (or a single tree) returns the input bit for bit. Passing
    ``keys`` sorts the sets (and weights) by key before accumulating.
    """
    sets = list(param_sets)
    if not sets:
        raise ValueError("fedavg needs at least one parameter set")
    n = len(sets)
    w = [1.0 / n] * n if weights is None else [float(x) for x in weights]
    if len(w) != n:
        raise ValueError(f"{n} parameter sets but {len(w)} weights")
    if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-12:
        raise ValueError("weights must be non-negative and sum to 1")
    if keys is not None:
        if len(keys) != n:
            raise ValueError(f"{n} parameter sets but {len(keys)} keys")
        order = sorted(range(n), key=lambda i: keys[i])
        sets = [sets[i] for i in order]
        w = [w[i] for i in order]
    ref = sets[0]
    for s in sets[1:]:
        try:
            check_same_layout(ref, s)
        except LayoutError as exc:
            raise LayoutError(f"fedavg: {exc}") from None
    out = {}
    for path in ref:
        base = ref[path]
        acc = np.zeros_like(base)
        for wi, s in zip(w, sets):
            acc += wi * (s[path] - base)
        out[path] = base + acc
    return ParamTree(out)


def _aggregate_opt_states(states: Sequence[AdamState], weights, keys) -> AdamState:
    m = fedavg([s.m for s in states], weights, keys)
    v = fedavg([s.v for s in states], weights, keys)
    return AdamState(m, v, max(s.step_count for s in states))


def validation_loss(params: ParamTree, config: ForecastConfig, validation) -> float:
    X, y = _as_samples(validation)
    return forecast_loss(params, config, X, np.clip(y, 0.0, 1.0))


@dataclass
class FederatedResult:
    model: ForecastModel
    logs: list[RoundLog]
    initial_val_loss: float | None = None

    def __iter__(self):
        # unpacks as (model, logs)
        return iter((self.model, self.logs))


def run_federated(clients: Sequence[Client], config: FederatedConfig, validation=None,
                  initial: ForecastModel | None = None, max_workers: int = 1) -> FederatedResult:
    """Broadcast -> sample -> local train -> average, for ``config.rounds`` rounds.

    Local updates within a round may run on a thread pool; aggregation always
    happens in client-id order so the result does not depend on scheduling.
    """
    if not clients:
        raise FederatedError("no clients")
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != len(clients):
        raise FederatedError("client ids must be unique")
    fcfg = config.forecast
    model = initial if initial is not None else build_forecaster(fcfg)
    params = model.params
    opt_state = AdamState.zeros_like(params) if config.share_optimizer_state else None
    lr, bs, E = config.effective_lr, config.effective_batch_size, config.local_epochs
    init_val = validation_loss(params, fcfg, validation) if validation is not None else None
    logs: list[RoundLog] = []

    def work(cid: str, t: int) -> ClientUpdate:
        try:
            return by_id[cid].train(params, fcfg, E, lr, bs, config.seed, start_epoch=t * E,
                                    opt_state=opt_state)
        except Exception as exc:  # attach round/client context
            raise FederatedError(f"round {t + 1}, client {cid}: {exc}") from exc

    pool = ThreadPoolExecutor(max_workers) if max_workers > 1 else None
    try:
        for t in range(config.rounds):
            selected = sample_clients(list(by_id), config.client_fraction, round_rng(config.seed, t))
            if pool is None:
                updates = [work(cid, t) for cid in selected]
            else:
                updates = list(pool.map(lambda cid: work(cid, t), selected))
            if config.weighting == "sample-size":
                total = sum(u.n_samples for u in updates)
                weights = [u.n_samples / total for u in updates]
            else:
                weights = None
            try:
                params = fedavg([u.params for u in updates], weights, keys=selected)
                if opt_state is not None:
                    opt_state = _aggregate_opt_states([u.opt_state for u in updates], weights, selected)
            except Exception as exc:
                raise FederatedError(f"round {t + 1}, aggregation: {exc}") from exc
            val = validation_loss(params, fcfg, validation) if validation is not None else float("nan")
            logs.append(RoundLog(t + 1, tuple(selected), {c: u.loss for c, u in zip(selected, updates)}, val))
    finally:
        if pool is not None:
            pool.shutdown()
    return FederatedResult(model.with_params(params), logs, init_val)


def round_logs_csv(logs: Sequence[RoundLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "client_count", "mean_local_loss", "global_val_loss"])
    for r in logs:
        w.writerow([r.round, r.client_count, repr(r.mean_local_loss), repr(float(r.global_val_loss))])
    return buf.getvalue()


def write_round_logs(logs: Sequence[RoundLog], path) -> None:
    atomic_write_text(path, round_logs_csv(logs))


# --------------------------------------------------------------------------
# robustness sweep
# --------------------------------------------------------------------------

@dataclass
class SweepCurve:
    local_epochs: int
    client_fraction: float
    losses: list[float]
    initial_loss: float | None = None

    @property
    def filename(self) -> str:
        return f"sweep_E{self.local_epochs}_C{float(self.client_fraction)}.csv"


def robustness_sweep(clients: Sequence[Client], base: FederatedConfig, e_values: Sequence[int],
                     c_values: Sequence[float], validation) -> dict[tuple[int, float], SweepCurve]:
    """One validation-loss-vs-round curve per (local epochs, client fraction) pair."""
    if not e_values or not c_values:
        raise ValueError("sweep grids must be non-empty")
    out = {}
    for E in e_values:
        for C in c_values:
            cfg = replace(base, local_epochs=int(E), client_fraction=float(C))
            res = run_federated(clients, cfg, validation)
            out[(int(E), float(C))] = SweepCurve(int(E), float(C), [r.global_val_loss for r in res.logs],
                                                 res.initial_val_loss)
    return out


def sweep_csv(curve: SweepCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "global_val_loss"])
    for i, v in enumerate(curve.losses, start=1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def write_sweep(curves: Mapping[tuple[int, float], SweepCurve], out_dir) -> list[Path]:
    paths = []
    for key in sorted(curves):
        c = curves[key]
        p = Path(out_dir) / c.filename
        atomic_write_text(p, sweep_csv(c))
        paths.append(p)
    return paths


def clients_from_series(series: Mapping[str, Samples]) -> list[Client]:
    return [Client(cid, s) for cid, s in sorted(series.items())]
