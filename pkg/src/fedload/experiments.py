"""Integrated-vs-direct forecasting runs and the multi-model comparison table.

Pipeline per household: split train/test, obtain the channels to forecast
(sub-metered appliance channels, NILM estimates, or just the aggregate),
normalize each channel with its own training-split min/max, train one
forecaster per channel (pooled-centralized or federated across households),
predict the test block one step ahead, and score the summed forecast against
the true aggregate.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import (
    HouseholdDataset,
    MinMaxStats,
    Samples,
    SplitSpec,
    atomic_write_text,
    make_windows,
)
from .federated import Client, FederatedConfig, run_federated, write_round_logs
from .metrics import MetricsReport
from .models import (
    ConfigError,
    DisaggConfig,
    ForecastConfig,
    ForecastModel,
    build_disaggregator,
    build_forecaster,
    disaggregate_values,
    predict,
    train_disaggregator,
    train_supervised,
)

MODES = ("integrated", "direct")
TRAININGS = ("federated", "centralized")

# name -> (training, network kind)
COMPARE_MODELS = {
    "feddl": ("federated", "bilstm_attention"),
    "bilstm_attention": ("centralized", "bilstm_attention"),
    "lstm": ("centralized", "lstm"),
}

# published reference values (normalized scale, household 1); kept as annotation rows
REFERENCE_ROWS = (
    ("feddl", 0.08141, 0.16739),
    ("bilstm_attention", 0.07825, 0.15956),
    ("ann", 0.28376, 0.34675),
    ("lstm", 0.10956, 0.18266),
    ("ffann", 0.27869, 0.50923),
    ("arima", 0.28865, 0.55243),
    ("svm", 0.28914, 0.52826),
)

PRED_HEADER = ["timestamp", "true_watts", "pred_watts"]
COMPARE_HEADER = ["household", "model", "training", "mae_norm", "rmse_norm", "mae_watts", "rmse_watts"]


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str = "integrated"
    training: str = "centralized"
    model: str = "bilstm_attention"
    # decompose the aggregate with per-appliance CNN-LSTM models instead of using sub-metered channels
    nilm: bool = False
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    federated: FederatedConfig | None = None
    epochs: int = 20
    split: SplitSpec = SplitSpec(60, 10)
    disagg: DisaggConfig = field(default_factory=DisaggConfig)
    disagg_epochs: int = 10
    disagg_stride: int = 1
    household: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}")
        if self.training not in TRAININGS:
            raise ConfigError(f"training: must be one of {TRAININGS}")
        if self.model not in ("bilstm_attention", "lstm"):
            raise ConfigError("model: must be 'bilstm_attention' or 'lstm'")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.training == "federated" and self.federated is None:
            object.__setattr__(self, "federated", FederatedConfig(forecast=self.forecast))

    @property
    def forecast_config(self) -> ForecastConfig:
        return replace(self.forecast, kind=self.model)


@dataclass
class ChannelData:
    """One household's view of one forecast channel."""

    values: np.ndarray  # watts, train + test contiguous (may be NILM estimates)
    truth: np.ndarray | None  # true watts for the same span, if known
    stats: MinMaxStats
    n_train: int
    n_test: int

    def train_samples(self, W: int, h: int) -> Samples:
        return make_windows(self.stats.normalize(self.values[:self.n_train]), W, h)

    def test_samples(self, W: int, h: int) -> tuple[Samples, np.ndarray]:
        """Windows whose targets fall in the test block, plus target indices."""
        z = self.stats.normalize(self.values)
        first = max(self.n_train, W - 1 + h)
        idx = np.arange(first, self.n_train + self.n_test)
        X = np.stack([z[j - h - W + 1:j - h + 1] for j in idx])
        return Samples(X, z[idx]), idx


@dataclass
class HouseholdView:
    household_id: str
    timestamps: np.ndarray
    aggregate: np.ndarray
    agg_stats: MinMaxStats
    n_train: int
    n_test: int
    channels: dict[str, ChannelData]


@dataclass
class ExperimentResult:
    report_norm: MetricsReport
    report_watts: MetricsReport
    appliance_reports: dict[str, MetricsReport]
    final_train_loss: float
    files: list[Path] = field(default_factory=list)
    predictions: dict[str, np.ndarray] = field(default_factory=dict)


def _pad_edges(est: np.ndarray, n: int, W: int) -> np.ndarray:
    # disaggregation covers window midpoints only; replicate the edge estimates outward
    lead = W // 2
    tail = n - lead - len(est)
    return np.concatenate([np.full(lead, est[0]), est, np.full(tail, est[-1])])


def nilm_estimates(ds: HouseholdDataset, dcfg: DisaggConfig, n_train: int, epochs: int, stride: int = 1):
    """Per-appliance NILM estimates over the whole household.

    One disaggregator per appliance is fitted on the first ``n_train``
    samples (aggregate in, sub-metered appliance out), then applied to the
    full aggregate. Returns ``(estimates_watts, models)``, both keyed by
    appliance name.
    """
    if n_train < dcfg.window_len:
        raise ConfigError("disagg.window_len: longer than the training split")
    est, models = {}, {}
    for name, tr in ds.appliances.items():
        m = build_disaggregator(dcfg, appliance=name)
        m, _ = train_disaggregator(m, ds.aggregate.slice(0, n_train), tr.slice(0, n_train), epochs, stride=stride)
        est[name] = _pad_edges(disaggregate_values(m, ds.aggregate.values), len(ds), dcfg.window_len)
        models[name] = m
    return est, models


def household_view(ds: HouseholdDataset, spec: ExperimentSpec) -> HouseholdView:
    n_train, n_test = spec.split.sample_counts(ds.period)
    n = n_train + n_test
    if n > len(ds):
        raise ConfigError(
            f"split: needs {n} samples but household {ds.household_id!r} has {len(ds)}"
        )
    ds = ds.slice(0, n)
    agg = ds.aggregate.values
    chans: dict[str, ChannelData] = {}
    if spec.mode == "direct":
        chans["aggregate"] = ChannelData(agg, agg, MinMaxStats.fit(agg[:n_train]), n_train, n_test)
    else:
        if not ds.appliances:
            raise ConfigError(f"mode: integrated needs appliance channels; household {ds.household_id!r} has none")
        est = nilm_estimates(ds, spec.disagg, n_train, spec.disagg_epochs, spec.disagg_stride)[0] if spec.nilm else {}
        for name, tr in ds.appliances.items():
            vals = est[name] if spec.nilm else tr.values
            chans[name] = ChannelData(vals, tr.values, MinMaxStats.fit(vals[:n_train]), n_train, n_test)
    return HouseholdView(ds.household_id, ds.aggregate.timestamps, agg, MinMaxStats.fit(agg[:n_train]),
                         n_train, n_test, chans)


def _train_channel(views: Sequence[HouseholdView], name: str, training: str, fcfg: ForecastConfig,
                   epochs: int, fed: FederatedConfig | None, log_path: Path | None):
    W, h = fcfg.window_len, fcfg.horizon
    per_house = {v.household_id: v.channels[name].train_samples(W, h) for v in views}
    model = build_forecaster(fcfg)
    if training == "centralized":
        X = np.concatenate([s.X for s in per_house.values()])
        y = np.concatenate([s.y for s in per_house.values()])
        model, hist = train_supervised(model, (X, y), epochs)
        return model, (hist[-1] if hist else float("nan"))
    clients = [Client(hid, s) for hid, s in sorted(per_house.items())]
    val = [v.channels[name].test_samples(W, h)[0] for v in views]
    val = (np.concatenate([s.X for s in val]), np.concatenate([s.y for s in val]))
    res = run_federated(clients, replace(fed, forecast=fcfg), val, initial=model)
    if log_path is not None:
        write_round_logs(res.logs, log_path)
    return res.model, res.logs[-1].mean_local_loss


def _predict_view(models: Mapping[str, ForecastModel], view: HouseholdView, fcfg: ForecastConfig):
    W, h = fcfg.window_len, fcfg.horizon
    preds, idx = {}, None
    for name in sorted(view.channels):
        ch = view.channels[name]
        samples, idx = ch.test_samples(W, h)
        preds[name] = ch.stats.denormalize(predict(models[name], samples.X))
    total = np.zeros(len(idx))
    for name in sorted(preds):
        total = total + preds[name]
    return preds, total, idx


def prediction_csv(timestamps, truth, pred) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRED_HEADER)
    for t, a, b in zip(timestamps, truth, pred):
        w.writerow([int(t), repr(float(a)), repr(float(b))])
    return buf.getvalue()


def read_prediction_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PRED_HEADER:
        raise ValueError(f"{path}: expected header {','.join(PRED_HEADER)}")
    body = rows[1:]
    ts = np.array([int(r[0]) for r in body], dtype=np.int64)
    return ts, np.array([float(r[1]) for r in body]), np.array([float(r[2]) for r in body])


def _score(view: HouseholdView, total: np.ndarray, idx: np.ndarray):
    truth = view.aggregate[idx]
    watts = MetricsReport.compute(truth, total, "watts")
    s = view.agg_stats
    norm = MetricsReport.compute(s.normalize(truth), s.normalize(total), "normalized")
    return norm, watts


def _views(spec: ExperimentSpec, households: Sequence[HouseholdDataset]) -> list[HouseholdView]:
    if not households:
        raise ConfigError("data: no households given")
    views = [household_view(ds, spec) for ds in households]
    names = sorted(views[0].channels)
    for v in views:
        if sorted(v.channels) != names:
            raise ConfigError(f"data: household {v.household_id!r} channels {sorted(v.channels)} != {names}")
    return views


def train_forecasters(spec: ExperimentSpec, households: Sequence[HouseholdDataset],
                      views: Sequence[HouseholdView] | None = None):
    """One forecaster per channel, trained on every household's training split.

    Returns ``(models, final_losses)`` keyed by channel name. Centralized
    training pools every household's windows; federated training makes each
    household a client.
    """
    views = list(views) if views is not None else _views(spec, households)
    fcfg = spec.forecast_config
    out = Path(spec.out_dir) if spec.out_dir else None
    models, losses = {}, {}
    for name in sorted(views[0].channels):
        log = out / f"rounds_{name}.csv" if (out and spec.training == "federated") else None
        models[name], losses[name] = _train_channel(views, name, spec.training, fcfg, spec.epochs,
                                                    spec.federated, log)
    return models, losses


def evaluate_forecasters(models: Mapping[str, ForecastModel], view: HouseholdView, spec: ExperimentSpec,
                         final_train_loss: float | None = None) -> ExperimentResult:
    """Forecast the test block of one household and score the summed forecast.

    Writes ``pred_<channel>.csv`` (integrated mode), ``pred_total.csv`` and
    ``metrics.csv`` when ``spec.out_dir`` is set.
    """
    missing = sorted(set(view.channels) - set(models))
    if missing:
        raise ConfigError(f"models: no forecaster for channels {missing}")
    fcfg = spec.forecast_config
    preds, total, idx = _predict_view(models, view, fcfg)
    norm, watts = _score(view, total, idx)
    out = Path(spec.out_dir) if spec.out_dir else None
    app_reports, files = {}, []
    ts = view.timestamps[idx]
    if spec.mode == "integrated":
        for name in sorted(view.channels):
            truth = view.channels[name].truth[idx]
            app_reports[name] = MetricsReport.compute(truth, preds[name], "watts")
            if out:
                p = out / f"pred_{name}.csv"
                atomic_write_text(p, prediction_csv(ts, truth, preds[name]))
                files.append(p)
    if out:
        p = out / "pred_total.csv"
        atomic_write_text(p, prediction_csv(ts, view.aggregate[idx], total))
        files.append(p)
        p = out / "metrics.csv"
        atomic_write_text(p, metrics_csv([norm, watts], final_train_mse=final_train_loss))
        files.append(p)
    return ExperimentResult(norm, watts, app_reports, final_train_loss, files, {**preds, "total": total})


def run_experiment(spec: ExperimentSpec, households: Sequence[HouseholdDataset]) -> ExperimentResult:
    """Train per-channel forecasters on all ``households`` and score the target one.

    ``spec.household`` picks the evaluated household (default: the first).
    """
    views = _views(spec, households)
    target = next((v for v in views if v.household_id == spec.household), None) if spec.household else views[0]
    if target is None:
        raise ConfigError(f"household: {spec.household!r} not among {[v.household_id for v in views]}")
    models, losses = train_forecasters(spec, households, views)
    return evaluate_forecasters(models, target, spec, float(np.mean(list(losses.values()))))


def metrics_csv(reports: Sequence[MetricsReport], final_train_mse: float | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scale", "mae", "rmse", "n_points", "final_train_mse"])
    for r in reports:
        w.writerow([r.scale, repr(r.mae), repr(r.rmse), r.n_points,
                    "" if final_train_mse is None else repr(final_train_mse)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# model comparison
# --------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    household: str
    model: str
    training: str
    mae_norm: float | None
    rmse_norm: float | None
    mae_watts: float | None
    rmse_watts: float | None
    final_train_mse: float | None = None


def compare_models(households: Sequence[HouseholdDataset], model_names: Sequence[str] = tuple(COMPARE_MODELS),
                   base: ExperimentSpec | None = None) -> list[ComparisonRow]:
    """Integrated forecasting error per (household, model) on shared channel inputs.

    Channels (sub-metered or NILM-decomposed, per ``base.nilm``) are computed
    once and reused by every model.
    """
    base = base or ExperimentSpec()
    if not households:
        raise ConfigError("data: no households given")
    for m in model_names:
        if m not in COMPARE_MODELS:
            raise ConfigError(f"models: unknown model {m!r}; buildable: {sorted(COMPARE_MODELS)}")
    spec = replace(base, mode="integrated")
    views = [household_view(ds, spec) for ds in households]
    names = sorted(views[0].channels)
    rows = []
    for m in model_names:
        training, kind = COMPARE_MODELS[m]
        fcfg = replace(base.forecast, kind=kind)
        fed = base.federated or FederatedConfig(forecast=fcfg)
        models, losses = {}, []
        for name in names:
            models[name], loss = _train_channel(views, name, training, fcfg, base.epochs, fed, None)
            losses.append(loss)
        for v in views:
            _, total, idx = _predict_view(models, v, fcfg)
            norm, watts = _score(v, total, idx)
            rows.append(ComparisonRow(v.household_id, m, training, norm.mae, norm.rmse, watts.mae, watts.rmse,
                                      float(np.mean(losses))))
    return rows


def reference_rows() -> list[ComparisonRow]:
    return [ComparisonRow("reference", m, "published", a, b, None, None) for m, a, b in REFERENCE_ROWS]


def _fmt(x):
    return "" if x is None else repr(float(x))


def comparison_csv(rows: Sequence[ComparisonRow], include_reference: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_HEADER)
    for r in list(rows) + (reference_rows() if include_reference else []):
        w.writerow([r.household, r.model, r.training, _fmt(r.mae_norm), _fmt(r.rmse_norm),
                    _fmt(r.mae_watts), _fmt(r.rmse_watts)])
    return buf.getvalue()


def comparison_loss_csv(rows: Sequence[ComparisonRow]) -> str:
    """Stand-in for the unspecified 'loss' panel: final-epoch training MSE (normalized)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["household", "model", "final_train_mse"])
    for r in rows:
        w.writerow([r.household, r.model, _fmt(r.final_train_mse)])
    return buf.getvalue()


def read_comparison_csv(path) -> list[ComparisonRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != COMPARE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(COMPARE_HEADER)}")

    def num(s):
        return None if s == "" else float(s)

    return [ComparisonRow(r[0], r[1], r[2], *(num(x) for x in r[3:7])) for r in rows[1:]]


def mean_mae(rows: Sequence[ComparisonRow], model: str, scale: str = "norm") -> float:
    vals = [getattr(r, f"mae_{scale}") for r in rows if r.model == model and r.household != "reference"]
    if not vals:
        raise KeyError(f"no rows for model {model!r}")
    return float(np.mean(vals))
