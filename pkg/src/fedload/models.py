"""Task networks: the BiLSTM-attention load forecaster (plus a plain-LSTM
baseline) and the CNN-LSTM seq2point disaggregator, with their training loops
and checkpoint format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping

import numpy as np

from . import layers as L
from .data import HouseholdDataset, MinMaxStats, PowerTrace, Samples, atomic_write_text
from .diffcore import ParamTree, ShapeError

CHECKPOINT_VERSION = 1
FORECAST_KINDS = ("bilstm_attention", "lstm")


class ConfigError(ValueError):
    pass


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{name}: {msg}")


# --------------------------------------------------------------------------
# forecaster
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastConfig:
    window_len: int = 32
    layer1_hidden: int = 16
    layer2_hidden: int = 8
    lr: float = 0.001
    batch_size: int = 32
    seed: int = 0
    kind: str = "bilstm_attention"
    horizon: int = 1

    def __post_init__(self):
        _require(isinstance(self.window_len, int) and self.window_len >= 2, "window_len", "must be an integer >= 2")
        _require(isinstance(self.layer1_hidden, int) and self.layer1_hidden >= 1, "layer1_hidden", "must be >= 1")
        _require(isinstance(self.layer2_hidden, int) and self.layer2_hidden >= 1, "layer2_hidden", "must be >= 1")
        _require(self.lr > 0, "lr", "must be > 0")
        _require(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.kind in FORECAST_KINDS, "kind", f"must be one of {FORECAST_KINDS}")
        _require(isinstance(self.horizon, int) and self.horizon >= 1, "horizon", "must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "ForecastConfig":
        """Full-size layer widths and batch size (slow on CPU)."""
        kw = dict(layer1_hidden=128, layer2_hidden=68, batch_size=512, lr=0.001)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class ForecastModel:
    params: ParamTree
    config: ForecastConfig
    # normalization of the forecast channel; None means the model works on normalized values only
    stats: MinMaxStats | None = None

    def with_params(self, params: ParamTree) -> "ForecastModel":
        return replace(self, params=params)


def init_forecast_params(config: ForecastConfig, rng: np.random.Generator) -> ParamTree:
    d = {}
    if config.kind == "bilstm_attention":
        d.update(L.BiLstmParams.init(rng, 1, config.layer1_hidden).to_dict("l1"))
        d.update(L.BiLstmParams.init(rng, config.layer1_hidden, config.layer2_hidden).to_dict("l2"))
        d.update(L.AttentionParams.init(rng, config.layer2_hidden).to_dict("attn"))
        d.update(L.DenseParams.init(rng, config.layer2_hidden, 1).to_dict("head"))
    else:
        d.update(L.LstmCellParams.init(rng, 1, config.layer1_hidden).to_dict("l1"))
        d.update(L.DenseParams.init(rng, config.layer1_hidden, 1).to_dict("head"))
    return ParamTree(d)


def build_forecaster(config: ForecastConfig | None = None, rng: np.random.Generator | None = None,
                     stats: MinMaxStats | None = None) -> ForecastModel:
    config = config or ForecastConfig()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return ForecastModel(init_forecast_params(config, rng), config, stats)


def _forecast_forward(params: ParamTree, config: ForecastConfig, X: np.ndarray):
    xs = X[:, :, None]
    if config.kind == "bilstm_attention":
        p1 = L.BiLstmParams.from_dict(params, "l1")
        p2 = L.BiLstmParams.from_dict(params, "l2")
        pa = L.AttentionParams.from_dict(params, "attn")
        o1, c1 = L.bilstm_forward(xs, p1)
        o2, c2 = L.bilstm_forward(o1, p2)
        ctx, _, ca = L.attention_forward(o2, pa)
        out, cd = L.dense_forward(ctx, params["head.W"], params["head.b"], "sigmoid")
        return out[:, 0], (c1, c2, ca, cd)
    p1 = L.LstmCellParams.from_dict(params, "l1")
    hs, c1 = L.lstm_forward(xs, p1)
    out, cd = L.dense_forward(hs[:, -1], params["head.W"], params["head.b"], "sigmoid")
    return out[:, 0], (c1, hs.shape, cd)


def _forecast_backward(config: ForecastConfig, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    dout = dout[:, None]
    if config.kind == "bilstm_attention":
        c1, c2, ca, cd = cache
        dctx, gh = L.dense_backward(cd, dout)
        do2, ga = L.attention_backward(ca, dctx)
        do1, g2 = L.bilstm_backward(c2, do2)
        _, g1 = L.bilstm_backward(c1, do1)
        return {**g1.to_dict("l1"), **g2.to_dict("l2"), **ga.to_dict("attn"), **gh.to_dict("head")}
    c1, hshape, cd = cache
    dlast, gh = L.dense_backward(cd, dout)
    dhs = np.zeros(hshape)
    dhs[:, -1] = dlast
    _, g1 = L.lstm_backward(c1, dhs)
    return {**g1.to_dict("l1"), **gh.to_dict("head")}


def _check_windows(X, W: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != W:
        raise ShapeError(f"expected windows of length {W}, got array of shape {X.shape}")
    return X


def predict(model: ForecastModel, windows) -> np.ndarray:
    """Normalized one-step predictions for a ``(n, W)`` block of normalized windows."""
    X = _check_windows(windows, model.config.window_len)
    return _forecast_forward(model.params, model.config, X)[0]


def forecast_forward(model: ForecastModel, window) -> float:
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 1 or len(w) != model.config.window_len:
        raise ShapeError(f"expected a window of length {model.config.window_len}, got shape {w.shape}")
    return float(predict(model, w[None])[0])


def forecast_loss_and_grad(params: ParamTree, config: ForecastConfig, X, y):
    """Mean squared error over the batch and its gradient w.r.t. ``params``."""
    X = _check_windows(X, config.window_len)
    y = np.asarray(y, dtype=np.float64)
    pred, cache = _forecast_forward(params, config, X)
    r = pred - y
    loss = float(np.mean(r * r))
    grads = _forecast_backward(config, cache, 2.0 * r / len(y))
    return loss, ParamTree(grads)


def forecast_loss(params: ParamTree, config: ForecastConfig, X, y) -> float:
    X = _check_windows(X, config.window_len)
    pred = _forecast_forward(params, config, X)[0]
    return float(np.mean((pred - np.asarray(y)) ** 2))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order keyed by (seed, global epoch index)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class FitResult:
    params: ParamTree
    opt_state: L.AdamState
    history: list[float] = field(default_factory=list)


def fit(params: ParamTree, loss_and_grad: Callable, X: np.ndarray, y: np.ndarray, epochs: int,
        batch_size: int, lr: float, seed: int, start_epoch: int = 0,
        opt_state: L.AdamState | None = None) -> FitResult:
    """Minibatch Adam. Epoch ``k`` (global index ``start_epoch + k``) uses its own shuffle."""
    n = len(y)
    if n == 0:
        raise ValueError("no training samples")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    state = opt_state if opt_state is not None else L.AdamState.zeros_like(params)
    history = []
    for k in range(epochs):
        perm = epoch_permutation(n, seed, start_epoch + k)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            loss, grads = loss_and_grad(params, X[idx], y[idx])
            total += loss * len(idx)
            params, state = L.adam_step(params, grads, state, lr)
        history.append(total / n)
    return FitResult(params, state, history)


def _as_samples(samples) -> Samples:
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[0]) == 2:
        X, y = samples
    else:
        pairs = list(samples)
        if not pairs:
            raise ValueError("no training samples")
        X = np.array([p[0] for p in pairs], dtype=np.float64)
        y = np.array([p[1] for p in pairs], dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("no training samples")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} windows but {len(y)} targets")
    return Samples(X, y)


def train_supervised(model: ForecastModel, samples, epochs: int, batch_size: int | None = None,
                     lr: float | None = None, seed: int | None = None, start_epoch: int = 0,
                     opt_state: L.AdamState | None = None, return_state: bool = False):
    """Train on ``(window, target)`` samples with MSE + Adam.

    Returns ``(model, loss_history)``, or ``(model, loss_history, adam_state)``
    when ``return_state`` is set.
    """
    cfg = model.config
    X, y = _as_samples(samples)
    X = _check_windows(X, cfg.window_len)
    y = np.clip(y, 0.0, 1.0)
    res = fit(
        model.params,
        lambda p, xb, yb: forecast_loss_and_grad(p, cfg, xb, yb),
        X, y, epochs,
        batch_size or cfg.batch_size,
        cfg.lr if lr is None else lr,
        cfg.seed if seed is None else seed,
        start_epoch, opt_state,
    )
    out = model.with_params(res.params)
    if return_state:
        return out, res.history, res.opt_state
    return out, res.history


# --------------------------------------------------------------------------
# integrated forecast
# --------------------------------------------------------------------------

def sum_predictions(preds: Mapping[str, float]) -> float:
    """Sum in lexicographic key order so the result does not depend on insertion order."""
    total = 0.0
    for k in sorted(preds):
        total += float(preds[k])
    return total


def forecast_watts(model: ForecastModel, history_watts) -> float:
    if model.stats is None:
        raise ConfigError("stats: forecaster has no normalization stats; cannot work in watts")
    h = np.asarray(history_watts, dtype=np.float64)[-model.config.window_len:]
    z = forecast_forward(model, model.stats.normalize(h))
    return float(model.stats.denormalize(z))


def integrated_forecast(forecasters: Mapping[str, ForecastModel], histories: Mapping[str, np.ndarray]) -> float:
    """Total watts = sum of per-appliance next-step forecasts."""
    if set(forecasters) != set(histories):
        raise KeyError(
            f"appliance sets differ: forecasters {sorted(forecasters)} vs histories {sorted(histories)}"
        )
    return sum_predictions({k: forecast_watts(forecasters[k], histories[k]) for k in forecasters})


# --------------------------------------------------------------------------
# disaggregator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DisaggConfig:
    window_len: int = 64
    conv_layers: int = 2
    conv_filters: int = 16
    conv_kernel: int = 5
    pool: int = 2
    lstm_hidden: int = 32
    mapping_dim: int = 32
    lr: float = 0.001
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for f in ("window_len", "conv_layers", "conv_filters", "conv_kernel", "pool", "lstm_hidden",
                  "mapping_dim", "batch_size"):
            v = getattr(self, f)
            _require(isinstance(v, int) and v >= 1, f, "must be an integer >= 1")
        _require(self.lr > 0, "lr", "must be > 0")
        _require(self.cnn_out_len() >= 1, "window_len", "too short for the convolution/pooling stack")

    def cnn_out_len(self) -> int:
        n = self.window_len
        for _ in range(self.conv_layers):
            n = n - self.conv_kernel + 1
            if n < self.pool:
                return 0
            n = (n - self.pool) // self.pool + 1
        return n


@dataclass(frozen=True)
class DisaggModel:
    """Seq2point network for one appliance plus its input/output normalization."""

    appliance: str
    params: ParamTree
    config: DisaggConfig
    input_stats: MinMaxStats = MinMaxStats(0.0, 1.0)
    output_stats: MinMaxStats = MinMaxStats(0.0, 1.0)


def build_disaggregator(config: DisaggConfig | None = None, rng: np.random.Generator | None = None,
                        appliance: str = "appliance") -> DisaggModel:
    cfg = config or DisaggConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    d = {}
    in_ch = 1
    for i in range(cfg.conv_layers):
        d.update(L.Conv1dParams.init(rng, in_ch, cfg.conv_filters, cfg.conv_kernel).to_dict(f"cnn.conv{i}"))
        in_ch = cfg.conv_filters
    flat = cfg.conv_filters * cfg.cnn_out_len()
    d.update(L.DenseParams.init(rng, flat, cfg.mapping_dim).to_dict("cnn.map"))
    d.update(L.LstmCellParams.init(rng, 1, cfg.lstm_hidden).to_dict("rnn.cell"))
    d.update(L.DenseParams.init(rng, cfg.lstm_hidden, cfg.mapping_dim).to_dict("rnn.map"))
    d.update(L.DenseParams.init(rng, 2 * cfg.mapping_dim, 1).to_dict("head"))
    return DisaggModel(appliance, ParamTree(d), cfg)


def _disagg_forward(params: ParamTree, cfg: DisaggConfig, X: np.ndarray):
    caches = []
    h = X[:, None, :]
    for i in range(cfg.conv_layers):
        h, cc = L.conv1d_forward(h, L.Conv1dParams.from_dict(params, f"cnn.conv{i}"), "relu")
        h, cp = L.max_pool1d_forward(h, cfg.pool, cfg.pool)
        caches.append((cc, cp))
    shape = h.shape
    m1, cm1 = L.dense_forward(h.reshape(len(X), -1), params["cnn.map.W"], params["cnn.map.b"], "tanh")
    hs, cr = L.lstm_forward(X[:, :, None], L.LstmCellParams.from_dict(params, "rnn.cell"))
    m2, cm2 = L.dense_forward(hs[:, -1], params["rnn.map.W"], params["rnn.map.b"], "tanh")
    out, ch = L.dense_forward(np.concatenate([m1, m2], axis=1), params["head.W"], params["head.b"])
    return out[:, 0], (caches, shape, cm1, cr, hs.shape, cm2, ch)


def _disagg_backward(cfg: DisaggConfig, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    caches, shape, cm1, cr, hshape, cm2, ch = cache
    g = {}
    dcat, gh = L.dense_backward(ch, dout[:, None])
    g.update(gh.to_dict("head"))
    d1, d2 = dcat[:, :cfg.mapping_dim], dcat[:, cfg.mapping_dim:]
    dlast, gm2 = L.dense_backward(cm2, d2)
    g.update(gm2.to_dict("rnn.map"))
    dhs = np.zeros(hshape)
    dhs[:, -1] = dlast
    _, gr = L.lstm_backward(cr, dhs)
    g.update(gr.to_dict("rnn.cell"))
    dflat, gm1 = L.dense_backward(cm1, d1)
    g.update(gm1.to_dict("cnn.map"))
    dh = dflat.reshape(shape)
    for i in range(cfg.conv_layers - 1, -1, -1):
        cc, cp = caches[i]
        dh = L.max_pool1d_backward(cp, dh)
        dh, gc = L.conv1d_backward(cc, dh)
        g.update(gc.to_dict(f"cnn.conv{i}"))
    return g


def disagg_loss_and_grad(params: ParamTree, cfg: DisaggConfig, X, y):
    pred, cache = _disagg_forward(params, cfg, np.asarray(X, dtype=np.float64))
    r = pred - np.asarray(y, dtype=np.float64)
    loss = float(np.mean(r * r))
    return loss, ParamTree(_disagg_backward(cfg, cache, 2.0 * r / len(r)))


def seq2point_samples(aggregate_norm: np.ndarray, appliance_norm: np.ndarray, window: int,
                      stride: int = 1) -> Samples:
    """Aggregate windows paired with the appliance value at each window's midpoint."""
    n = len(aggregate_norm) - window + 1
    starts = np.arange(0, n, stride)
    X = np.lib.stride_tricks.sliding_window_view(aggregate_norm, window)[starts]
    y = appliance_norm[starts + window // 2]
    return Samples(X.copy(), y.copy())


def train_disaggregator(model: DisaggModel, aggregate: PowerTrace, appliance_truth: PowerTrace,
                        epochs: int, stride: int = 1, lr: float | None = None):
    """Fit normalization on the given (training) traces, then seq2point training.

    Returns ``(model, loss_history)``.
    """
    if (aggregate.start_time, aggregate.period, len(aggregate)) != (
        appliance_truth.start_time, appliance_truth.period, len(appliance_truth)
    ):
        from .data import AlignmentError

        raise AlignmentError(f"aggregate and {model.appliance!r} traces are not aligned")
    cfg = model.config
    if len(aggregate) < cfg.window_len:
        raise ShapeError(f"trace of length {len(aggregate)} shorter than window {cfg.window_len}")
    in_stats = MinMaxStats.fit(aggregate.values)
    out_stats = MinMaxStats.fit(appliance_truth.values)
    X, y = seq2point_samples(in_stats.normalize(aggregate.values), out_stats.normalize(appliance_truth.values),
                             cfg.window_len, stride)
    res = fit(model.params, lambda p, xb, yb: disagg_loss_and_grad(p, cfg, xb, yb), X, y, epochs,
              cfg.batch_size, cfg.lr if lr is None else lr, cfg.seed)
    return replace(model, params=res.params, input_stats=in_stats, output_stats=out_stats), res.history


def disaggregate_values(model: DisaggModel, aggregate_watts) -> np.ndarray:
    """Watts estimates for every full window midpoint, clamped at 0."""
    agg = np.asarray(aggregate_watts, dtype=np.float64)
    W = model.config.window_len
    if len(agg) < W:
        raise ShapeError(f"aggregate of length {len(agg)} shorter than window {W}")
    X = np.lib.stride_tricks.sliding_window_view(model.input_stats.normalize(agg), W)
    out = []
    for s in range(0, len(X), 1024):
        out.append(_disagg_forward(model.params, model.config, X[s:s + 1024])[0])
    z = np.concatenate(out)
    return np.maximum(model.output_stats.denormalize(z), 0.0)


def disaggregate(models: Mapping[str, DisaggModel], aggregate: PowerTrace) -> dict[str, PowerTrace]:
    """Per-appliance traces on the valid midpoint range of ``aggregate``."""
    out = {}
    for name in sorted(models):
        m = models[name]
        vals = disaggregate_values(m, aggregate.values)
        start = aggregate.start_time + (m.config.window_len // 2) * aggregate.period
        out[name] = PowerTrace(start, aggregate.period, vals)
    return out


def disaggregate_household(models: Mapping[str, DisaggModel], ds: HouseholdDataset) -> HouseholdDataset:
    """Replace the appliance channels of ``ds`` by NILM estimates (trimmed to the valid range)."""
    windows = {m.config.window_len for m in models.values()}
    if len(windows) != 1:
        raise ConfigError("window_len: all disaggregators must share one window length")
    W = windows.pop()
    est = disaggregate(models, ds.aggregate)
    agg = ds.aggregate.slice(W // 2, W // 2 + len(ds) - W + 1)
    return HouseholdDataset(ds.household_id, agg, est)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _params_to_json(p: ParamTree) -> list:
    return [{"path": k, "shape": list(v.shape), "data": v.ravel().tolist()} for k, v in p.items()]


def _params_from_json(entries) -> ParamTree:
    return ParamTree({e["path"]: np.array(e["data"], dtype=np.float64).reshape(e["shape"]) for e in entries})


def _stats_json(s: MinMaxStats | None):
    return None if s is None else [s.min, s.max]


def _stats_from(v):
    return None if v is None else MinMaxStats(float(v[0]), float(v[1]))


def checkpoint_dumps(model: ForecastModel | DisaggModel) -> str:
    if isinstance(model, ForecastModel):
        doc = {"format_version": CHECKPOINT_VERSION, "kind": "forecaster", "config": asdict(model.config),
               "stats": _stats_json(model.stats), "params": _params_to_json(model.params)}
    else:
        doc = {"format_version": CHECKPOINT_VERSION, "kind": "disaggregator", "appliance": model.appliance,
               "config": asdict(model.config), "input_stats": _stats_json(model.input_stats),
               "output_stats": _stats_json(model.output_stats), "params": _params_to_json(model.params)}
    return json.dumps(doc, indent=1)


def checkpoint_loads(text: str) -> ForecastModel | DisaggModel:
    doc = json.loads(text)
    ver = doc.get("format_version")
    if ver != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {ver!r}")
    params = _params_from_json(doc["params"])
    if doc["kind"] == "forecaster":
        cfg = ForecastConfig(**doc["config"])
        expected = init_forecast_params(cfg, np.random.default_rng(0)).layout()
        if params.layout() != expected:
            raise ValueError("checkpoint parameters do not match the configured architecture")
        return ForecastModel(params, cfg, _stats_from(doc["stats"]))
    if doc["kind"] == "disaggregator":
        cfg = DisaggConfig(**doc["config"])
        return DisaggModel(doc["appliance"], params, cfg, _stats_from(doc["input_stats"]),
                           _stats_from(doc["output_stats"]))
    raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")


def save_checkpoint(model, path) -> None:
    atomic_write_text(path, checkpoint_dumps(model))


def load_checkpoint(path):
    with open(path) as fh:
        return checkpoint_loads(fh.read())


def config_field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
