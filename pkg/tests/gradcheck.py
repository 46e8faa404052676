"""Shared finite-difference gradient checks.

Each ``check_*`` builds a random small instance (parameters ~ U(-0.5, 0.5)),
wraps the layer's inputs and parameters into one ParamTree, and returns the
worst relative error between the analytic backward pass and central
differences at h = 1e-5. Layer objectives are random linear functionals of
the layer output, so every output element feeds the gradient.
"""
import numpy as np

from fedload import layers as L
from fedload.diffcore import ParamTree, finite_difference_gradient, max_relative_error
from fedload.models import (
    ForecastConfig,
    ForecastModel,
    build_forecaster,
    forecast_loss,
    forecast_loss_and_grad,
    predict,
)

H = 1e-5


def _uniform(rng, shape):
    return rng.uniform(-0.5, 0.5, size=shape)


def _compare(f, grad_fn, tree):
    analytic = ParamTree(grad_fn(tree))
    numeric = finite_difference_gradient(f, tree, H)
    return max_relative_error(analytic, numeric)


def check_conv1d(seed):
    rng = np.random.default_rng(seed)
    B, cin, cout, k, n = 2, 2, 3, 3, 7
    tree = ParamTree({"x": rng.normal(size=(B, cin, n)), "kernels": _uniform(rng, (cout, cin, k)),
                      "bias": _uniform(rng, cout)})
    act = ("identity", "tanh")[seed % 2]
    c = rng.normal(size=(B, cout, n - k + 1))

    def f(t):
        out, _ = L.conv1d_forward(t["x"], L.Conv1dParams(t["kernels"], t["bias"]), act)
        return float(np.sum(c * out))

    def g(t):
        _, cache = L.conv1d_forward(t["x"], L.Conv1dParams(t["kernels"], t["bias"]), act)
        dx, gp = L.conv1d_backward(cache, c)
        return {"x": dx, "kernels": gp.kernels, "bias": gp.bias}

    return _compare(f, g, tree)


def _cell_tree(rng, prefix, n_in, hidden):
    p = L.LstmCellParams.init(rng, n_in, hidden)
    return {k: _uniform(rng, v.shape) for k, v in p.to_dict(prefix).items()}


def check_lstm_cell(seed):
    rng = np.random.default_rng(seed)
    n_in, hid, B = 3, 4, 2
    d = _cell_tree(rng, "cell", n_in, hid)
    d.update({"x": rng.normal(size=(B, n_in)), "h0": _uniform(rng, (B, hid)), "c0": rng.normal(size=(B, hid))})
    tree = ParamTree(d)
    ch, cc = rng.normal(size=(B, hid)), rng.normal(size=(B, hid))

    def run(t):
        p = L.LstmCellParams.from_dict(t, "cell")
        return L.lstm_cell_forward(L.LstmState(t["c0"], t["h0"]), t["x"], p)

    def f(t):
        s, _ = run(t)
        return float(np.sum(ch * s.hidden) + np.sum(cc * s.cell))

    def g(t):
        _, cache = run(t)
        dx, dprev, gp = L.lstm_cell_backward(cache, ch, cc)
        return {**gp.to_dict("cell"), "x": dx, "h0": dprev.hidden, "c0": dprev.cell}

    return _compare(f, g, tree)


def check_lstm_sequence(seed, T=5):
    rng = np.random.default_rng(seed)
    n_in, hid, B = 2, 3, 2
    d = _cell_tree(rng, "cell", n_in, hid)
    d["xs"] = rng.normal(size=(B, T, n_in))
    tree = ParamTree(d)
    c = rng.normal(size=(B, T, hid))

    def f(t):
        hs, _ = L.lstm_forward(t["xs"], L.LstmCellParams.from_dict(t, "cell"))
        return float(np.sum(c * hs))

    def g(t):
        _, cache = L.lstm_forward(t["xs"], L.LstmCellParams.from_dict(t, "cell"))
        dxs, gp = L.lstm_backward(cache, c)
        return {**gp.to_dict("cell"), "xs": dxs}

    return _compare(f, g, tree)


def check_bilstm_stack(seed, T=6):
    rng = np.random.default_rng(seed)
    n_in, h1, h2, B = 2, 4, 3, 2
    d = {}
    for name, (i, h) in {"l1": (n_in, h1), "l2": (h1, h2)}.items():
        p = L.BiLstmParams.init(rng, i, h)
        d.update({k: _uniform(rng, v.shape) for k, v in p.to_dict(name).items()})
    d["xs"] = rng.normal(size=(B, T, n_in))
    tree = ParamTree(d)
    c = rng.normal(size=(B, T, h2))

    def run(t):
        o1, c1 = L.bilstm_forward(t["xs"], L.BiLstmParams.from_dict(t, "l1"))
        o2, c2 = L.bilstm_forward(o1, L.BiLstmParams.from_dict(t, "l2"))
        return o2, c1, c2

    def f(t):
        return float(np.sum(c * run(t)[0]))

    def g(t):
        _, c1, c2 = run(t)
        do1, g2 = L.bilstm_backward(c2, c)
        dxs, g1 = L.bilstm_backward(c1, do1)
        return {**g1.to_dict("l1"), **g2.to_dict("l2"), "xs": dxs}

    return _compare(f, g, tree)


def check_attention(seed):
    rng = np.random.default_rng(seed)
    B, T, F = 2, 5, 4
    tree = ParamTree({"S": rng.normal(size=(B, T, F)), "W_score": _uniform(rng, (1, F)),
                      "b_score": _uniform(rng, 1)})
    c = rng.normal(size=(B, F))

    def f(t):
        Y, _, _ = L.attention_forward(t["S"], L.AttentionParams(t["W_score"], t["b_score"]))
        return float(np.sum(c * Y))

    def g(t):
        _, _, cache = L.attention_forward(t["S"], L.AttentionParams(t["W_score"], t["b_score"]))
        dS, gp = L.attention_backward(cache, c)
        return {"S": dS, "W_score": gp.W_score, "b_score": gp.b_score}

    return _compare(f, g, tree)


def check_dense(seed):
    rng = np.random.default_rng(seed)
    B, n_in, n_out = 3, 5, 4
    act = ("sigmoid", "tanh", "identity")[seed % 3]
    tree = ParamTree({"x": rng.normal(size=(B, n_in)), "W": _uniform(rng, (n_out, n_in)),
                      "b": _uniform(rng, n_out)})
    c = rng.normal(size=(B, n_out))

    def f(t):
        return float(np.sum(c * L.dense_forward(t["x"], t["W"], t["b"], act)[0]))

    def g(t):
        _, cache = L.dense_forward(t["x"], t["W"], t["b"], act)
        dx, gp = L.dense_backward(cache, c)
        return {"x": dx, "W": gp.W, "b": gp.b}

    return _compare(f, g, tree)


def check_forecaster(seed, kind="bilstm_attention"):
    """Full forecaster MSE on a 2-sample batch (W=4, hidden 3/2).

    Targets sit within 0.05 of the current predictions: this keeps the
    objective's magnitude (and so the round-off in the central differences)
    small relative to the smallest gradient components.
    """
    rng = np.random.default_rng(seed)
    cfg = ForecastConfig(window_len=4, layer1_hidden=3, layer2_hidden=2, kind=kind)
    params = build_forecaster(cfg, rng).params.map(lambda v: _uniform(rng, v.shape))
    X = rng.random((2, 4))
    y = predict(ForecastModel(params, cfg), X) + rng.uniform(-0.05, 0.05, 2)
    _, analytic = forecast_loss_and_grad(params, cfg, X, y)
    numeric = finite_difference_gradient(lambda p: forecast_loss(p, cfg, X, y), params, H)
    return max_relative_error(analytic, numeric)
